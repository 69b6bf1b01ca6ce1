//! Experience store: clients capture interaction episodes and distill them into
//! topic-labeled experiences; topic-partitioned servers store, retrieve (Okapi
//! BM25), and periodically condense them; a harness replays the whole loop as
//! deterministic, seeded experiments.

pub mod client;
pub mod config;
pub mod domain;
pub mod gateway;
pub mod harness;
pub mod index;
pub mod net;
pub mod refine;
pub mod server;

pub use domain::{Episode, EpisodeId, Event, Experience, ExperienceId, Query, RetrievalHit, Role, TopicLabel};
pub use index::{Bm25Params, CorpusStats};
