//! Topic-partitioned experience stores: persistence, the retrieval/ingest/
//! refine wire API, and the size-triggered refinement cycle.

pub mod service;
pub mod storage;
pub mod store;

pub use service::{ExperienceService, InProcessTransport};
pub use storage::{LogPayload, LogRecord};
pub use store::{PutAck, StoreError, StoreStats, TopicStore};
