//! Experiment harness: seeded, deterministic reproductions of the three
//! experimental procedures (repetitive recall, train/test generalization,
//! refinement sweep) plus a similarity-distribution report over a store.
//!
//! Everything runs against the in-process service with the mock gateway and
//! a manual clock. All randomness flows through per-(seed, epoch, client)
//! derived ChaCha streams and every aggregation walks a sorted order, so a
//! fixed seed reproduces each report byte for byte.

pub mod dataset;
pub mod generalize;
pub mod repetitive;
pub mod report;
pub mod similarity;
pub mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::client::{Client, ClientError, ClientOptions, MissingDefaultRoute, RoutingTable};
use crate::domain::{ManualClock, TopicLabel};
use crate::gateway::{mock::MockGateway, GatewayError};
use crate::index::{tokenize, Bm25Params};
use crate::server::{ExperienceService, InProcessTransport, StoreError};

pub use dataset::{load_dataset, MalformedLines, QaItem};
pub use generalize::{run_generalization, GeneralizationParams, GeneralizationReport};
pub use repetitive::{run_repetitive, EpochReport, RepetitiveParams};
pub use report::{report_emit, Report, ReportFormat};
pub use similarity::{similarity_report, SimilarityReport, SIMILARITY_BINS};
pub use sweep::{run_refinement_sweep, SweepParams, SweepReport, SweepRow};

/// Anything an experiment run can fail with. `exit_code` partitions these
/// into the CLI's two failure classes.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read dataset {path}: {source}")]
    DatasetIo { path: PathBuf, source: io::Error },
    #[error("malformed dataset lines:\n{0}")]
    DatasetMalformed(MalformedLines),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("store holds fewer than two experiences; no pairs to compare")]
    NoPairs,
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("client: {0}")]
    Client(#[from] ClientError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Routing(#[from] MissingDefaultRoute),
    #[error("cannot write report {path}: {source}")]
    ReportIo { path: PathBuf, source: io::Error },
    #[error("workspace io: {0}")]
    WorkIo(#[from] io::Error),
}

impl HarnessError {
    /// 1 for problems with the caller's inputs (bad dataset, bad parameters,
    /// nothing to report on); 2 for runtime failures underneath a valid
    /// request.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::DatasetIo { .. }
            | HarnessError::DatasetMalformed(_)
            | HarnessError::InvalidParams(_)
            | HarnessError::NoPairs => 1,
            HarnessError::Store(_)
            | HarnessError::Client(_)
            | HarnessError::Gateway(_)
            | HarnessError::Routing(_)
            | HarnessError::ReportIo { .. }
            | HarnessError::WorkIo(_) => 2,
        }
    }
}

/// Mixes a base seed with two stream coordinates into an independent RNG
/// seed. Splitmix-style finalizer so adjacent coordinates land far apart.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fallback topic when a dataset names none.
pub const FALLBACK_TOPIC: &str = "general";

/// Derives the mock classifier's keyword lists from the dataset itself: a
/// token becomes a keyword for a topic when it occurs in that topic's
/// questions and nowhere else. Shared tokens identify nothing and are
/// dropped.
pub fn topic_keywords(items: &[QaItem]) -> BTreeMap<TopicLabel, Vec<String>> {
    let mut by_topic: BTreeMap<TopicLabel, BTreeSet<String>> = BTreeMap::new();
    for item in items {
        let tokens = by_topic.entry(item.topic.clone()).or_default();
        for token in tokenize(&item.question) {
            tokens.insert(token);
        }
    }
    let mut owners: BTreeMap<&str, usize> = BTreeMap::new();
    for tokens in by_topic.values() {
        for token in tokens {
            *owners.entry(token).or_insert(0) += 1;
        }
    }
    by_topic
        .iter()
        .map(|(topic, tokens)| {
            let distinctive =
                tokens.iter().filter(|t| owners[t.as_str()] == 1).cloned().collect::<Vec<_>>();
            (topic.clone(), distinctive)
        })
        .collect()
}

/// The default topic an experiment routes to: the lexicographically first
/// topic in the dataset, or [`FALLBACK_TOPIC`] for an empty one.
pub fn default_topic_for(items: &[QaItem]) -> TopicLabel {
    items
        .iter()
        .map(|i| i.topic.clone())
        .min()
        .unwrap_or_else(|| TopicLabel::new(FALLBACK_TOPIC).expect("valid literal"))
}

/// BM25 settings the experiments run under. IDF clamping is on so small
/// desk-scale corpora rank by term frequency instead of being drowned by
/// negative IDF on common terms.
pub fn experiment_params() -> Bm25Params {
    Bm25Params { clamp_idf: true, ..Bm25Params::default() }
}

/// One assembled in-process deployment: mock gateway, service, and a pool of
/// clients sharing it over the in-process transport.
pub struct ExperimentContext {
    pub gateway: Arc<MockGateway>,
    pub service: Arc<ExperienceService>,
    pub clients: Vec<Client>,
    pub clock: Arc<ManualClock>,
    pub default_topic: TopicLabel,
}

impl ExperimentContext {
    /// Builds the deployment under `work_dir`. Refinement triggering is
    /// disabled (experiments refine explicitly or not at all) and the clock
    /// starts at zero.
    pub fn build(
        work_dir: &Path,
        items: &[QaItem],
        seed: u64,
        client_count: usize,
    ) -> Result<ExperimentContext, HarnessError> {
        let keywords = topic_keywords(items);
        let default_topic = default_topic_for(items);
        let gateway = Arc::new(MockGateway::new(keywords, default_topic.clone(), seed));
        let service = Arc::new(ExperienceService::open(
            work_dir.join("store"),
            experiment_params(),
            usize::MAX,
            2.0,
            gateway.clone(),
        )?);
        let transport = Arc::new(InProcessTransport::new(service.clone()));
        let clock = Arc::new(ManualClock::new(0));

        let mut endpoints: BTreeMap<TopicLabel, String> = BTreeMap::new();
        endpoints.insert(default_topic.clone(), "local".to_string());
        for item in items {
            endpoints.entry(item.topic.clone()).or_insert_with(|| "local".to_string());
        }
        let routing = RoutingTable::new(endpoints, default_topic.clone())?;

        let clients = (0..client_count)
            .map(|i| {
                let options = ClientOptions {
                    dead_letter: work_dir.join(format!("dead-letter-c{i}.jsonl")),
                    ..ClientOptions::default()
                };
                Client::new(
                    routing.clone(),
                    gateway.clone(),
                    transport.clone(),
                    options,
                    clock.clone(),
                    &format!("c{i}"),
                )
            })
            .collect();

        Ok(ExperimentContext { gateway, service, clients, clock, default_topic })
    }
}
