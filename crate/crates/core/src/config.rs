//! Deployment configuration: one TOML file covering ranking parameters,
//! retrieval defaults, refinement policy, storage, the topic registry, client
//! routing, and gateway wiring. Every section has working defaults; an empty
//! file is a valid single-server mock deployment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::TopicLabel;
use crate::gateway::{GatewayConfig, GatewayMode};
use crate::index::Bm25Params;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieveSection {
    pub default_k: usize,
    pub default_threshold: f64,
}

impl Default for RetrieveSection {
    fn default() -> Self {
        RetrieveSection { default_k: 5, default_threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSection {
    pub trigger_count: usize,
    pub tau_default: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection { trigger_count: 500, tau_default: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageSection {
    pub root: PathBuf,
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection { root: PathBuf::from("./xpstore-data") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSection {
    pub listen: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection { listen: "127.0.0.1:7070".into() }
    }
}

/// The closed-world topic registry: a default topic plus per-topic keyword
/// lists for mock classification. The registry is the default topic plus
/// every keyword key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicsSection {
    pub default: TopicLabel,
    pub keywords: BTreeMap<TopicLabel, Vec<String>>,
}

impl Default for TopicsSection {
    fn default() -> Self {
        TopicsSection {
            default: TopicLabel::new("general").expect("static label"),
            keywords: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientSection {
    pub queue_capacity: usize,
    pub retry_budget: u32,
    pub dead_letter: PathBuf,
    /// topic -> server address; topics not listed here fall back to
    /// server.listen, so a single-server deployment needs no table at all.
    pub routing: BTreeMap<TopicLabel, String>,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection {
            queue_capacity: 1024,
            retry_budget: 3,
            dead_letter: PathBuf::from("./xpstore-dead-letter.jsonl"),
            routing: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub bm25: Bm25Params,
    pub retrieve: RetrieveSection,
    pub refine: RefineSection,
    pub storage: StorageSection,
    pub server: ServerSection,
    pub topics: TopicsSection,
    pub client: ClientSection,
    pub gateway: GatewayConfig,
}

impl std::str::FromStr for Config {
    type Err = ConfigError;

    fn from_str(raw: &str) -> Result<Config, ConfigError> {
        let config: Config = toml::from_str(raw)?;
        config.validate()?;
        Ok(config)
    }
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        raw.parse()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !self.bm25.k1.is_finite() || self.bm25.k1 <= 0.0 {
            return fail(format!("bm25.k1 must be finite and > 0, got {}", self.bm25.k1));
        }
        if !(0.0..=1.0).contains(&self.bm25.b) {
            return fail(format!("bm25.b must be in [0, 1], got {}", self.bm25.b));
        }
        if self.retrieve.default_k == 0 {
            return fail("retrieve.default_k must be >= 1".into());
        }
        if !self.retrieve.default_threshold.is_finite() || self.retrieve.default_threshold < 0.0 {
            return fail(format!(
                "retrieve.default_threshold must be finite and >= 0, got {}",
                self.retrieve.default_threshold
            ));
        }
        if self.refine.trigger_count == 0 {
            return fail("refine.trigger_count must be >= 1".into());
        }
        if !self.refine.tau_default.is_finite() {
            return fail(format!("refine.tau_default must be finite, got {}", self.refine.tau_default));
        }
        for topic in self.client.routing.keys() {
            if !self.registry().contains(topic) {
                return fail(format!("client.routing names unknown topic {topic:?}"));
            }
        }
        if self.gateway.mode == GatewayMode::Remote {
            if self.gateway.endpoint.is_none() {
                return fail("gateway.mode = remote requires gateway.endpoint".into());
            }
            if self.gateway.model.is_none() {
                return fail("gateway.mode = remote requires gateway.model".into());
            }
        }
        Ok(())
    }

    /// Every topic this deployment accepts: the default plus all keyword
    /// topics, sorted.
    pub fn registry(&self) -> Vec<TopicLabel> {
        let mut topics: Vec<TopicLabel> = self.topics.keywords.keys().cloned().collect();
        if !topics.contains(&self.topics.default) {
            topics.push(self.topics.default.clone());
        }
        topics.sort();
        topics
    }

    /// Endpoint serving a topic: explicit routing entry or the local server.
    pub fn endpoint_for(&self, topic: &TopicLabel) -> &str {
        self.client.routing.get(topic).map(String::as_str).unwrap_or(&self.server.listen)
    }
}
