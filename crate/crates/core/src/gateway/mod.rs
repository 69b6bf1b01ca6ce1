//! Single abstraction point for every model-dependent behavior: distillation,
//! classification, condensation, and answering with confidence.
//!
//! Two implementations: a deterministic mock (the harness and all acceptance
//! tests run on it) and a remote chat-completions client.

pub mod mock;
pub mod remote;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Episode, TopicLabel};

pub use mock::MockGateway;
pub use remote::RemoteGateway;

/// Distillation output: one experience text plus its topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillResult {
    pub text: String,
    pub topic: TopicLabel,
}

/// Answering input. `experiences` are retrieved texts in hit order.
/// `choices` lists the candidate answers; the mock picks by index, a remote
/// model is prompted with them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerRequest {
    pub question: String,
    pub experiences: Vec<String>,
    pub choices: Vec<String>,
}

/// Answering output. Confidence is a percentage in [0, 100].
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerResult {
    pub answer: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Mock,
    Remote,
}

/// Gateway wiring. Remote fields matter only in remote mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_concurrency() -> usize {
    4
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            mode: GatewayMode::Mock,
            endpoint: None,
            model: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            seed: 0,
            concurrency: default_concurrency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("condense requires at least 2 texts, got {0}")]
    TooFewTexts(usize),
    #[error("gateway request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("malformed model response: {0}")]
    Malformed(String),
    #[error("gateway misconfigured: {0}")]
    Misconfigured(String),
}

/// The condensation operator: merges two or more texts into one. This is the
/// only surface the refinement pipeline sees.
pub trait Condenser: Send + Sync {
    fn condense(&self, texts: &[String]) -> Result<String, GatewayError>;
}

/// Full model surface. Implementations must be safe for concurrent calls.
pub trait Gateway: Condenser {
    fn distill(&self, episode: &Episode) -> Result<DistillResult, GatewayError>;
    fn classify(&self, text: &str) -> Result<TopicLabel, GatewayError>;
    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResult, GatewayError>;
}

/// Stable short key identifying a question: first 12 hex characters of
/// SHA-256 over the trimmed question text. Answer directives embed it so an
/// experience can name exactly which question it resolves.
pub fn question_key(question: &str) -> String {
    let digest = Sha256::digest(question.trim().as_bytes());
    let mut out = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Renders the directive line an experience must carry to resolve a question
/// to the choice at `choice_index`.
pub fn answer_directive(question: &str, choice_index: usize) -> String {
    format!("ANSWER({})={choice_index}", question_key(question))
}

/// Splits text into sentences: each maximal run up to and including a
/// terminator (. ! ?) is one sentence; a trailing unterminated fragment is
/// its own sentence. Sentences are trimmed; empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let tail = cur.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}
