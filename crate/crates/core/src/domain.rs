//! Shared vocabulary for the whole pipeline: events, episodes, experiences,
//! queries, and the id/clock plumbing everything else leans on.
//!
//! Invariants that span modules live here so they are enforced once. An
//! `Experience` is either distilled (no condensation parents) or condensed
//! (at least one parent); `validate_experience` is the single gatekeeper.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch. Only ordering is meaningful.
pub type TimestampMs = u64;

/// Who produced an event inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Model,
    Thought,
    Sensor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::User => "user",
            Role::Model => "model",
            Role::Thought => "thought",
            Role::Sensor => "sensor",
        };
        f.write_str(s)
    }
}

/// One utterance or observation inside an episode. `seq` is the position
/// assigned at capture time; episodes keep events in `seq` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub role: Role,
    pub text: String,
    pub seq: u32,
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

id_newtype! {
    /// Opaque episode identifier.
    EpisodeId
}

id_newtype! {
    /// Opaque experience identifier. Unique within a deployment; the id
    /// generator's namespace keeps independent clients from colliding.
    ExperienceId
}

/// A closed interaction window: an ordered, non-empty list of events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: EpisodeId,
    pub events: Vec<Event>,
    pub closed_at: TimestampMs,
}

/// Topic names are non-empty and lowercase so that routing never depends on
/// caller-side casing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicLabel(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid topic label {0:?}: must be non-empty and lowercase")]
pub struct InvalidTopic(pub String);

impl TopicLabel {
    pub fn new(s: impl Into<String>) -> Result<Self, InvalidTopic> {
        let s = s.into();
        if s.is_empty() || s.chars().any(|c| c.is_uppercase()) {
            return Err(InvalidTopic(s));
        }
        Ok(TopicLabel(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for TopicLabel {
    type Error = InvalidTopic;

    fn try_from(s: String) -> Result<Self, InvalidTopic> {
        TopicLabel::new(s)
    }
}

impl From<TopicLabel> for String {
    fn from(t: TopicLabel) -> String {
        t.0
    }
}

/// A distilled or condensed unit of reusable knowledge.
///
/// `condensed_from` empty means distilled directly from an episode;
/// non-empty means produced by refinement from the listed parents.
/// `generation` is the refinement generation that produced it (0 for
/// freshly distilled experiences).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experience {
    pub id: ExperienceId,
    pub topic: TopicLabel,
    pub text: String,
    pub source_episode_ids: Vec<EpisodeId>,
    #[serde(default)]
    pub condensed_from: Vec<ExperienceId>,
    #[serde(default)]
    pub generation: u64,
    pub created_at: TimestampMs,
}

/// A structural problem with an experience. `validate_experience` reports
/// every violation rather than stopping at the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyText,
    DistilledWithParents,
    CondensedWithoutParents,
    DuplicateParent(ExperienceId),
    SelfParent,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyText => write!(f, "empty text"),
            Violation::DistilledWithParents => {
                write!(f, "distilled experience cannot have condensation parents")
            }
            Violation::CondensedWithoutParents => {
                write!(f, "condensed experience must list its condensation parents")
            }
            Violation::DuplicateParent(id) => {
                write!(f, "condensation parent {id} listed more than once")
            }
            Violation::SelfParent => write!(f, "experience lists itself as a condensation parent"),
        }
    }
}

/// Checks every structural invariant of an experience and returns all
/// violations found. Total: never panics on any input.
pub fn validate_experience(x: &Experience) -> Vec<Violation> {
    let mut out = Vec::new();
    if x.text.trim().is_empty() {
        out.push(Violation::EmptyText);
    }
    if x.generation == 0 && !x.condensed_from.is_empty() {
        out.push(Violation::DistilledWithParents);
    }
    if x.generation >= 1 && x.condensed_from.is_empty() {
        out.push(Violation::CondensedWithoutParents);
    }
    let mut seen_parents = std::collections::HashSet::new();
    for p in &x.condensed_from {
        if p == &x.id {
            out.push(Violation::SelfParent);
        }
        if !seen_parents.insert(p) {
            out.push(Violation::DuplicateParent(p.clone()));
        }
    }
    out
}

/// A retrieval request. `topic` is optional here because the wire protocol
/// carries the topic in the path; in-process callers may set it directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<TopicLabel>,
    pub k: usize,
    pub return_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvalidQuery {
    #[error("query text is empty")]
    EmptyText,
    #[error("query k must be at least 1")]
    ZeroK,
    #[error("query return_threshold must be finite and non-negative, got {0}")]
    BadThreshold(f64),
}

impl Query {
    pub fn new(text: impl Into<String>, k: usize, return_threshold: f64) -> Result<Self, InvalidQuery> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvalidQuery::EmptyText);
        }
        if k == 0 {
            return Err(InvalidQuery::ZeroK);
        }
        if !return_threshold.is_finite() || return_threshold < 0.0 {
            return Err(InvalidQuery::BadThreshold(return_threshold));
        }
        Ok(Query { text, topic: None, k, return_threshold })
    }

    pub fn with_topic(mut self, topic: TopicLabel) -> Self {
        self.topic = Some(topic);
        self
    }
}

/// One scored retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub experience_id: ExperienceId,
    pub score: f64,
    pub text: String,
}

/// What kind of object an id names. The tag is embedded in the id itself so
/// logs stay readable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Episode,
    Experience,
}

impl IdKind {
    fn tag(self) -> &'static str {
        match self {
            IdKind::Episode => "ep",
            IdKind::Experience => "xp",
        }
    }
}

/// Process-wide id source. Ids are `{counter:010}-{kind}-{namespace}`: the
/// zero-padded counter comes first so ids from one generator sort in
/// creation order, and the namespace keeps independent generators from
/// colliding. Cloning shares the counter.
#[derive(Debug, Clone)]
pub struct IdGenerator {
    namespace: String,
    counter: Arc<AtomicU64>,
}

impl IdGenerator {
    pub fn new(namespace: impl Into<String>) -> Self {
        IdGenerator { namespace: namespace.into(), counter: Arc::new(AtomicU64::new(0)) }
    }

    fn next_raw(&self, kind: IdKind) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("{n:010}-{}-{}", kind.tag(), self.namespace)
    }

    pub fn next_episode_id(&self) -> EpisodeId {
        EpisodeId(self.next_raw(IdKind::Episode))
    }

    pub fn next_experience_id(&self) -> ExperienceId {
        ExperienceId(self.next_raw(IdKind::Experience))
    }
}

/// Time source. Production code uses `SystemClock`; the harness and tests use
/// `ManualClock` so runs are reproducible.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> TimestampMs;
}

/// Wall clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> TimestampMs {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock that advances only when told to. Cloning shares the
/// underlying counter.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new(start_ms: TimestampMs) -> Self {
        ManualClock { now: Arc::new(AtomicU64::new(start_ms)) }
    }

    pub fn advance(&self, delta_ms: u64) {
        self.now.fetch_add(delta_ms, Ordering::Relaxed);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> TimestampMs {
        self.now.load(Ordering::Relaxed)
    }
}
