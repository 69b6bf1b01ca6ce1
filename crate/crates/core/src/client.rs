//! Client-side lifecycle: capture events into episodes, distill closed
//! episodes into experiences on an idle-time queue, route each experience to
//! its topic server, and answer questions with retrieval augmentation.
//!
//! Two lanes share one client: the foreground lane answers queries, the
//! background lane works the episode queue one item per step and yields
//! whenever the foreground lane is occupied.

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use crate::config::Config;
use crate::domain::{
    validate_experience, Clock, Episode, EpisodeId, Event, Experience, IdGenerator, InvalidQuery,
    Query, RetrievalHit, Role, TopicLabel,
};
use crate::gateway::{AnswerRequest, Gateway, GatewayError};
use crate::net::{NetError, Transport};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("event text is empty")]
    EmptyEventText,
    #[error("no open episode with events to close")]
    EmptyEpisode,
    #[error(transparent)]
    InvalidQuery(#[from] InvalidQuery),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("malformed server response: {0}")]
    Protocol(String),
    #[error("dead letter file: {0}")]
    DeadLetter(std::io::Error),
}

#[derive(Debug, thiserror::Error)]
#[error("default topic {0:?} has no endpoint in the routing table")]
pub struct MissingDefaultRoute(pub String);

/// Where each topic's experiences live. Unknown topics route to the default
/// topic's endpoint; nothing is ever dropped for lack of a route.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    endpoints: BTreeMap<TopicLabel, String>,
    default_topic: TopicLabel,
}

impl RoutingTable {
    pub fn new(
        endpoints: BTreeMap<TopicLabel, String>,
        default_topic: TopicLabel,
    ) -> Result<Self, MissingDefaultRoute> {
        if !endpoints.contains_key(&default_topic) {
            return Err(MissingDefaultRoute(default_topic.to_string()));
        }
        Ok(RoutingTable { endpoints, default_topic })
    }

    /// One entry per registry topic, endpoint resolved per config fallback.
    pub fn from_config(config: &Config) -> Result<Self, MissingDefaultRoute> {
        let mut endpoints = BTreeMap::new();
        for topic in config.registry() {
            let endpoint = config.endpoint_for(&topic).to_string();
            endpoints.insert(topic, endpoint);
        }
        RoutingTable::new(endpoints, config.topics.default.clone())
    }

    pub fn default_topic(&self) -> &TopicLabel {
        &self.default_topic
    }

    pub fn topics(&self) -> impl Iterator<Item = &TopicLabel> {
        self.endpoints.keys()
    }

    /// Resolves a topic to (stored-under topic, endpoint). A topic without a
    /// route falls back to the default topic so the label the server sees
    /// and the endpoint it lives on always agree.
    pub fn route(&self, topic: &TopicLabel) -> (TopicLabel, &str) {
        match self.endpoints.get(topic) {
            Some(endpoint) => (topic.clone(), endpoint.as_str()),
            None => {
                let endpoint = &self.endpoints[&self.default_topic];
                (self.default_topic.clone(), endpoint.as_str())
            }
        }
    }
}

/// Work item: a closed episode plus its retry state. A server rejection
/// keeps the distilled experience so retries do not re-distill.
#[derive(Debug)]
struct QueueItem {
    episode: Episode,
    distilled: Option<Experience>,
    attempts: u32,
}

/// Bounded FIFO of closed episodes awaiting distillation. When full, the
/// oldest episode is dropped with a warning: losing the stalest raw episode
/// beats unbounded growth.
#[derive(Debug)]
pub struct EpisodeQueue {
    items: VecDeque<QueueItem>,
    capacity: usize,
}

impl EpisodeQueue {
    pub fn new(capacity: usize) -> Self {
        EpisodeQueue { items: VecDeque::new(), capacity: capacity.max(1) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn push(&mut self, item: QueueItem) {
        if self.items.len() == self.capacity {
            if let Some(dropped) = self.items.pop_front() {
                log::warn!(
                    "episode queue full; dropping oldest episode {}",
                    dropped.episode.id.as_str()
                );
            }
        }
        self.items.push_back(item);
    }

    fn pop(&mut self) -> Option<QueueItem> {
        self.items.pop_front()
    }
}

/// Knobs for the client pipeline.
#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub queue_capacity: usize,
    pub retry_budget: u32,
    pub dead_letter: PathBuf,
    pub default_k: usize,
    pub default_threshold: f64,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            queue_capacity: 1024,
            retry_budget: 3,
            dead_letter: PathBuf::from("./xpstore-dead-letter.jsonl"),
            default_k: 5,
            default_threshold: 0.0,
        }
    }
}

/// Answer plus provenance: exactly the hits the server returned, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedAnswer {
    pub answer: String,
    pub confidence: f64,
    pub topic: TopicLabel,
    pub hits: Vec<RetrievalHit>,
    /// False when the server could not be reached and the answer fell back
    /// to the bare model with no experiences.
    pub augmented: bool,
}

/// Wire body for PUT .../experiences: an experience minus its topic, which
/// rides in the path.
#[derive(Serialize)]
struct PutWire<'a> {
    id: &'a str,
    text: &'a str,
    source_episode_ids: Vec<&'a str>,
    condensed_from: Vec<&'a str>,
    generation: u64,
    created_at: u64,
}

impl<'a> From<&'a Experience> for PutWire<'a> {
    fn from(x: &'a Experience) -> Self {
        PutWire {
            id: x.id.as_str(),
            text: &x.text,
            source_episode_ids: x.source_episode_ids.iter().map(|e| e.as_str()).collect(),
            condensed_from: x.condensed_from.iter().map(|e| e.as_str()).collect(),
            generation: x.generation,
            created_at: x.created_at,
        }
    }
}

#[derive(serde::Deserialize)]
struct HitsWire {
    hits: Vec<RetrievalHit>,
}

/// One line of the dead-letter file.
#[derive(Serialize)]
struct DeadLetterRecord<'a> {
    reason: &'a str,
    episode: &'a Episode,
    #[serde(skip_serializing_if = "Option::is_none")]
    experience: Option<&'a Experience>,
}

/// RAII marker for the foreground lane: raised at query arrival, lowered
/// when the answer is out, error paths included.
struct ForegroundGuard<'a>(&'a AtomicBool);

impl<'a> ForegroundGuard<'a> {
    fn enter(flag: &'a AtomicBool) -> Self {
        flag.store(true, Ordering::SeqCst);
        ForegroundGuard(flag)
    }
}

impl Drop for ForegroundGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

enum FetchError {
    Unreachable(NetError),
    Denied { status: u16, body: String },
    Protocol(String),
}

pub struct Client {
    gateway: Arc<dyn Gateway>,
    transport: Arc<dyn Transport>,
    routing: RoutingTable,
    options: ClientOptions,
    clock: Arc<dyn Clock>,
    ids: IdGenerator,
    open_events: Mutex<Vec<Event>>,
    queue: Mutex<EpisodeQueue>,
    foreground_busy: AtomicBool,
}

impl Client {
    pub fn new(
        routing: RoutingTable,
        gateway: Arc<dyn Gateway>,
        transport: Arc<dyn Transport>,
        options: ClientOptions,
        clock: Arc<dyn Clock>,
        namespace: &str,
    ) -> Client {
        let capacity = options.queue_capacity;
        Client {
            gateway,
            transport,
            routing,
            options,
            clock,
            ids: IdGenerator::new(namespace),
            open_events: Mutex::new(Vec::new()),
            queue: Mutex::new(EpisodeQueue::new(capacity)),
            foreground_busy: AtomicBool::new(false),
        }
    }

    pub fn from_config(
        config: &Config,
        gateway: Arc<dyn Gateway>,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
        namespace: &str,
    ) -> Result<Client, MissingDefaultRoute> {
        let routing = RoutingTable::from_config(config)?;
        let options = ClientOptions {
            queue_capacity: config.client.queue_capacity,
            retry_budget: config.client.retry_budget,
            dead_letter: config.client.dead_letter.clone(),
            default_k: config.retrieve.default_k,
            default_threshold: config.retrieve.default_threshold,
        };
        Ok(Client::new(routing, gateway, transport, options, clock, namespace))
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn options(&self) -> &ClientOptions {
        &self.options
    }

    /// Appends one event to the open episode (opened implicitly on the first
    /// event) and returns its position.
    pub fn record_event(&self, role: Role, text: &str) -> Result<u32, ClientError> {
        if text.trim().is_empty() {
            return Err(ClientError::EmptyEventText);
        }
        let mut events = self.open_events.lock();
        let seq = events.len() as u32;
        events.push(Event { role, text: text.to_string(), seq });
        Ok(seq)
    }

    /// Seals the open episode, enqueues it for distillation, and starts a
    /// fresh episode boundary.
    pub fn close_episode(&self) -> Result<EpisodeId, ClientError> {
        let events = {
            let mut open = self.open_events.lock();
            if open.is_empty() {
                return Err(ClientError::EmptyEpisode);
            }
            std::mem::take(&mut *open)
        };
        let episode =
            Episode { id: self.ids.next_episode_id(), events, closed_at: self.clock.now_ms() };
        let id = episode.id.clone();
        self.queue.lock().push(QueueItem { episode, distilled: None, attempts: 0 });
        Ok(id)
    }

    pub fn queued_episodes(&self) -> usize {
        self.queue.lock().len()
    }

    /// Works one queue item: distill, validate, route, put. Returns how many
    /// items were handled (0 when the queue is empty or the foreground lane
    /// is busy). Failures re-queue the item until its retry budget runs out,
    /// then dead-letter it; only a dead-letter file that cannot be written
    /// surfaces as an error.
    pub fn process_queue_step(&self) -> Result<usize, ClientError> {
        if self.foreground_busy.load(Ordering::SeqCst) {
            return Ok(0);
        }
        let Some(mut item) = self.queue.lock().pop() else { return Ok(0) };
        // Gateway and server work happens outside the queue lock so
        // recording and closing stay responsive meanwhile.
        if let Err(reason) = self.advance_item(&mut item) {
            self.requeue_or_dead_letter(item, &reason)?;
        }
        Ok(1)
    }

    /// Runs queue steps until the queue drains or the foreground lane takes
    /// over. Returns how many items were handled.
    pub fn drain_queue(&self) -> Result<usize, ClientError> {
        let mut handled = 0;
        loop {
            match self.process_queue_step()? {
                0 => return Ok(handled),
                n => handled += n,
            }
        }
    }

    fn advance_item(&self, item: &mut QueueItem) -> Result<(), String> {
        if item.distilled.is_none() {
            let distilled =
                self.gateway.distill(&item.episode).map_err(|e| format!("distill: {e}"))?;
            let (topic, _) = self.routing.route(&distilled.topic);
            if topic != distilled.topic {
                log::warn!(
                    "topic {} has no route; storing under default {}",
                    distilled.topic.as_str(),
                    topic.as_str()
                );
            }
            let experience = Experience {
                id: self.ids.next_experience_id(),
                topic,
                text: distilled.text,
                source_episode_ids: vec![item.episode.id.clone()],
                condensed_from: vec![],
                generation: 0,
                created_at: self.clock.now_ms(),
            };
            let violations = validate_experience(&experience);
            if !violations.is_empty() {
                let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                return Err(format!("distilled experience invalid: {}", msgs.join("; ")));
            }
            item.distilled = Some(experience);
        }
        let experience = item.distilled.as_ref().expect("distilled just above");
        self.put_experience(experience)
    }

    fn put_experience(&self, experience: &Experience) -> Result<(), String> {
        let (_, endpoint) = self.routing.route(&experience.topic);
        let path = format!("/v1/topics/{}/experiences", experience.topic.as_str());
        let body = serde_json::to_vec(&PutWire::from(experience)).expect("experience serializes");
        match self.transport.send(endpoint, "PUT", &path, &body) {
            Ok((status, _)) if (200..300).contains(&status) => Ok(()),
            Ok((status, body)) => Err(format!(
                "server rejected put: status {status}: {}",
                String::from_utf8_lossy(&body)
            )),
            Err(e) => Err(format!("transport: {e}")),
        }
    }

    fn requeue_or_dead_letter(&self, mut item: QueueItem, reason: &str) -> Result<(), ClientError> {
        if item.attempts < self.options.retry_budget {
            item.attempts += 1;
            log::warn!(
                "episode {} attempt {} failed ({reason}); re-queued",
                item.episode.id.as_str(),
                item.attempts
            );
            self.queue.lock().push(item);
            return Ok(());
        }
        log::warn!(
            "episode {} exhausted its retry budget ({reason}); dead-lettering",
            item.episode.id.as_str()
        );
        let record = DeadLetterRecord {
            reason,
            episode: &item.episode,
            experience: item.distilled.as_ref(),
        };
        let mut line = serde_json::to_vec(&record).expect("dead letter serializes");
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.options.dead_letter)
            .map_err(ClientError::DeadLetter)?;
        file.write_all(&line).map_err(ClientError::DeadLetter)?;
        Ok(())
    }

    /// Classifies the question, retrieves from the matching topic store, and
    /// answers over the returned hit texts in hit order. The hits in the
    /// result are exactly what the server sent, order and scores untouched.
    pub fn augmented_query(
        &self,
        question: &str,
        choices: &[String],
        k: usize,
        return_threshold: f64,
    ) -> Result<AugmentedAnswer, ClientError> {
        let _guard = ForegroundGuard::enter(&self.foreground_busy);
        let query = Query::new(question, k, return_threshold)?;
        let topic = self.gateway.classify(question)?;
        let (topic, endpoint) = self.routing.route(&topic);
        let (hits, augmented) = match self.fetch_hits(endpoint, &topic, &query) {
            Ok(hits) => (hits, true),
            Err(FetchError::Unreachable(e)) => {
                log::warn!("server {endpoint} unreachable ({e}); answering unaugmented");
                (Vec::new(), false)
            }
            Err(FetchError::Denied { status, body }) => {
                // The server answered but has nothing for this topic (no
                // store yet). An empty result, not a fallback.
                log::debug!("retrieve on {} returned {status}: {body}", topic.as_str());
                (Vec::new(), true)
            }
            Err(FetchError::Protocol(msg)) => return Err(ClientError::Protocol(msg)),
        };
        let req = AnswerRequest {
            question: question.to_string(),
            experiences: hits.iter().map(|h| h.text.clone()).collect(),
            choices: choices.to_vec(),
        };
        let result = self.gateway.answer(&req)?;
        Ok(AugmentedAnswer {
            answer: result.answer,
            confidence: result.confidence,
            topic,
            hits,
            augmented,
        })
    }

    fn fetch_hits(
        &self,
        endpoint: &str,
        topic: &TopicLabel,
        query: &Query,
    ) -> Result<Vec<RetrievalHit>, FetchError> {
        let path = format!("/v1/topics/{}/retrieve", topic.as_str());
        let body = serde_json::json!({
            "query": query.text,
            "k": query.k,
            "return_threshold": query.return_threshold,
        });
        match self.transport.send(endpoint, "POST", &path, body.to_string().as_bytes()) {
            Ok((status, body)) if (200..300).contains(&status) => {
                let parsed: HitsWire = serde_json::from_slice(&body)
                    .map_err(|e| FetchError::Protocol(format!("hits from {path}: {e}")))?;
                Ok(parsed.hits)
            }
            Ok((status, body)) => {
                Err(FetchError::Denied { status, body: String::from_utf8_lossy(&body).into_owned() })
            }
            Err(e) => Err(FetchError::Unreachable(e)),
        }
    }
}
