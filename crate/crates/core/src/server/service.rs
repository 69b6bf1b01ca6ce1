//! The multi-topic service: one `TopicStore` per topic under a shared
//! storage root, a background worker that runs triggered refinements, and
//! the JSON wire adapter. The adapter is a plain (method, path, body) to
//! (status, body) function, so the same bytes can be served over TCP or
//! handed to an in-process transport.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::domain::{
    EpisodeId, Experience, ExperienceId, Query, RetrievalHit, TimestampMs, TopicLabel,
};
use crate::gateway::Condenser;
use crate::index::Bm25Params;
use crate::net::{Handler, NetError, Transport};
use crate::refine::RefineReport;
use crate::server::store::{PutAck, StoreError, StoreStats, TopicStore};

/// Topic-partitioned experience service. Stores are created lazily on first
/// put (ingest is open-world); retrieval, stats, and refinement against a
/// topic that was never written report `TopicNotFound`, which keeps "no such
/// topic" distinct from "topic with no hits".
pub struct ExperienceService {
    root: PathBuf,
    params: Bm25Params,
    refine_trigger: usize,
    tau_default: f64,
    condenser: Arc<dyn Condenser>,
    stores: Arc<RwLock<HashMap<String, Arc<TopicStore>>>>,
    /// Topics with a refinement queued but not yet started. Inserting twice
    /// is a no-op, which is what coalesces concurrent triggers.
    pending: Arc<Mutex<HashSet<String>>>,
    busy: Arc<AtomicBool>,
    tx: Option<mpsc::Sender<String>>,
    worker: Option<JoinHandle<()>>,
}

impl ExperienceService {
    /// Opens every topic directory already present under `root` (recovering
    /// each from its log) and starts the refinement worker.
    pub fn open(
        root: impl AsRef<Path>,
        params: Bm25Params,
        refine_trigger: usize,
        tau_default: f64,
        condenser: Arc<dyn Condenser>,
    ) -> Result<ExperienceService, StoreError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        let mut map = HashMap::new();
        for entry in std::fs::read_dir(&root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Ok(topic) = TopicLabel::new(name) else { continue };
            let store = TopicStore::open(&root, topic, params, refine_trigger, tau_default)?;
            map.insert(name.to_string(), Arc::new(store));
        }

        let stores = Arc::new(RwLock::new(map));
        let pending = Arc::new(Mutex::new(HashSet::new()));
        let busy = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel::<String>();
        let worker = {
            let stores = Arc::clone(&stores);
            let pending = Arc::clone(&pending);
            let busy = Arc::clone(&busy);
            let condenser = Arc::clone(&condenser);
            std::thread::spawn(move || {
                while let Ok(topic) = rx.recv() {
                    // busy goes up before the pending mark comes off, so an
                    // observer never sees "nothing pending, nothing running"
                    // while work is still in hand.
                    busy.store(true, Ordering::SeqCst);
                    pending.lock().remove(&topic);
                    let store = stores.read().get(&topic).cloned();
                    if let Some(store) = store {
                        match store.run_refinement(None, condenser.as_ref()) {
                            Ok(report) => log::info!(
                                "refined topic {topic}: {} -> {} experiences",
                                report.before_count,
                                report.after_count
                            ),
                            Err(StoreError::RefineBusy) => {}
                            Err(e) => log::warn!("refinement of topic {topic} failed: {e}"),
                        }
                    }
                    busy.store(false, Ordering::SeqCst);
                }
            })
        };

        Ok(ExperienceService {
            root,
            params,
            refine_trigger,
            tau_default,
            condenser,
            stores,
            pending,
            busy,
            tx: Some(tx),
            worker: Some(worker),
        })
    }

    pub fn from_config(
        config: &Config,
        condenser: Arc<dyn Condenser>,
    ) -> Result<ExperienceService, StoreError> {
        ExperienceService::open(
            &config.storage.root,
            config.bm25,
            config.refine.trigger_count,
            config.refine.tau_default,
            condenser,
        )
    }

    fn store(&self, topic: &str) -> Result<Arc<TopicStore>, StoreError> {
        self.stores
            .read()
            .get(topic)
            .cloned()
            .ok_or_else(|| StoreError::TopicNotFound(topic.to_string()))
    }

    fn store_for_put(&self, topic: &TopicLabel) -> Result<Arc<TopicStore>, StoreError> {
        if let Some(s) = self.stores.read().get(topic.as_str()) {
            return Ok(Arc::clone(s));
        }
        let mut stores = self.stores.write();
        // Another put may have created it between the two locks.
        if let Some(s) = stores.get(topic.as_str()) {
            return Ok(Arc::clone(s));
        }
        let store = TopicStore::open(
            &self.root,
            topic.clone(),
            self.params,
            self.refine_trigger,
            self.tau_default,
        )?;
        let store = Arc::new(store);
        stores.insert(topic.as_str().to_string(), Arc::clone(&store));
        Ok(store)
    }

    /// Stores one experience under its own topic. When the ack reports the
    /// refinement trigger, a background run is queued; the ack itself never
    /// waits on refinement.
    pub fn put(&self, experience: Experience) -> Result<PutAck, StoreError> {
        let topic = experience.topic.as_str().to_string();
        let store = self.store_for_put(&experience.topic)?;
        let ack = store.put(experience)?;
        if ack.trigger_reached {
            self.schedule_refinement(&topic);
        }
        Ok(ack)
    }

    pub fn retrieve(&self, topic: &str, query: &Query) -> Result<Vec<RetrievalHit>, StoreError> {
        self.store(topic)?.retrieve(query)
    }

    /// Synchronous refinement run (the manual endpoint). Triggered runs go
    /// through the background worker instead.
    pub fn refine(&self, topic: &str, tau: Option<f64>) -> Result<RefineReport, StoreError> {
        self.store(topic)?.run_refinement(tau, self.condenser.as_ref())
    }

    pub fn stats(&self, topic: &str) -> Result<StoreStats, StoreError> {
        self.store(topic)?.stats()
    }

    fn schedule_refinement(&self, topic: &str) {
        if self.pending.lock().insert(topic.to_string()) {
            if let Some(tx) = &self.tx {
                let _ = tx.send(topic.to_string());
            }
        }
    }

    /// Waits until every queued refinement has drained. Test and experiment
    /// hook; the wire surface does not expose it.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.pending.lock().is_empty() && !self.busy.load(Ordering::SeqCst) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }
}

impl Drop for ExperienceService {
    fn drop(&mut self) {
        // Closing the channel stops the worker; join so an in-flight
        // refinement finishes its writes before the storage root goes away.
        self.tx.take();
        if let Some(handle) = self.worker.take() {
            let _ = handle.join();
        }
    }
}

/// Wire body for PUT .../experiences. The topic comes from the path, so the
/// body is an experience minus its topic field.
#[derive(Deserialize)]
struct PutBody {
    id: ExperienceId,
    text: String,
    source_episode_ids: Vec<EpisodeId>,
    #[serde(default)]
    condensed_from: Vec<ExperienceId>,
    #[serde(default)]
    generation: u64,
    created_at: TimestampMs,
}

#[derive(Deserialize)]
struct RetrieveBody {
    query: String,
    k: usize,
    return_threshold: f64,
}

#[derive(Deserialize, Default)]
struct RefineBody {
    #[serde(default)]
    tau: Option<f64>,
}

#[derive(Serialize)]
struct PutResponse {
    generation: u64,
    count: usize,
}

#[derive(Serialize)]
struct HitsResponse {
    hits: Vec<RetrievalHit>,
}

/// Every error leaves the service as `{"error":{"kind":...,"message":...}}`
/// with a status that tells retry logic what happened.
fn error_body(kind: &str, message: &str) -> Vec<u8> {
    let payload = serde_json::json!({ "error": { "kind": kind, "message": message } });
    payload.to_string().into_bytes()
}

fn wire_error(err: &StoreError) -> (u16, Vec<u8>) {
    let (status, kind) = match err {
        StoreError::TopicNotFound(_) => (404, "topic_not_found"),
        StoreError::Validation(_) => (422, "validation"),
        StoreError::DuplicateId(_) => (409, "duplicate_id"),
        StoreError::TopicMismatch { .. } => (422, "topic_mismatch"),
        StoreError::RefineBusy => (409, "refine_busy"),
        StoreError::Io(_) => (500, "io"),
        StoreError::Refine(_) => (500, "refine"),
        StoreError::Index(_) => (500, "index"),
    };
    (status, error_body(kind, &err.to_string()))
}

fn json_ok<T: Serialize>(value: &T) -> (u16, Vec<u8>) {
    match serde_json::to_vec(value) {
        Ok(body) => (200, body),
        Err(e) => (500, error_body("serialize", &e.to_string())),
    }
}

impl ExperienceService {
    fn wire_put(&self, topic: TopicLabel, body: &[u8]) -> (u16, Vec<u8>) {
        let parsed: PutBody = match serde_json::from_slice(body) {
            Ok(p) => p,
            Err(e) => return (400, error_body("malformed_body", &e.to_string())),
        };
        let experience = Experience {
            id: parsed.id,
            topic,
            text: parsed.text,
            source_episode_ids: parsed.source_episode_ids,
            condensed_from: parsed.condensed_from,
            generation: parsed.generation,
            created_at: parsed.created_at,
        };
        match self.put(experience) {
            Ok(ack) => json_ok(&PutResponse { generation: ack.generation, count: ack.count }),
            Err(e) => wire_error(&e),
        }
    }

    fn wire_retrieve(&self, topic: TopicLabel, body: &[u8]) -> (u16, Vec<u8>) {
        let parsed: RetrieveBody = match serde_json::from_slice(body) {
            Ok(p) => p,
            Err(e) => return (400, error_body("malformed_body", &e.to_string())),
        };
        let query = match Query::new(parsed.query, parsed.k, parsed.return_threshold) {
            Ok(q) => q.with_topic(topic.clone()),
            Err(e) => return (422, error_body("invalid_query", &e.to_string())),
        };
        match self.retrieve(topic.as_str(), &query) {
            Ok(hits) => json_ok(&HitsResponse { hits }),
            Err(e) => wire_error(&e),
        }
    }

    fn wire_refine(&self, topic: TopicLabel, body: &[u8]) -> (u16, Vec<u8>) {
        // An absent body reads as an empty request: refine at the default tau.
        let parsed: RefineBody = if body.is_empty() {
            RefineBody::default()
        } else {
            match serde_json::from_slice(body) {
                Ok(p) => p,
                Err(e) => return (400, error_body("malformed_body", &e.to_string())),
            }
        };
        match self.refine(topic.as_str(), parsed.tau) {
            Ok(report) => json_ok(&report),
            Err(e) => wire_error(&e),
        }
    }

    fn wire_stats(&self, topic: TopicLabel) -> (u16, Vec<u8>) {
        match self.stats(topic.as_str()) {
            Ok(stats) => json_ok(&stats),
            Err(e) => wire_error(&e),
        }
    }
}

impl Handler for ExperienceService {
    fn handle(&self, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
        let segments: Vec<&str> = path.split('/').collect();
        // Expected shape: ["", "v1", "topics", {topic}, {op}].
        let route_ok = segments.len() == 5
            && segments[0].is_empty()
            && segments[1] == "v1"
            && segments[2] == "topics";
        if !route_ok {
            return (404, error_body("no_route", &format!("no route for {path}")));
        }
        let op = segments[4];
        if !matches!(op, "experiences" | "retrieve" | "refine" | "stats") {
            return (404, error_body("no_route", &format!("no route for {path}")));
        }
        let topic = match TopicLabel::new(segments[3]) {
            Ok(t) => t,
            Err(e) => return (400, error_body("bad_topic", &e.to_string())),
        };
        match (method, op) {
            ("PUT", "experiences") => self.wire_put(topic, body),
            ("POST", "retrieve") => self.wire_retrieve(topic, body),
            ("POST", "refine") => self.wire_refine(topic, body),
            ("GET", "stats") => self.wire_stats(topic),
            _ => (
                405,
                error_body("method_not_allowed", &format!("{method} not allowed for {path}")),
            ),
        }
    }
}

/// Transport that hands requests straight to a handler, no sockets. The
/// endpoint is ignored: an in-process deployment has exactly one service.
pub struct InProcessTransport<H> {
    handler: Arc<H>,
}

impl<H> InProcessTransport<H> {
    pub fn new(handler: Arc<H>) -> Self {
        InProcessTransport { handler }
    }
}

impl<H: Handler> Transport for InProcessTransport<H> {
    fn send(
        &self,
        _endpoint: &str,
        method: &str,
        path: &str,
        body: &[u8],
    ) -> Result<(u16, Vec<u8>), NetError> {
        Ok(self.handler.handle(method, path, body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockGateway;
    use crate::net::{HttpServer, HttpTransport};
    use std::collections::BTreeMap;

    fn mock() -> Arc<dyn Condenser> {
        Arc::new(MockGateway::new(BTreeMap::new(), TopicLabel::new("general").unwrap(), 7))
    }

    fn service(root: &Path, trigger: usize) -> ExperienceService {
        // Clamped idf so tiny fixtures score >= 0; these tests exercise the
        // plumbing, not the ranking.
        let params = Bm25Params { clamp_idf: true, ..Bm25Params::default() };
        ExperienceService::open(root, params, trigger, 2.0, mock()).unwrap()
    }

    fn xp(id: &str, topic: &str, text: &str) -> Experience {
        Experience {
            id: id.into(),
            topic: TopicLabel::new(topic).unwrap(),
            text: text.to_string(),
            source_episode_ids: vec!["ep-1".into()],
            condensed_from: vec![],
            generation: 0,
            created_at: 11,
        }
    }

    #[test]
    fn put_creates_topic_and_retrieve_finds_it() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1000);
        let ack = svc.put(xp("x-1", "physics", "tides follow the moon")).unwrap();
        assert_eq!((ack.generation, ack.count), (0, 1));
        let q = Query::new("tides", 5, 0.0).unwrap();
        let hits = svc.retrieve("physics", &q).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].experience_id.as_str(), "x-1");
    }

    #[test]
    fn unknown_topic_is_distinct_from_no_hits() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1000);
        svc.put(xp("x-1", "physics", "tides follow the moon")).unwrap();
        // A positive threshold drops the zero-score non-match, so the known
        // topic answers with an empty list rather than an error.
        let q = Query::new("zebra", 5, 0.5).unwrap();
        assert!(svc.retrieve("physics", &q).unwrap().is_empty());
        assert!(matches!(
            svc.retrieve("biology", &q).unwrap_err(),
            StoreError::TopicNotFound(_)
        ));
        assert!(matches!(svc.stats("biology").unwrap_err(), StoreError::TopicNotFound(_)));
        assert!(matches!(
            svc.refine("biology", None).unwrap_err(),
            StoreError::TopicNotFound(_)
        ));
    }

    #[test]
    fn trigger_schedules_a_background_refinement() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 3);
        for i in 0..3 {
            let ack = svc.put(xp(&format!("x-{i}"), "physics", "same text each time")).unwrap();
            assert_eq!(ack.trigger_reached, i == 2);
        }
        assert!(svc.wait_idle(Duration::from_secs(10)));
        let stats = svc.stats("physics").unwrap();
        assert_eq!(stats.generation, 1);
    }

    #[test]
    fn repeated_triggers_coalesce_without_deadlock() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1);
        for i in 0..4 {
            svc.put(xp(&format!("x-{i}"), "physics", &format!("note number {i}"))).unwrap();
        }
        assert!(svc.wait_idle(Duration::from_secs(10)));
        let stats = svc.stats("physics").unwrap();
        assert!(stats.generation >= 1 && stats.generation <= 4, "generation {}", stats.generation);
        assert_eq!(stats.count, 4);
    }

    #[test]
    fn reopen_recovers_existing_topics_for_reads() {
        let dir = tempfile::tempdir().unwrap();
        {
            let svc = service(dir.path(), 1000);
            svc.put(xp("x-1", "physics", "tides follow the moon")).unwrap();
        }
        let svc = service(dir.path(), 1000);
        let stats = svc.stats("physics").unwrap();
        assert_eq!(stats.count, 1);
    }

    #[test]
    fn wire_put_retrieve_stats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1000);
        let put = br#"{"id":"x-1","text":"tides follow the moon","source_episode_ids":["ep-1"],"condensed_from":[],"generation":0,"created_at":11}"#;
        let (status, body) = svc.handle("PUT", "/v1/topics/physics/experiences", put);
        assert_eq!(status, 200, "{}", String::from_utf8_lossy(&body));
        assert_eq!(body, br#"{"generation":0,"count":1}"#);

        let (status, body) = svc.handle(
            "POST",
            "/v1/topics/physics/retrieve",
            br#"{"query":"tides","k":5,"return_threshold":0.0}"#,
        );
        assert_eq!(status, 200);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["hits"][0]["experience_id"], "x-1");
        assert_eq!(v["hits"][0]["text"], "tides follow the moon");

        let (status, body) = svc.handle("GET", "/v1/topics/physics/stats", b"");
        assert_eq!(status, 200);
        let stats: StoreStats = serde_json::from_slice(&body).unwrap();
        assert_eq!((stats.count, stats.generation), (1, 0));
    }

    #[test]
    fn wire_refine_accepts_empty_and_explicit_tau() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1000);
        svc.put(xp("x-1", "physics", "tides follow the moon")).unwrap();
        let (status, body) = svc.handle("POST", "/v1/topics/physics/refine", b"");
        assert_eq!(status, 200);
        let report: RefineReport = serde_json::from_slice(&body).unwrap();
        assert_eq!((report.before_count, report.after_count), (1, 1));

        let (status, body) = svc.handle("POST", "/v1/topics/physics/refine", br#"{"tau":3.5}"#);
        assert_eq!(status, 200);
        let report: RefineReport = serde_json::from_slice(&body).unwrap();
        assert_eq!(report.tau, 3.5);
    }

    #[test]
    fn wire_errors_carry_the_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1000);

        #[allow(clippy::type_complexity)]
        let cases: Vec<(u16, &str, (u16, Vec<u8>))> = vec![
            (400, "malformed_body", svc.handle("PUT", "/v1/topics/physics/experiences", b"{")),
            (
                422,
                "validation",
                svc.handle(
                    "PUT",
                    "/v1/topics/physics/experiences",
                    br#"{"id":"x-9","text":"","source_episode_ids":[],"condensed_from":[],"generation":0,"created_at":0}"#,
                ),
            ),
            (
                404,
                "topic_not_found",
                svc.handle(
                    "POST",
                    "/v1/topics/nowhere/retrieve",
                    br#"{"query":"q","k":1,"return_threshold":0.0}"#,
                ),
            ),
            (
                422,
                "invalid_query",
                svc.handle(
                    "POST",
                    "/v1/topics/physics/retrieve",
                    br#"{"query":"q","k":0,"return_threshold":0.0}"#,
                ),
            ),
            (404, "no_route", svc.handle("GET", "/v2/anything", b"")),
            (404, "no_route", svc.handle("GET", "/v1/topics/physics/bogus", b"")),
            (400, "bad_topic", svc.handle("GET", "/v1/topics/Physics/stats", b"")),
            (405, "method_not_allowed", svc.handle("POST", "/v1/topics/physics/stats", b"")),
        ];
        for (want_status, want_kind, (status, body)) in cases {
            assert_eq!(status, want_status, "{}", String::from_utf8_lossy(&body));
            let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(v["error"]["kind"], want_kind);
            assert!(v["error"]["message"].is_string());
        }
    }

    #[test]
    fn duplicate_put_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 1000);
        let put = br#"{"id":"x-1","text":"tides","source_episode_ids":["ep-1"],"condensed_from":[],"generation":0,"created_at":11}"#;
        assert_eq!(svc.handle("PUT", "/v1/topics/physics/experiences", put).0, 200);
        let (status, body) = svc.handle("PUT", "/v1/topics/physics/experiences", put);
        assert_eq!(status, 409);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["error"]["kind"], "duplicate_id");
    }

    #[test]
    fn in_process_and_tcp_transports_agree() {
        let dir = tempfile::tempdir().unwrap();
        let svc = Arc::new(service(dir.path(), 1000));
        svc.put(xp("x-1", "physics", "tides follow the moon")).unwrap();

        let server = HttpServer::serve("127.0.0.1:0", svc.clone()).unwrap();
        let endpoint = server.local_addr().to_string();
        let tcp = HttpTransport::default();
        let local = InProcessTransport::new(svc.clone());

        let requests: [(&str, &str, &[u8]); 3] = [
            ("POST", "/v1/topics/physics/retrieve", br#"{"query":"tides moon","k":3,"return_threshold":0.0}"#),
            ("GET", "/v1/topics/physics/stats", b""),
            ("GET", "/v1/topics/missing/stats", b""),
        ];
        for (method, path, body) in requests {
            let over_tcp = tcp.send(&endpoint, method, path, body).unwrap();
            let in_proc = local.send(&endpoint, method, path, body).unwrap();
            assert_eq!(over_tcp, in_proc, "{method} {path}");
        }
        server.shutdown();
    }
}
