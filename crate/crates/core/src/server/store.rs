//! One topic's live store. Readers clone an `Arc` snapshot of the current
//! generation and never block writers; a single writer lane appends; a
//! refinement computes on a frozen copy and publishes through one atomic
//! swap of that `Arc`. Puts that arrive while a refinement is in flight are
//! logged immediately (durability) but stay invisible until the swap, when
//! they are appended behind the refined output.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::domain::{validate_experience, Experience, Query, RetrievalHit, TopicLabel};
use crate::gateway::Condenser;
use crate::index::{build_stats, retrieve, Bm25Params, IndexError};
use crate::refine::{refine, RefineError, RefineReport};
use crate::server::storage::{self, LogPayload, LogWriter};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown topic {0:?}")]
    TopicNotFound(String),
    #[error("invalid experience: {0}")]
    Validation(String),
    #[error("experience id {0:?} already stored")]
    DuplicateId(String),
    #[error("experience topic {found:?} does not match store topic {expected:?}")]
    TopicMismatch { expected: String, found: String },
    #[error("refinement already in flight")]
    RefineBusy,
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Immutable view of one generation. Everything a retrieval touches lives
/// behind one `Arc`, which is what makes the swap atomic for readers.
pub struct GenerationView {
    pub generation: u64,
    pub experiences: Vec<Experience>,
}

/// Acknowledgement for a durable put.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutAck {
    pub generation: u64,
    pub count: usize,
    /// True when this put pushed the store to its refinement trigger; the
    /// owner schedules a refinement run (never inline with the ack).
    pub trigger_reached: bool,
}

/// Store metadata snapshot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StoreStats {
    pub count: usize,
    pub generation: u64,
    pub avgdl: f64,
    pub n_docs: usize,
    pub refine_trigger: usize,
}

struct WriterState {
    log: LogWriter,
    dir: PathBuf,
    next_generation: u64,
    refining: bool,
    /// Puts logged while a refinement is in flight, pending the swap.
    buffered: Vec<Experience>,
    /// Ids of everything logged and not condensed away: live + buffered.
    known_ids: HashSet<String>,
}

pub struct TopicStore {
    topic: TopicLabel,
    params: Bm25Params,
    refine_trigger: usize,
    tau_default: f64,
    live: RwLock<Arc<GenerationView>>,
    writer: Mutex<WriterState>,
}

impl TopicStore {
    /// Opens (or creates) the store directory under `root/{topic}` and
    /// recovers the pre-crash state of every acked operation.
    pub fn open(
        root: &std::path::Path,
        topic: TopicLabel,
        params: Bm25Params,
        refine_trigger: usize,
        tau_default: f64,
    ) -> Result<TopicStore, StoreError> {
        let dir = root.join(topic.as_str());
        let recovered = storage::recover(&dir)?;
        let known_ids =
            recovered.experiences.iter().map(|x| x.id.as_str().to_string()).collect();
        let view = GenerationView {
            generation: recovered.generation,
            experiences: recovered.experiences,
        };
        Ok(TopicStore {
            topic,
            params,
            refine_trigger,
            tau_default,
            live: RwLock::new(Arc::new(view)),
            writer: Mutex::new(WriterState {
                log: recovered.log,
                dir,
                next_generation: recovered.next_generation,
                refining: false,
                buffered: Vec::new(),
                known_ids,
            }),
        })
    }

    pub fn topic(&self) -> &TopicLabel {
        &self.topic
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    /// Current generation snapshot; cheap (one Arc clone under a read lock).
    pub fn snapshot(&self) -> Arc<GenerationView> {
        self.live.read().clone()
    }

    /// Validates, logs durably, then publishes the experience. The ack
    /// reports whether the refinement trigger was reached; scheduling is the
    /// caller's job so the ack never waits on a refinement.
    pub fn put(&self, experience: Experience) -> Result<PutAck, StoreError> {
        let violations = validate_experience(&experience);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(StoreError::Validation(msgs.join("; ")));
        }
        if experience.topic != self.topic {
            return Err(StoreError::TopicMismatch {
                expected: self.topic.to_string(),
                found: experience.topic.to_string(),
            });
        }

        let mut w = self.writer.lock();
        if w.known_ids.contains(experience.id.as_str()) {
            return Err(StoreError::DuplicateId(experience.id.to_string()));
        }
        w.log.append(LogPayload::Put { experience: experience.clone() })?;
        w.known_ids.insert(experience.id.as_str().to_string());

        let (generation, count) = if w.refining {
            w.buffered.push(experience);
            let live = self.live.read();
            (live.generation, live.experiences.len() + w.buffered.len())
        } else {
            let mut live = self.live.write();
            let mut experiences = live.experiences.clone();
            experiences.push(experience);
            let count = experiences.len();
            let generation = live.generation;
            *live = Arc::new(GenerationView { generation, experiences });
            (generation, count)
        };
        let trigger_reached = count >= self.refine_trigger && !w.refining;
        Ok(PutAck { generation, count, trigger_reached })
    }

    /// Retrieval over the current generation snapshot. The whole scoring run
    /// sees exactly one generation: the Arc is cloned once, before scoring.
    pub fn retrieve(&self, query: &Query) -> Result<Vec<RetrievalHit>, StoreError> {
        let snap = self.snapshot();
        Ok(retrieve(query, &snap.experiences, &self.params)?)
    }

    pub fn stats(&self) -> Result<StoreStats, StoreError> {
        let snap = self.snapshot();
        let stats =
            build_stats(snap.experiences.iter().map(|x| (x.id.as_str(), x.text.as_str())))?;
        Ok(StoreStats {
            count: snap.experiences.len(),
            generation: snap.generation,
            avgdl: stats.avgdl(),
            n_docs: stats.n_docs(),
            refine_trigger: self.refine_trigger,
        })
    }

    /// One refinement cycle: freeze the live set, run the condensation pass
    /// without holding any lock, then durably record and atomically publish
    /// the new generation (refined output first, buffered puts after). On
    /// any failure the refined output is discarded; buffered puts are
    /// published unrefined because they were already acked.
    pub fn run_refinement(
        &self,
        tau: Option<f64>,
        condenser: &dyn Condenser,
    ) -> Result<RefineReport, StoreError> {
        let tau = tau.unwrap_or(self.tau_default);
        let frozen = {
            let mut w = self.writer.lock();
            if w.refining {
                return Err(StoreError::RefineBusy);
            }
            w.refining = true;
            self.snapshot()
        };

        let result = refine(&frozen.experiences, tau, &self.params, condenser);

        let mut w = self.writer.lock();
        debug_assert!(w.refining);
        match result {
            Ok((refined, report)) => {
                let generation = w.next_generation;
                let mut experiences = refined;
                experiences.append(&mut w.buffered);
                let swap_result = storage::write_snapshot(&w.dir, generation, &experiences)
                    .and_then(|()| {
                        w.log.append(LogPayload::RefineSwap {
                            generation,
                            report: report.clone(),
                        })
                    });
                match swap_result {
                    Ok(_) => {
                        w.next_generation = generation + 1;
                        w.known_ids =
                            experiences.iter().map(|x| x.id.as_str().to_string()).collect();
                        *self.live.write() = Arc::new(GenerationView { generation, experiences });
                        w.refining = false;
                        Ok(report)
                    }
                    Err(e) => {
                        self.abort_refinement(&mut w);
                        Err(e.into())
                    }
                }
            }
            Err(e) => {
                self.abort_refinement(&mut w);
                Err(e.into())
            }
        }
    }

    /// Publishes buffered puts into the current generation and clears the
    /// in-flight flag. The store is exactly as if no refinement had started.
    fn abort_refinement(&self, w: &mut WriterState) {
        if !w.buffered.is_empty() {
            let mut live = self.live.write();
            let mut experiences = live.experiences.clone();
            experiences.append(&mut w.buffered);
            let generation = live.generation;
            *live = Arc::new(GenerationView { generation, experiences });
        }
        w.refining = false;
    }
}
