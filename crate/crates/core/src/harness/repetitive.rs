//! Repetitive-recall experiment: clients answer sampled questions over
//! several epochs, teach the store the correct choice after each exchange,
//! and accuracy climbs as later exchanges retrieve what earlier ones stored.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Role;
use crate::gateway::mock::teaching_line;
use crate::harness::{derive_seed, ExperimentContext, HarnessError, QaItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitiveParams {
    pub epochs: usize,
    pub clients: usize,
    pub responses_per_question: usize,
    pub seed: u64,
    pub k: usize,
    pub return_threshold: f64,
}

impl Default for RepetitiveParams {
    fn default() -> Self {
        RepetitiveParams {
            epochs: 3,
            clients: 3,
            responses_per_question: 10,
            seed: 7,
            k: 5,
            return_threshold: 0.0,
        }
    }
}

/// One epoch's outcomes. Accuracy for a question pools every response it
/// received this epoch, across all clients that drew it; the epoch accuracy
/// is the unweighted mean over the map. Confidence means pool responses by
/// correctness; an empty class reports 0.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub per_question_accuracy: BTreeMap<String, f64>,
    pub epoch_accuracy: f64,
    pub mean_confidence_correct: f64,
    pub mean_confidence_incorrect: f64,
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Each client's question sample for one epoch: a seeded partial shuffle,
/// half the dataset (rounded up), visited in shuffled order. Samples overlap
/// across clients, which is what lets one client's teaching reach another
/// client's responses within the same epoch.
fn epoch_sample(seed: u64, epoch: usize, client: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, client as u64));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n.div_ceil(2));
    idx
}

fn check(items: &[QaItem], params: &RepetitiveParams) -> Result<(), HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::InvalidParams("dataset is empty".into()));
    }
    if params.epochs == 0 || params.clients == 0 {
        return Err(HarnessError::InvalidParams("epochs and clients must be at least 1".into()));
    }
    if params.responses_per_question == 0 {
        return Err(HarnessError::InvalidParams("responses_per_question must be at least 1".into()));
    }
    Ok(())
}

/// Runs the experiment inside `work_dir` (store, dead-letter files). One
/// exchange = one client answering one question `responses_per_question`
/// times, then closing a teaching episode that records the correct choice;
/// the episode is distilled and stored before the next exchange starts.
/// Exchanges are scheduled round-robin across clients so the run is one
/// deterministic sequence.
pub fn run_repetitive(
    items: &[QaItem],
    params: &RepetitiveParams,
    work_dir: &Path,
) -> Result<Vec<EpochReport>, HarnessError> {
    check(items, params)?;
    let ctx = ExperimentContext::build(work_dir, items, params.seed, params.clients)?;
    let mut reports = Vec::with_capacity(params.epochs);

    for epoch in 1..=params.epochs {
        let samples: Vec<Vec<usize>> = (0..params.clients)
            .map(|c| epoch_sample(params.seed, epoch, c, items.len()))
            .collect();
        let slots = samples.iter().map(Vec::len).max().unwrap_or(0);

        // question id -> (correct responses, total responses)
        let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut conf_correct = Vec::new();
        let mut conf_incorrect = Vec::new();

        for slot in 0..slots {
            for (c, sample) in samples.iter().enumerate() {
                let Some(&qi) = sample.get(slot) else { continue };
                let item = &items[qi];
                let client = &ctx.clients[c];

                let mut last_answer = String::new();
                for _ in 0..params.responses_per_question {
                    let out = client.augmented_query(
                        &item.question,
                        &item.choices,
                        params.k,
                        params.return_threshold,
                    )?;
                    let correct = out.answer == item.answer;
                    let entry = tally.entry(item.id.clone()).or_insert((0, 0));
                    entry.1 += 1;
                    if correct {
                        entry.0 += 1;
                        conf_correct.push(out.confidence);
                    } else {
                        conf_incorrect.push(out.confidence);
                    }
                    last_answer = out.answer;
                }

                client.record_event(Role::User, &item.question)?;
                client.record_event(Role::Model, &last_answer)?;
                client
                    .record_event(Role::Sensor, &teaching_line(&item.question, item.answer_index()))?;
                client.close_episode()?;
                client.drain_queue()?;
                ctx.clock.advance(1);
            }
        }

        let per_question_accuracy: BTreeMap<String, f64> = tally
            .into_iter()
            .map(|(id, (correct, total))| (id, correct as f64 / total as f64))
            .collect();
        let accuracies: Vec<f64> = per_question_accuracy.values().copied().collect();
        reports.push(EpochReport {
            epoch,
            per_question_accuracy,
            epoch_accuracy: mean(&accuracies),
            mean_confidence_correct: mean(&conf_correct),
            mean_confidence_incorrect: mean(&conf_incorrect),
        });
    }
    Ok(reports)
}
