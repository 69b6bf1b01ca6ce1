//! Train/test generalization experiment: three answering conditions on the
//! same split. Plain answers from the bare model; memory answers over a
//! store of raw episode transcripts; experience answers over the distilled
//! store built by the client pipeline.
//!
//! The contrast the conditions expose: training episodes carry deliberation
//! boilerplate whose volume grows with the item's option count, so raw
//! transcripts of deliberation-heavy items are long. BM25's length
//! normalization pushes those transcripts under the return threshold, while
//! distillation collapses the repeated boilerplate to one sentence and the
//! same items stay retrievable.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Clock, Event, Experience, IdGenerator, Query, Role, TopicLabel};
use crate::gateway::mock::teaching_line;
use crate::gateway::{AnswerRequest, Gateway};
use crate::harness::{
    derive_seed, experiment_params, ExperimentContext, HarnessError, QaItem,
};
use crate::server::TopicStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationParams {
    pub split_ratio: f64,
    pub seed: u64,
    pub k: usize,
    /// Return threshold for both retrieval conditions. The default is tuned
    /// to desk scale: distilled experiences clear it, verbose raw
    /// transcripts fall short.
    pub return_threshold: f64,
}

impl Default for GeneralizationParams {
    fn default() -> Self {
        GeneralizationParams { split_ratio: 0.8, seed: 7, k: 5, return_threshold: 12.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub split_ratio: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub plain_accuracy: f64,
    pub memory_accuracy: f64,
    pub experience_accuracy: f64,
}

/// Boilerplate "thought" line recorded while the simulated model deliberates.
/// Identical every time, so distillation collapses any number of repetitions
/// into one sentence.
const DELIBERATION: &str = "Reviewing prior attempts and related notes before choosing an option.";

/// How many deliberation events an item produces: more options, more
/// deliberation. This is the knob that separates raw-transcript length from
/// distilled length.
fn verbosity(item: &QaItem) -> usize {
    4 * item.choices.len()
}

/// The training episode for one item: the question, the deliberation noise,
/// and a sensor line revealing the correct choice.
pub(crate) fn training_events(item: &QaItem) -> Vec<Event> {
    let mut events = Vec::with_capacity(verbosity(item) + 2);
    let push = |role: Role, text: &str, events: &mut Vec<Event>| {
        let seq = events.len() as u32;
        events.push(Event { role, text: text.to_string(), seq });
    };
    push(Role::User, &item.question, &mut events);
    for _ in 0..verbosity(item) {
        push(Role::Thought, DELIBERATION, &mut events);
    }
    push(Role::Sensor, &teaching_line(&item.question, item.answer_index()), &mut events);
    events
}

/// Seeded train/test split: shuffle, then cut at round(n * ratio).
pub(crate) fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5370_6c69, 0));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * ratio).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

fn check(items: &[QaItem], params: &GeneralizationParams) -> Result<(), HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::InvalidParams("dataset is empty".into()));
    }
    if !params.split_ratio.is_finite() || params.split_ratio <= 0.0 || params.split_ratio >= 1.0 {
        return Err(HarnessError::InvalidParams(format!(
            "split_ratio must be strictly between 0 and 1, got {}",
            params.split_ratio
        )));
    }
    if params.k == 0 {
        return Err(HarnessError::InvalidParams("k must be at least 1".into()));
    }
    Ok(())
}

/// Runs the three-condition comparison inside `work_dir` and reports one
/// accuracy per condition over the test split.
pub fn run_generalization(
    items: &[QaItem],
    params: &GeneralizationParams,
    work_dir: &Path,
) -> Result<GeneralizationReport, HarnessError> {
    check(items, params)?;
    let (train_idx, test_idx) = split_indices(items.len(), params.split_ratio, params.seed);
    let ctx = ExperimentContext::build(&work_dir.join("experience"), items, params.seed, 1)?;
    let client = &ctx.clients[0];

    // Experience condition's store: the full capture pipeline.
    for &i in &train_idx {
        for event in training_events(&items[i]) {
            client.record_event(event.role, &event.text)?;
        }
        client.close_episode()?;
        client.drain_queue()?;
        ctx.clock.advance(1);
    }

    // Memory condition's store: the same episodes, undistilled.
    let memory_root = work_dir.join("memory");
    let mut memory: BTreeMap<TopicLabel, TopicStore> = BTreeMap::new();
    let ids = IdGenerator::new("mem");
    for &i in &train_idx {
        let item = &items[i];
        let topic = ctx.gateway.classify(&item.question)?;
        if !memory.contains_key(&topic) {
            let store = TopicStore::open(
                &memory_root,
                topic.clone(),
                experiment_params(),
                usize::MAX,
                2.0,
            )?;
            memory.insert(topic.clone(), store);
        }
        let transcript = training_events(item)
            .iter()
            .map(|e| e.text.clone())
            .collect::<Vec<_>>()
            .join(" ");
        memory[&topic].put(Experience {
            id: ids.next_experience_id(),
            topic: topic.clone(),
            text: transcript,
            source_episode_ids: Vec::new(),
            condensed_from: Vec::new(),
            generation: 0,
            created_at: ctx.clock.now_ms(),
        })?;
        ctx.clock.advance(1);
    }

    let mut plain_ok = 0usize;
    let mut memory_ok = 0usize;
    let mut experience_ok = 0usize;
    for &i in &test_idx {
        let item = &items[i];

        let plain = ctx.gateway.answer(&AnswerRequest {
            question: item.question.clone(),
            experiences: Vec::new(),
            choices: item.choices.clone(),
        })?;
        plain_ok += usize::from(plain.answer == item.answer);

        let topic = ctx.gateway.classify(&item.question)?;
        let query = Query::new(&item.question, params.k, params.return_threshold)
            .map_err(|e| HarnessError::InvalidParams(e.to_string()))?;
        let hits = match memory.get(&topic) {
            Some(store) => store.retrieve(&query)?,
            None => Vec::new(),
        };
        let remembered = ctx.gateway.answer(&AnswerRequest {
            question: item.question.clone(),
            experiences: hits.iter().map(|h| h.text.clone()).collect(),
            choices: item.choices.clone(),
        })?;
        memory_ok += usize::from(remembered.answer == item.answer);

        let experienced =
            client.augmented_query(&item.question, &item.choices, params.k, params.return_threshold)?;
        experience_ok += usize::from(experienced.answer == item.answer);
    }

    let denom = test_idx.len().max(1) as f64;
    Ok(GeneralizationReport {
        split_ratio: params.split_ratio,
        train_count: train_idx.len(),
        test_count: test_idx.len(),
        plain_accuracy: plain_ok as f64 / denom,
        memory_accuracy: memory_ok as f64 / denom,
        experience_accuracy: experience_ok as f64 / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(i: usize, question: &str, choices: usize) -> QaItem {
        QaItem {
            id: format!("g{i:02}"),
            question: question.to_string(),
            choices: (0..choices).map(|c| format!("choice {c}")).collect(),
            answer: "choice 0".to_string(),
            topic: TopicLabel::new("science").unwrap(),
        }
    }

    #[test]
    fn split_is_deterministic_and_sized_by_ratio() {
        let (tr1, te1) = split_indices(10, 0.8, 7);
        let (tr2, te2) = split_indices(10, 0.8, 7);
        assert_eq!((&tr1, &te1), (&tr2, &te2));
        assert_eq!(tr1.len(), 8);
        assert_eq!(te1.len(), 2);
        let mut all: Vec<usize> = tr1.iter().chain(te1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(split_indices(10, 0.8, 8).0, tr1);
    }

    #[test]
    fn deliberation_volume_tracks_option_count() {
        let small = training_events(&item(0, "tiny question", 2));
        let large = training_events(&item(1, "another question", 6));
        assert_eq!(small.len(), 2 + 8);
        assert_eq!(large.len(), 2 + 24);
        assert_eq!(small[0].role, Role::User);
        assert_eq!(small.last().unwrap().role, Role::Sensor);
    }

    #[test]
    fn rejects_degenerate_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let data = vec![item(0, "q", 2)];
        for ratio in [0.0, 1.0, -0.5, f64::NAN] {
            let params = GeneralizationParams { split_ratio: ratio, ..Default::default() };
            let err = run_generalization(&data, &params, dir.path()).unwrap_err();
            assert!(matches!(err, HarnessError::InvalidParams(_)), "{ratio}");
        }
    }

    #[test]
    fn twin_questions_generalize_through_distillation() {
        // Ten filler items with light deliberation, plus a twin pair with
        // heavy deliberation sharing one question text. The fixture seed
        // puts one twin in train and one in test.
        let mut data: Vec<QaItem> = (0..10)
            .map(|i| {
                item(
                    i,
                    &format!("filler riddle {} about topic {}", i, ["ox", "elm", "tin"][i % 3]),
                    2,
                )
            })
            .collect();
        let twin = "which obscure doctrine reconciles cobalt lanterns with drifting meridians";
        for (j, id) in ["t-a", "t-b"].iter().enumerate() {
            let mut t = item(20 + j, twin, 8);
            t.id = id.to_string();
            data.push(t);
        }
        let dir = tempfile::tempdir().unwrap();
        let mut found = None;
        // Any seed works that (a) splits the twins across the boundary and
        // (b) makes the bare model guess the twin wrong, so the directive
        // retrieval is what flips it. Scan a few rather than depending on
        // one magic value.
        let a = data.iter().position(|d| d.id == "t-a").unwrap();
        let b = data.iter().position(|d| d.id == "t-b").unwrap();
        for seed in 0..40u64 {
            let (tr, te) = split_indices(data.len(), 0.8, seed);
            let splits = (tr.contains(&a) && te.contains(&b))
                || (tr.contains(&b) && te.contains(&a));
            if !splits {
                continue;
            }
            let mock = crate::gateway::mock::MockGateway::new(
                BTreeMap::new(),
                TopicLabel::new("science").unwrap(),
                seed,
            );
            let guess = mock
                .answer(&AnswerRequest {
                    question: twin.to_string(),
                    experiences: Vec::new(),
                    choices: data[a].choices.clone(),
                })
                .unwrap();
            if guess.answer != data[a].answer {
                found = Some(seed);
                break;
            }
        }
        let seed = found.expect("some small seed splits the twins and misguesses");
        let params = GeneralizationParams { seed, ..Default::default() };
        let sub = dir.path().join(format!("s{seed}"));
        std::fs::create_dir_all(&sub).unwrap();
        let report = run_generalization(&data, &params, &sub).unwrap();
        assert!(report.experience_accuracy >= report.memory_accuracy, "{report:?}");
        assert!(report.memory_accuracy >= report.plain_accuracy, "{report:?}");
        assert!(report.experience_accuracy > report.plain_accuracy, "{report:?}");
    }

    #[test]
    fn same_seed_reproduces_the_report() {
        let data: Vec<QaItem> =
            (0..8).map(|i| item(i, &format!("question number {i} with salt {}", i * 31), 3)).collect();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let params = GeneralizationParams::default();
        let a = run_generalization(&data, &params, d1.path()).unwrap();
        let b = run_generalization(&data, &params, d2.path()).unwrap();
        assert_eq!(a, b);
    }
}
