//! Refinement sweep: oversaturate stores with duplicated directive notes,
//! refine copies of them at each tau, and measure how much accuracy each
//! refined database gains over the bloated original.
//!
//! The degradation being measured is crowding. Duplicated notes share no
//! vocabulary with the questions, so every retrieval is a zero-score tie
//! broken by text order, and the same handful of duplicates floods the top
//! of every hit list. Condensing each duplicate family to one note makes
//! room for every question's directive again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Experience, ExperienceId, Query, TopicLabel};
use crate::gateway::mock::MockGateway;
use crate::gateway::{answer_directive, AnswerRequest, Condenser, Gateway};
use crate::harness::{
    default_topic_for, experiment_params, topic_keywords, HarnessError, QaItem,
};
use crate::server::TopicStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub iterations_per_question: usize,
    pub taus: Vec<f64>,
    pub seed: u64,
    pub k: usize,
    pub return_threshold: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            iterations_per_question: 100,
            taus: vec![2.0, 99.0],
            seed: 7,
            k: 5,
            return_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    /// Sum over questions of (refined accuracy - full accuracy).
    pub accumulated_lead: f64,
    pub database_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub taus: Vec<f64>,
    pub full_size: usize,
    /// Lead of the unrefined database over itself. Always exactly zero;
    /// reported as a computed value, not a constant, as a self-check.
    pub self_lead: f64,
    pub rows: Vec<SweepRow>,
}

/// The note planted `iterations_per_question` times per question. Carries
/// the directive but none of the question's vocabulary, so retrieval scores
/// are pure ties.
pub(crate) fn planted_text(item: &QaItem) -> String {
    format!("archived operational note. {}.", answer_directive(&item.question, item.answer_index()))
}

fn check(items: &[QaItem], params: &SweepParams) -> Result<(), HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::InvalidParams("dataset is empty".into()));
    }
    if params.iterations_per_question == 0 {
        return Err(HarnessError::InvalidParams("iterations_per_question must be at least 1".into()));
    }
    if params.taus.is_empty() {
        return Err(HarnessError::InvalidParams("taus must not be empty".into()));
    }
    if let Some(t) = params.taus.iter().find(|t| !t.is_finite()) {
        return Err(HarnessError::InvalidParams(format!("tau must be finite, got {t}")));
    }
    if params.k == 0 {
        return Err(HarnessError::InvalidParams("k must be at least 1".into()));
    }
    Ok(())
}

fn open_stores(
    root: &Path,
    topics: impl IntoIterator<Item = TopicLabel>,
) -> Result<BTreeMap<TopicLabel, TopicStore>, HarnessError> {
    let mut stores = BTreeMap::new();
    for topic in topics {
        if let std::collections::btree_map::Entry::Vacant(slot) = stores.entry(topic) {
            let store =
                TopicStore::open(root, slot.key().clone(), experiment_params(), usize::MAX, 2.0)?;
            slot.insert(store);
        }
    }
    Ok(stores)
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// One deterministic response per question against one set of stores:
/// 1.0 if the mock resolves the question from the hits, else whether its
/// seeded guess happens to be right.
fn evaluate(
    stores: &BTreeMap<TopicLabel, TopicStore>,
    items: &[QaItem],
    gateway: &MockGateway,
    k: usize,
    return_threshold: f64,
) -> Result<Vec<f64>, HarnessError> {
    let mut acc = Vec::with_capacity(items.len());
    for item in items {
        let query = Query::new(&item.question, k, return_threshold)
            .map_err(|e| HarnessError::InvalidParams(e.to_string()))?;
        let hits = match stores.get(&item.topic) {
            Some(store) => store.retrieve(&query)?,
            None => Vec::new(),
        };
        let out = gateway.answer(&AnswerRequest {
            question: item.question.clone(),
            experiences: hits.iter().map(|h| h.text.clone()).collect(),
            choices: item.choices.clone(),
        })?;
        acc.push(if out.answer == item.answer { 1.0 } else { 0.0 });
    }
    Ok(acc)
}

fn total_size(stores: &BTreeMap<TopicLabel, TopicStore>) -> Result<usize, HarnessError> {
    let mut total = 0;
    for store in stores.values() {
        total += store.stats()?.count;
    }
    Ok(total)
}

fn lead(refined: &[f64], full: &[f64]) -> f64 {
    refined.iter().zip(full).map(|(r, f)| r - f).sum()
}

/// Builds the oversaturated database, snapshots a copy per tau, refines each
/// copy, and reports per-tau accumulated lead and size.
pub fn run_refinement_sweep(
    items: &[QaItem],
    params: &SweepParams,
    work_dir: &Path,
) -> Result<SweepReport, HarnessError> {
    check(items, params)?;
    let gateway =
        MockGateway::new(topic_keywords(items), default_topic_for(items), params.seed);

    let full_root = work_dir.join("full");
    let mut full = open_stores(&full_root, items.iter().map(|i| i.topic.clone()))?;
    let mut tick: u64 = 0;
    for (j, item) in items.iter().enumerate() {
        let text = planted_text(item);
        let store = &full[&item.topic];
        for i in 0..params.iterations_per_question {
            store.put(Experience {
                id: ExperienceId::from(format!("s-q{j:02}-{i:03}")),
                topic: item.topic.clone(),
                text: text.clone(),
                source_episode_ids: Vec::new(),
                condensed_from: Vec::new(),
                generation: 0,
                created_at: tick,
            })?;
            tick += 1;
        }
    }

    let full_acc = evaluate(&full, items, &gateway, params.k, params.return_threshold)?;
    let full_again = evaluate(&full, items, &gateway, params.k, params.return_threshold)?;
    let self_lead = lead(&full_again, &full_acc);
    let full_size = total_size(&full)?;
    // Drop open handles before copying the directories underneath them.
    full.clear();

    let mut rows = Vec::with_capacity(params.taus.len());
    for (ti, &tau) in params.taus.iter().enumerate() {
        let tau_root: PathBuf = work_dir.join(format!("tau-{ti}"));
        copy_dir(&full_root, &tau_root)?;
        let refined = open_stores(&tau_root, items.iter().map(|i| i.topic.clone()))?;
        for store in refined.values() {
            store.run_refinement(Some(tau), &gateway as &dyn Condenser)?;
        }
        let refined_acc = evaluate(&refined, items, &gateway, params.k, params.return_threshold)?;
        rows.push(SweepRow {
            tau,
            accumulated_lead: lead(&refined_acc, &full_acc),
            database_size: total_size(&refined)?,
        });
    }

    Ok(SweepReport { taus: params.taus.clone(), full_size, self_lead, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items() -> Vec<QaItem> {
        // Five questions, five choices each, answers on five distinct
        // indices so each planted note's index digit is as frequent as its
        // question key and duplicate families stay similarity-tight.
        (0..5)
            .map(|j| QaItem {
                id: format!("s{j}"),
                question: format!(
                    "which relic belongs to the {} dynasty vault",
                    ["amber", "basalt", "cedar", "dune", "ember"][j]
                ),
                choices: (0..5).map(|c| format!("vault {c}")).collect(),
                answer: format!("vault {j}"),
                topic: TopicLabel::new("relics").unwrap(),
            })
            .collect()
    }

    #[test]
    fn planted_notes_share_no_question_vocabulary() {
        for item in items() {
            let note = crate::index::tokenize(&planted_text(&item));
            for token in crate::index::tokenize(&item.question) {
                assert!(!note.contains(&token), "{token} leaks into the note");
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SweepParams { taus: vec![], ..Default::default() };
        assert!(matches!(
            run_refinement_sweep(&items(), &bad, dir.path()),
            Err(HarnessError::InvalidParams(_))
        ));
        let bad = SweepParams { iterations_per_question: 0, ..Default::default() };
        assert!(matches!(
            run_refinement_sweep(&items(), &bad, dir.path()),
            Err(HarnessError::InvalidParams(_))
        ));
    }

    #[test]
    fn crowded_database_recovers_after_refinement() {
        let dir = tempfile::tempdir().unwrap();
        let params = SweepParams {
            iterations_per_question: 20,
            taus: vec![2.0, 99.0],
            ..Default::default()
        };
        let report = run_refinement_sweep(&items(), &params, dir.path()).unwrap();
        assert_eq!(report.full_size, 100);
        assert_eq!(report.self_lead, 0.0);
        // tau 2.0 condenses each duplicate family to one note: five notes,
        // all of which fit in a top-5, so every question resolves.
        assert_eq!(report.rows[0].database_size, 5);
        assert!(report.rows[0].accumulated_lead > 0.0, "{report:?}");
        // tau above the maximum pairwise similarity changes nothing.
        assert_eq!(report.rows[1].database_size, 100);
        assert_eq!(report.rows[1].accumulated_lead, 0.0);
    }

    #[test]
    fn same_seed_reproduces_the_report() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let params = SweepParams { iterations_per_question: 10, ..Default::default() };
        let a = run_refinement_sweep(&items(), &params, d1.path()).unwrap();
        let b = run_refinement_sweep(&items(), &params, d2.path()).unwrap();
        assert_eq!(a, b);
    }
}
