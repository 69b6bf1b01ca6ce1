//! Similarity distribution report: how the pairwise BM25 scores of a
//! store's live experiences spread across unit-wide bins. High mass in the
//! upper bins means the store is overdue for refinement.

use serde::{Deserialize, Serialize};

use crate::domain::Experience;
use crate::harness::HarnessError;
use crate::index::Bm25Params;
use crate::refine::similarity_matrix;
use crate::server::TopicStore;

/// Bin labels, low to high. Everything below 1 lands in the first bin,
/// everything at or above 5 in the last, unit-wide bins between.
pub const SIMILARITY_BINS: [&str; 6] = ["<1", "1-2", "2-3", "3-4", "4-5", ">=5"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBin {
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub topic: String,
    pub experience_count: usize,
    /// Off-diagonal upper-triangle pairs: n * (n - 1) / 2.
    pub pair_count: usize,
    pub bins: Vec<SimilarityBin>,
}

fn bin_index(score: f64) -> usize {
    if score < 1.0 {
        0
    } else if score >= 5.0 {
        5
    } else {
        // 1.0..5.0 in unit steps; score is finite here.
        score as usize
    }
}

/// Bins the upper triangle of the similarity matrix over these experiences.
/// Needs at least two experiences; one pair is the smallest distribution.
pub fn similarity_report_over(
    topic: &str,
    experiences: &[Experience],
    params: &Bm25Params,
) -> Result<SimilarityReport, HarnessError> {
    if experiences.len() < 2 {
        return Err(HarnessError::NoPairs);
    }
    let matrix = similarity_matrix(experiences, params)
        .map_err(|e| HarnessError::InvalidParams(format!("similarity matrix: {e}")))?;
    let mut counts = [0usize; SIMILARITY_BINS.len()];
    let n = matrix.n();
    for i in 0..n {
        for j in (i + 1)..n {
            counts[bin_index(matrix.scores[i][j])] += 1;
        }
    }
    let pair_count = n * (n - 1) / 2;
    let bins = SIMILARITY_BINS
        .iter()
        .zip(counts)
        .map(|(label, count)| SimilarityBin {
            label: label.to_string(),
            count,
            percent: 100.0 * count as f64 / pair_count as f64,
        })
        .collect();
    Ok(SimilarityReport {
        topic: topic.to_string(),
        experience_count: n,
        pair_count,
        bins,
    })
}

/// Report over a live store's current generation, with the store's own
/// ranking parameters.
pub fn similarity_report(store: &TopicStore) -> Result<SimilarityReport, HarnessError> {
    let view = store.snapshot();
    similarity_report_over(store.topic().as_str(), &view.experiences, store.params())
}
