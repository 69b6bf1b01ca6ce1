//! Tokenization, corpus statistics, and Okapi BM25 ranking.
//!
//! Scoring follows the standard Okapi form: for query q and document d,
//!
//!   score(q, d) = sum over tokens t of q of
//!       IDF(t) * f(t,d) * (k1 + 1) / (f(t,d) + k1 * (1 - b + b * |d| / avgdl))
//!
//! with IDF(t) = ln((N - n_t + 0.5) / (n_t + 0.5)). Duplicate query tokens
//! contribute one summand each. IDF is not clamped at zero unless
//! `Bm25Params::clamp_idf` is set; tiny corpora therefore produce negative
//! scores, which is faithful to the formula as written.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Query, RetrievalHit};

/// Splits text into lowercase tokens: every maximal run of alphanumeric
/// characters is one token, everything else is a separator. No stemming and
/// no stop-word removal; IDF already down-weights common words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// BM25 hyperparameters. `clamp_idf` floors per-term IDF at zero, a common
/// engineering variant kept off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    #[serde(default)]
    pub clamp_idf: bool,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75, clamp_idf: false }
    }
}

/// Term statistics over one fixed corpus. Immutable once built; rebuilt per
/// store generation rather than maintained incrementally.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    n_docs: usize,
    doc_freq: HashMap<String, usize>,
    doc_len: HashMap<String, usize>,
    term_freq: HashMap<String, HashMap<String, usize>>,
    avgdl: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IndexError {
    #[error("duplicate doc id {0:?}")]
    DuplicateDocId(String),
    #[error("unknown doc id {0:?}")]
    UnknownDocId(String),
}

impl CorpusStats {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Number of documents containing the term at least once (n_t). Zero for
    /// terms absent from the corpus.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<usize> {
        self.doc_len.get(doc_id).copied()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }
}

/// Builds term statistics over exactly the supplied documents.
pub fn build_stats<'a, I>(docs: I) -> Result<CorpusStats, IndexError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut doc_freq: HashMap<String, usize> = HashMap::new();
    let mut doc_len: HashMap<String, usize> = HashMap::new();
    let mut term_freq: HashMap<String, HashMap<String, usize>> = HashMap::new();
    let mut total_len = 0usize;

    for (id, text) in docs {
        if doc_len.contains_key(id) {
            return Err(IndexError::DuplicateDocId(id.to_string()));
        }
        let tokens = tokenize(text);
        total_len += tokens.len();
        doc_len.insert(id.to_string(), tokens.len());
        let mut tf: HashMap<String, usize> = HashMap::new();
        for t in tokens {
            *tf.entry(t).or_insert(0) += 1;
        }
        for term in tf.keys() {
            *doc_freq.entry(term.clone()).or_insert(0) += 1;
        }
        term_freq.insert(id.to_string(), tf);
    }

    let n_docs = doc_len.len();
    let avgdl = if n_docs == 0 { 0.0 } else { total_len as f64 / n_docs as f64 };
    Ok(CorpusStats { n_docs, doc_freq, doc_len, term_freq, avgdl })
}

/// Inverse document frequency: ln((N - n_t + 0.5) / (n_t + 0.5)).
/// Never clamps; negative values for very common terms are intentional.
pub fn idf(term: &str, stats: &CorpusStats) -> f64 {
    let n = stats.n_docs as f64;
    let nt = stats.doc_freq(term) as f64;
    ((n - nt + 0.5) / (nt + 0.5)).ln()
}

/// Okapi BM25 score of one document against a tokenized query.
pub fn bm25(
    query: &[String],
    doc_id: &str,
    stats: &CorpusStats,
    params: &Bm25Params,
) -> Result<f64, IndexError> {
    let tf = stats
        .term_freq
        .get(doc_id)
        .ok_or_else(|| IndexError::UnknownDocId(doc_id.to_string()))?;
    let dlen = stats.doc_len[doc_id] as f64;

    let mut score = 0.0;
    for t in query {
        let f = tf.get(t.as_str()).copied().unwrap_or(0) as f64;
        if f == 0.0 {
            continue;
        }
        let mut w = idf(t, stats);
        if params.clamp_idf {
            w = w.max(0.0);
        }
        // avgdl > 0 whenever any document has a token, which f > 0 implies.
        let norm = 1.0 - params.b + params.b * dlen / stats.avgdl;
        score += w * f * (params.k1 + 1.0) / (f + params.k1 * norm);
    }
    Ok(score)
}

/// Scores every experience against the query, drops hits below the return
/// threshold (equal scores are kept), sorts by score descending with ties
/// broken by text then id ascending, and truncates to the top k.
pub fn retrieve(
    query: &Query,
    corpus: &[crate::domain::Experience],
    params: &Bm25Params,
) -> Result<Vec<RetrievalHit>, IndexError> {
    let stats = build_stats(corpus.iter().map(|x| (x.id.as_str(), x.text.as_str())))?;
    let qtokens = tokenize(&query.text);

    let mut hits = Vec::new();
    for x in corpus {
        let score = bm25(&qtokens, x.id.as_str(), &stats, params)?;
        if score < query.return_threshold {
            continue;
        }
        hits.push(RetrievalHit { experience_id: x.id.clone(), score, text: x.text.clone() });
    }
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| a.experience_id.cmp(&b.experience_id))
    });
    hits.truncate(query.k);
    Ok(hits)
}
