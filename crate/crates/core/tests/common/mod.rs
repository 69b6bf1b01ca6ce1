//! Independent oracles for the acceptance suite.
//!
//! Everything here recomputes expected answers straight from the published
//! formulas and documented contracts: scoring from the Okapi equation,
//! grouping from the greedy-walk description, ids and directives from the
//! recorded digest layouts. None of it calls into the library's scoring,
//! grouping, or hashing code, so agreement between the two sides is
//! evidence rather than tautology. The crate's public types are used only
//! as data carriers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use xpstore_core::harness::QaItem;
use xpstore_core::{Bm25Params, Experience, ExperienceId, TopicLabel};

// ---------------------------------------------------------------------------
// Criterion runner
// ---------------------------------------------------------------------------

/// Runs one acceptance criterion and prints exactly one verdict line for it.
/// The body returns a short detail string on success or a failure message.
/// Exceeding the time budget fails the criterion even if the body passed.
pub fn criterion<F>(num: u32, name: &str, budget: Duration, body: F)
where
    F: FnOnce() -> Result<String, String>,
{
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let stamp = format!("{:.2}s of {:.0}s budget", elapsed.as_secs_f64(), budget.as_secs_f64());
    match outcome {
        Ok(Ok(detail)) if elapsed <= budget => {
            println!("[criterion {num:02}] {name}: PASS ({detail}; {stamp})");
        }
        Ok(Ok(detail)) => {
            println!("[criterion {num:02}] {name}: FAIL (over time budget; {detail}; {stamp})");
            panic!("criterion {num:02} exceeded its time budget: {stamp}");
        }
        Ok(Err(msg)) => {
            println!("[criterion {num:02}] {name}: FAIL ({msg}; {stamp})");
            panic!("criterion {num:02} failed: {msg}");
        }
        Err(payload) => {
            println!("[criterion {num:02}] {name}: FAIL (panicked; {stamp})");
            resume_unwind(payload);
        }
    }
}

/// `?`-friendly assertion for criterion bodies. The message closure runs only
/// on failure so hot loops stay cheap.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn dataset_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../datasets").join(name)
}

// ---------------------------------------------------------------------------
// Tokenizer and BM25, straight from the formula
// ---------------------------------------------------------------------------

/// Documented tokenizer contract: lowercase, split on non-alphanumeric,
/// drop empty fragments.
pub fn o_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Corpus view the oracle scores against: documents in insertion order with
/// their token lists, document frequencies, and mean length.
pub struct OracleIndex {
    pub tokens: Vec<Vec<String>>,
    pub df: HashMap<String, usize>,
    pub n: usize,
    pub avgdl: f64,
}

impl OracleIndex {
    pub fn build(docs: &[(String, String)]) -> OracleIndex {
        let tokens: Vec<Vec<String>> = docs.iter().map(|(_, t)| o_tokenize(t)).collect();
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in &tokens {
            let distinct: HashSet<&String> = doc.iter().collect();
            for t in distinct {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let n = docs.len();
        let total: usize = tokens.iter().map(Vec::len).sum();
        let avgdl = if n == 0 { 0.0 } else { total as f64 / n as f64 };
        OracleIndex { tokens, df, n, avgdl }
    }

    /// ln((N - n_t + 0.5) / (n_t + 0.5)), never clamped here.
    pub fn idf(&self, term: &str) -> f64 {
        let n_t = self.df.get(term).copied().unwrap_or(0) as f64;
        ((self.n as f64 - n_t + 0.5) / (n_t + 0.5)).ln()
    }

    /// Okapi sum over query tokens with multiplicity; zero-frequency terms
    /// contribute nothing, and clamping (when enabled) floors each term's
    /// IDF at zero.
    pub fn score(&self, query: &[String], doc_idx: usize, params: &Bm25Params) -> f64 {
        let doc = &self.tokens[doc_idx];
        let dl = doc.len() as f64;
        let mut sum = 0.0;
        for t in query {
            let f = doc.iter().filter(|d| *d == t).count() as f64;
            if f == 0.0 {
                continue;
            }
            let mut idf = self.idf(t);
            if params.clamp_idf {
                idf = idf.max(0.0);
            }
            let norm = 1.0 - params.b + params.b * dl / self.avgdl;
            sum += idf * f * (params.k1 + 1.0) / (f + params.k1 * norm);
        }
        sum
    }
}

/// Full retrieval contract: score every document, drop strictly-below
/// threshold, order by (score desc, text asc, id asc), truncate to k.
pub fn o_rank(
    query_text: &str,
    docs: &[(String, String)],
    k: usize,
    threshold: f64,
    params: &Bm25Params,
) -> Vec<(String, f64, String)> {
    let idx = OracleIndex::build(docs);
    let query = o_tokenize(query_text);
    let mut scored: Vec<(String, f64, String)> = docs
        .iter()
        .enumerate()
        .map(|(i, (id, text))| (id.clone(), idx.score(&query, i, params), text.clone()))
        .collect();
    scored.retain(|(_, s, _)| *s >= threshold);
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.2.cmp(&b.2)).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

// ---------------------------------------------------------------------------
// Similarity, grouping, condensation
// ---------------------------------------------------------------------------

/// Symmetric pairwise matrix: max of the two directed scores, statistics
/// taken over exactly this collection.
#[allow(clippy::needless_range_loop)] // index notation mirrors the matrix definition
pub fn o_similarity(docs: &[(String, String)], params: &Bm25Params) -> Vec<Vec<f64>> {
    let idx = OracleIndex::build(docs);
    let n = docs.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        s[i][i] = idx.score(&idx.tokens[i], i, params);
        for j in (i + 1)..n {
            let ij = idx.score(&idx.tokens[i], j, params);
            let ji = idx.score(&idx.tokens[j], i, params);
            let m = ij.max(ji);
            s[i][j] = m;
            s[j][i] = m;
        }
    }
    s
}

/// Greedy single pass in matrix order. Returns (groups of member indices in
/// matrix order, singleton indices in matrix order). No transitive closure.
pub fn o_group(s: &[Vec<f64>], tau: f64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = s.len();
    let mut alive = vec![true; n];
    let mut groups = Vec::new();
    let mut singles = Vec::new();
    for i in 0..n {
        if !alive[i] {
            continue;
        }
        alive[i] = false;
        let mut members = vec![i];
        for j in (i + 1)..n {
            if alive[j] && s[i][j] >= tau {
                alive[j] = false;
                members.push(j);
            }
        }
        if members.len() >= 2 {
            groups.push(members);
        } else {
            singles.push(i);
        }
    }
    (groups, singles)
}

/// Sentence contract: each maximal run ending in . ! or ? is one sentence,
/// a trailing unterminated fragment is its own sentence, all trimmed, empties
/// dropped.
pub fn o_split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') {
            let trimmed = cur.trim();
            if !trimmed.is_empty() {
                out.push(trimmed.to_string());
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

fn o_strip_prefixes(mut text: &str) -> &str {
    loop {
        if let Some(rest) = text.strip_prefix("[distilled] ") {
            text = rest;
        } else if let Some(rest) = text.strip_prefix("[condensed] ") {
            text = rest;
        } else {
            return text;
        }
    }
}

/// Mock condensation: strip marker prefixes, pool sentences from every input,
/// sort, dedup, rejoin under the condensed marker.
pub fn o_condense(texts: &[String]) -> String {
    let mut sentences: Vec<String> =
        texts.iter().flat_map(|t| o_split_sentences(o_strip_prefixes(t))).collect();
    sentences.sort();
    sentences.dedup();
    format!("[condensed] {}", sentences.join(" "))
}

/// Condensed-id digest: SHA-256 over each member id followed by a newline,
/// first eight bytes as lowercase hex, "cond-" prefix.
pub fn o_condensed_id(member_ids: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for id in member_ids {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("cond-{hex}")
}

/// Expected report entry for one condensed group.
pub struct OracleGroup {
    pub condensed_id: String,
    pub member_ids: Vec<String>,
}

/// Full refinement replay over experiences: output is surviving singletons in
/// input order, then one condensed experience per group in formation order.
pub fn o_refine(
    input: &[Experience],
    tau: f64,
    params: &Bm25Params,
) -> (Vec<Experience>, Vec<OracleGroup>) {
    let docs: Vec<(String, String)> =
        input.iter().map(|x| (x.id.as_str().to_string(), x.text.clone())).collect();
    let sims = o_similarity(&docs, params);
    let (groups, singles) = o_group(&sims, tau);

    let mut out: Vec<Experience> = singles.iter().map(|&i| input[i].clone()).collect();
    let mut report = Vec::new();
    for members in &groups {
        let xs: Vec<&Experience> = members.iter().map(|&i| &input[i]).collect();
        let member_ids: Vec<&str> = xs.iter().map(|x| x.id.as_str()).collect();
        let texts: Vec<String> = xs.iter().map(|x| x.text.clone()).collect();

        let mut seen = HashSet::new();
        let mut lineage = Vec::new();
        for x in &xs {
            for ep in &x.source_episode_ids {
                if seen.insert(ep.clone()) {
                    lineage.push(ep.clone());
                }
            }
        }

        let id = o_condensed_id(&member_ids);
        report.push(OracleGroup {
            condensed_id: id.clone(),
            member_ids: member_ids.iter().map(|s| s.to_string()).collect(),
        });
        out.push(Experience {
            id: ExperienceId::from(id),
            topic: xs[0].topic.clone(),
            text: o_condense(&texts),
            source_episode_ids: lineage,
            condensed_from: xs.iter().map(|x| x.id.clone()).collect(),
            generation: 1 + xs.iter().map(|x| x.generation).max().unwrap_or(0),
            created_at: xs.iter().map(|x| x.created_at).max().unwrap_or(0),
        });
    }
    (out, report)
}

// ---------------------------------------------------------------------------
// Gateway text rules
// ---------------------------------------------------------------------------

/// First twelve hex characters of SHA-256 over the trimmed question.
pub fn o_question_key(question: &str) -> String {
    let digest = Sha256::digest(question.trim().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn o_directive(question: &str, choice_index: usize) -> String {
    format!("ANSWER({})={choice_index}", o_question_key(question))
}

/// Seeded fallback guess: SHA-256 over seed little-endian bytes then the
/// trimmed question, first eight digest bytes as a little-endian u64, modulo
/// the choice count.
pub fn o_guess(seed: u64, question: &str, n_choices: usize) -> usize {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(question.trim().as_bytes());
    let digest = hasher.finalize();
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(raw) % n_choices as u64) as usize
}

/// Answer rule: first valid directive occurrence wins, scanning experience
/// texts in order; otherwise the seeded guess at miss confidence.
pub fn o_answer(seed: u64, question: &str, choices: &[String], texts: &[String]) -> (String, f64) {
    let marker = format!("ANSWER({})=", o_question_key(question));
    for text in texts {
        for (pos, _) in text.match_indices(&marker) {
            let digits: String =
                text[pos + marker.len()..].chars().take_while(|c| c.is_ascii_digit()).collect();
            if let Ok(i) = digits.parse::<usize>() {
                if i < choices.len() {
                    return (choices[i].clone(), 90.0);
                }
            }
        }
    }
    if choices.is_empty() {
        return (String::new(), 25.0);
    }
    (choices[o_guess(seed, question, choices.len())].clone(), 25.0)
}

// ---------------------------------------------------------------------------
// Similarity histogram binning
// ---------------------------------------------------------------------------

/// Bin layout: ["<1", "1-2", "2-3", "3-4", "4-5", ">=5"].
pub fn o_bin_index(score: f64) -> usize {
    if score < 1.0 {
        0
    } else if score >= 5.0 {
        5
    } else {
        score as usize
    }
}

/// Upper-triangle pair counts over the six bins.
pub fn o_bin_counts(sims: &[Vec<f64>]) -> [usize; 6] {
    let mut counts = [0usize; 6];
    let n = sims.len();
    for i in 0..n {
        for j in (i + 1)..n {
            counts[o_bin_index(sims[i][j])] += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Sweep replay
// ---------------------------------------------------------------------------

pub struct SweepReplay {
    pub full_size: usize,
    pub refined_size: usize,
    pub lead: f64,
}

/// End-to-end replay of one sweep tau: plant the redundant notes, evaluate
/// every question against the full corpus, refine per topic, evaluate again,
/// and accumulate the per-question accuracy differences.
pub fn o_sweep_replay(
    items: &[QaItem],
    iterations: usize,
    tau: f64,
    k: usize,
    threshold: f64,
    seed: u64,
    params: &Bm25Params,
) -> SweepReplay {
    // Planted corpus per topic, in the same item-major insertion order the
    // stores receive.
    let mut full: BTreeMap<TopicLabel, Vec<(String, String)>> = BTreeMap::new();
    for (j, item) in items.iter().enumerate() {
        let text =
            format!("archived operational note. {}.", o_directive(&item.question, item.answer_index()));
        for i in 0..iterations {
            full.entry(item.topic.clone())
                .or_default()
                .push((format!("s-q{j:02}-{i:03}"), text.clone()));
        }
    }

    let evaluate = |corpora: &BTreeMap<TopicLabel, Vec<(String, String)>>| -> Vec<f64> {
        items
            .iter()
            .map(|item| {
                let docs = corpora.get(&item.topic).map(Vec::as_slice).unwrap_or(&[]);
                let hits = o_rank(&item.question, docs, k, threshold, params);
                let texts: Vec<String> = hits.into_iter().map(|(_, _, t)| t).collect();
                let (answer, _) = o_answer(seed, &item.question, &item.choices, &texts);
                if answer == item.answer {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };

    let full_acc = evaluate(&full);

    let mut refined: BTreeMap<TopicLabel, Vec<(String, String)>> = BTreeMap::new();
    for (topic, docs) in &full {
        let sims = o_similarity(docs, params);
        let (groups, singles) = o_group(&sims, tau);
        let mut out: Vec<(String, String)> = singles.iter().map(|&i| docs[i].clone()).collect();
        for members in &groups {
            let ids: Vec<&str> = members.iter().map(|&i| docs[i].0.as_str()).collect();
            let texts: Vec<String> = members.iter().map(|&i| docs[i].1.clone()).collect();
            out.push((o_condensed_id(&ids), o_condense(&texts)));
        }
        refined.insert(topic.clone(), out);
    }
    let refined_acc = evaluate(&refined);

    SweepReplay {
        full_size: full.values().map(Vec::len).sum(),
        refined_size: refined.values().map(Vec::len).sum(),
        lead: full_acc.iter().zip(&refined_acc).map(|(f, r)| r - f).sum(),
    }
}

// ---------------------------------------------------------------------------
// Fixture builders
// ---------------------------------------------------------------------------

/// Distilled-form experience with a distinct episode in its lineage.
pub fn xp(id: &str, topic: &str, text: &str, created_at: u64) -> Experience {
    Experience {
        id: id.into(),
        topic: TopicLabel::new(topic).unwrap(),
        text: text.to_string(),
        source_episode_ids: vec![format!("ep-{id}").as_str().into()],
        condensed_from: vec![],
        generation: 0,
        created_at,
    }
}
