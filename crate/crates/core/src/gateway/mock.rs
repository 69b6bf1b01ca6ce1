//! Deterministic model stand-in. Every operation is a pure function of its
//! inputs, the configured keyword map, and the run seed, which is what makes
//! end-to-end harness runs exactly reproducible.
//!
//! The answer path implements the directive mechanism: an experience text
//! containing `ANSWER(<question-key>)=<i>` resolves the matching question to
//! choice i with confidence 90; without a directive the mock falls back to a
//! seed-keyed pseudo-random choice with confidence 25.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{
    answer_directive, question_key, split_sentences, AnswerRequest, AnswerResult, Condenser,
    DistillResult, Gateway, GatewayError,
};
use crate::domain::{Episode, TopicLabel};
use crate::index::tokenize;

/// Confidence reported when a stored directive names the answer.
pub const HIT_CONFIDENCE: f64 = 90.0;
/// Confidence reported for a seeded guess.
pub const MISS_CONFIDENCE: f64 = 25.0;

pub const DISTILLED_PREFIX: &str = "[distilled] ";
pub const CONDENSED_PREFIX: &str = "[condensed] ";

#[derive(Debug, Clone)]
pub struct MockGateway {
    /// topic -> lowercase keyword tokens; BTreeMap fixes the tie-break order.
    keywords: BTreeMap<TopicLabel, Vec<String>>,
    default_topic: TopicLabel,
    seed: u64,
}

impl MockGateway {
    pub fn new(
        keywords: BTreeMap<TopicLabel, Vec<String>>,
        default_topic: TopicLabel,
        seed: u64,
    ) -> Self {
        let keywords = keywords
            .into_iter()
            .map(|(t, kws)| (t, kws.into_iter().map(|k| k.to_lowercase()).collect()))
            .collect();
        MockGateway { keywords, default_topic, seed }
    }

    /// Keyword vote: the topic whose keywords occur most often in the
    /// tokenized text; ties go to the lexicographically smallest topic; no
    /// match at all falls back to the default topic.
    fn topic_for(&self, text: &str) -> TopicLabel {
        let tokens = tokenize(text);
        let mut best: Option<(&TopicLabel, usize)> = None;
        for (topic, kws) in &self.keywords {
            let count: usize =
                tokens.iter().filter(|t| kws.iter().any(|k| k == t.as_str())).count();
            if count == 0 {
                continue;
            }
            // Strictly-greater keeps the earlier (smaller) topic on ties.
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((topic, count));
            }
        }
        best.map(|(t, _)| t.clone()).unwrap_or_else(|| self.default_topic.clone())
    }
}

fn strip_prefixes(mut text: &str) -> &str {
    loop {
        if let Some(rest) = text.strip_prefix(DISTILLED_PREFIX) {
            text = rest;
        } else if let Some(rest) = text.strip_prefix(CONDENSED_PREFIX) {
            text = rest;
        } else {
            return text;
        }
    }
}

fn unique_sorted_sentences<'a>(texts: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut sentences: Vec<String> = texts.flat_map(|t| split_sentences(strip_prefixes(t))).collect();
    sentences.sort();
    sentences.dedup();
    sentences
}

/// Scans experience texts in order for a directive naming this question;
/// returns the first valid choice index found.
fn directive_choice(req: &AnswerRequest) -> Option<usize> {
    let marker = format!("ANSWER({})=", question_key(&req.question));
    for text in &req.experiences {
        for (pos, _) in text.match_indices(&marker) {
            let after = &text[pos + marker.len()..];
            let digits: String = after.chars().take_while(|c| c.is_ascii_digit()).collect();
            if let Ok(i) = digits.parse::<usize>() {
                if i < req.choices.len() {
                    return Some(i);
                }
            }
        }
    }
    None
}

/// Seed-keyed deterministic fallback: hash (seed, trimmed question) and pick
/// a choice index from the first 8 digest bytes.
fn guess_choice(seed: u64, question: &str, n_choices: usize) -> usize {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(question.trim().as_bytes());
    let digest = hasher.finalize();
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(raw) % n_choices as u64) as usize
}

impl Condenser for MockGateway {
    /// Strips distilled/condensed prefixes, deduplicates exact sentences
    /// across all inputs, sorts, joins. Output never exceeds the combined
    /// input length.
    fn condense(&self, texts: &[String]) -> Result<String, GatewayError> {
        if texts.len() < 2 {
            return Err(GatewayError::TooFewTexts(texts.len()));
        }
        let sentences = unique_sorted_sentences(texts.iter().map(String::as_str));
        Ok(format!("{CONDENSED_PREFIX}{}", sentences.join(" ")))
    }
}

impl Gateway for MockGateway {
    fn distill(&self, episode: &Episode) -> Result<DistillResult, GatewayError> {
        let sentences = unique_sorted_sentences(episode.events.iter().map(|e| e.text.as_str()));
        let text = format!("{DISTILLED_PREFIX}{}", sentences.join(" "));
        let joined: String =
            episode.events.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join(" ");
        Ok(DistillResult { text, topic: self.topic_for(&joined) })
    }

    fn classify(&self, text: &str) -> Result<TopicLabel, GatewayError> {
        Ok(self.topic_for(text))
    }

    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResult, GatewayError> {
        if let Some(i) = directive_choice(req) {
            return Ok(AnswerResult { answer: req.choices[i].clone(), confidence: HIT_CONFIDENCE });
        }
        if req.choices.is_empty() {
            return Ok(AnswerResult { answer: String::new(), confidence: MISS_CONFIDENCE });
        }
        let i = guess_choice(self.seed, &req.question, req.choices.len());
        Ok(AnswerResult { answer: req.choices[i].clone(), confidence: MISS_CONFIDENCE })
    }
}

/// Convenience used by tests and the harness to build a directive-bearing
/// teaching line: a short sentence plus the directive fragment.
pub fn teaching_line(question: &str, choice_index: usize) -> String {
    format!("The recorded correct choice follows. {}", answer_directive(question, choice_index))
}
