//! Deterministic corpus builders for the pipeline benchmarks. Text is
//! generated from fixed arithmetic patterns rather than an RNG so benchmark
//! inputs are identical across runs and machines.

use xpstore_core::{Experience, TopicLabel};

/// `n` experiences over a `vocab`-word vocabulary, `len` tokens each. Token
/// choice mixes two coprime strides so neighbouring documents overlap
/// partially, which keeps the scoring loop honest (nonzero but not identical
/// term frequencies).
pub fn corpus(n: usize, vocab: usize, len: usize) -> Vec<Experience> {
    (0..n)
        .map(|i| {
            let text: Vec<String> =
                (0..len).map(|j| format!("w{:03}", (i * 7 + j * 13) % vocab)).collect();
            experience(&format!("b-{i:05}"), &text.join(" "), i as u64)
        })
        .collect()
}

/// `families * copies` experiences where each family repeats one text
/// verbatim: the worst-case input for the condensation pass.
pub fn redundant_corpus(families: usize, copies: usize) -> Vec<Experience> {
    let mut out = Vec::with_capacity(families * copies);
    for f in 0..families {
        let text: Vec<String> = (0..6).map(|j| format!("fam{f:02}tok{j}")).collect();
        let text = text.join(" ");
        for c in 0..copies {
            out.push(experience(&format!("r-{f:02}-{c:03}"), &text, (f * copies + c) as u64));
        }
    }
    out
}

fn experience(id: &str, text: &str, created_at: u64) -> Experience {
    Experience {
        id: id.into(),
        topic: TopicLabel::new("bench").unwrap(),
        text: text.to_string(),
        source_episode_ids: vec![format!("ep-{id}").as_str().into()],
        condensed_from: vec![],
        generation: 0,
        created_at,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = corpus(50, 40, 8);
        let b = corpus(50, 40, 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|x| x.text.split(' ').count() == 8));
    }

    #[test]
    fn redundant_corpus_repeats_family_text() {
        let xs = redundant_corpus(3, 4);
        assert_eq!(xs.len(), 12);
        assert_eq!(xs[0].text, xs[3].text);
        assert_ne!(xs[0].text, xs[4].text);
    }
}
