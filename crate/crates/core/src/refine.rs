//! The condensation pipeline: pairwise BM25 similarity matrix, greedy
//! threshold grouping, group condensation through a pluggable `Condenser`,
//! and database replacement.
//!
//! The pass is all-or-nothing: any condenser failure returns an error and the
//! caller's database stays untouched. With the mock condenser the whole pass
//! is a pure function of (experiences in order, tau, params), which the
//! harness and the determinism tests rely on.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Experience, ExperienceId, TimestampMs};
use crate::gateway::{Condenser, GatewayError};
use crate::index::{bm25, build_stats, tokenize, Bm25Params, IndexError};

/// Symmetric pairwise score matrix. `order` fixes row/column indices; the
/// diagonal is computed but grouping never consults it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub order: Vec<ExperienceId>,
    pub scores: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.order.len()
    }
}

/// One condensation group: the greedy anchor first, then every absorbed
/// member in matrix order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperienceGroup {
    pub anchor: ExperienceId,
    pub members: Vec<ExperienceId>,
}

/// Outcome of one refinement pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub tau: f64,
    pub before_count: usize,
    pub after_count: usize,
    pub groups: Vec<CondensedGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondensedGroup {
    pub condensed_id: ExperienceId,
    pub member_ids: Vec<ExperienceId>,
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("group members must share one topic: {found} vs {expected}")]
    TopicMismatch { expected: String, found: String },
    #[error("group of {0} members cannot be condensed (minimum 2)")]
    GroupTooSmall(usize),
    #[error("member list does not match the group's member ids")]
    GroupMismatch,
    #[error("condenser failed: {0}")]
    Condenser(#[from] GatewayError),
}

/// Builds the symmetric similarity matrix over exactly these experiences:
/// S[i][j] = max of the two directed BM25 scores, each treating one text as
/// the query and the other as the document, with corpus statistics from this
/// collection alone.
pub fn similarity_matrix(
    experiences: &[Experience],
    params: &Bm25Params,
) -> Result<SimilarityMatrix, RefineError> {
    let stats = build_stats(experiences.iter().map(|x| (x.id.as_str(), x.text.as_str())))?;
    let tokens: Vec<Vec<String>> = experiences.iter().map(|x| tokenize(&x.text)).collect();
    let order: Vec<ExperienceId> = experiences.iter().map(|x| x.id.clone()).collect();

    let n = experiences.len();
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        scores[i][i] = bm25(&tokens[i], order[i].as_str(), &stats, params)?;
        for j in (i + 1)..n {
            let ij = bm25(&tokens[i], order[j].as_str(), &stats, params)?;
            let ji = bm25(&tokens[j], order[i].as_str(), &stats, params)?;
            let s = ij.max(ji);
            scores[i][j] = s;
            scores[j][i] = s;
        }
    }
    Ok(SimilarityMatrix { order, scores })
}

/// Greedy single pass in matrix order: each still-unassigned index i anchors
/// the group of unassigned j with S[i][j] >= tau. Groups of one become
/// singletons. No transitive closure: an item similar only to an already
/// absorbed member stays out.
pub fn group(s: &SimilarityMatrix, tau: f64) -> (Vec<ExperienceGroup>, Vec<ExperienceId>) {
    let n = s.n();
    let mut alive = vec![true; n];
    let mut groups = Vec::new();
    let mut singletons = Vec::new();

    for i in 0..n {
        if !alive[i] {
            continue;
        }
        alive[i] = false;
        let mut member_idx = vec![i];
        for (j, slot) in alive.iter_mut().enumerate().skip(i + 1) {
            if *slot && s.scores[i][j] >= tau {
                *slot = false;
                member_idx.push(j);
            }
        }
        if member_idx.len() >= 2 {
            groups.push(ExperienceGroup {
                anchor: s.order[i].clone(),
                members: member_idx.iter().map(|&k| s.order[k].clone()).collect(),
            });
        } else {
            singletons.push(s.order[i].clone());
        }
    }
    (groups, singletons)
}

/// Condensed-experience id: a digest of the member ids. Deriving it from the
/// members rather than a shared counter keeps refinement a pure function of
/// its inputs; a member set is only ever condensed once in a store's
/// lifetime, so these collide only when they should.
fn condensed_id(member_ids: &[ExperienceId]) -> ExperienceId {
    let mut hasher = Sha256::new();
    for id in member_ids {
        hasher.update(id.as_str().as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    ExperienceId(format!("cond-{hex}"))
}

/// Condenses one group into a single experience. `members` must be the
/// group's experiences in group order. The result inherits the topic, takes
/// generation 1 + max member generation, unions episode lineage in first-seen
/// order, and dates itself to the newest member so the operation stays
/// deterministic.
pub fn condense_group(
    grp: &ExperienceGroup,
    members: &[Experience],
    condenser: &dyn Condenser,
) -> Result<Experience, RefineError> {
    if members.len() < 2 {
        return Err(RefineError::GroupTooSmall(members.len()));
    }
    if members.len() != grp.members.len()
        || members.iter().zip(&grp.members).any(|(m, id)| &m.id != id)
    {
        return Err(RefineError::GroupMismatch);
    }
    let topic = members[0].topic.clone();
    for m in &members[1..] {
        if m.topic != topic {
            return Err(RefineError::TopicMismatch {
                expected: topic.to_string(),
                found: m.topic.to_string(),
            });
        }
    }

    let texts: Vec<String> = members.iter().map(|m| m.text.clone()).collect();
    let text = condenser.condense(&texts)?;

    let mut seen = std::collections::HashSet::new();
    let mut source_episode_ids = Vec::new();
    for m in members {
        for ep in &m.source_episode_ids {
            if seen.insert(ep.clone()) {
                source_episode_ids.push(ep.clone());
            }
        }
    }

    let member_ids: Vec<ExperienceId> = members.iter().map(|m| m.id.clone()).collect();
    let generation = 1 + members.iter().map(|m| m.generation).max().unwrap_or(0);
    let created_at: TimestampMs = members.iter().map(|m| m.created_at).max().unwrap_or(0);

    Ok(Experience {
        id: condensed_id(&member_ids),
        topic,
        text,
        source_episode_ids,
        condensed_from: member_ids,
        generation,
        created_at,
    })
}

/// One full refinement pass. Output order: surviving singletons in input
/// order, then condensed experiences in group formation order. Condensed
/// items do not re-enter grouping within the same call.
pub fn refine(
    experiences: &[Experience],
    tau: f64,
    params: &Bm25Params,
    condenser: &dyn Condenser,
) -> Result<(Vec<Experience>, RefineReport), RefineError> {
    let matrix = similarity_matrix(experiences, params)?;
    let (groups, singleton_ids) = group(&matrix, tau);

    let by_id: std::collections::HashMap<&str, &Experience> =
        experiences.iter().map(|x| (x.id.as_str(), x)).collect();

    let mut condensed = Vec::with_capacity(groups.len());
    let mut report_groups = Vec::with_capacity(groups.len());
    for grp in &groups {
        let members: Vec<Experience> =
            grp.members.iter().map(|id| by_id[id.as_str()].clone()).collect();
        let c = condense_group(grp, &members, condenser)?;
        report_groups
            .push(CondensedGroup { condensed_id: c.id.clone(), member_ids: grp.members.clone() });
        condensed.push(c);
    }

    let singleton_set: std::collections::HashSet<&str> =
        singleton_ids.iter().map(|id| id.as_str()).collect();
    let mut output: Vec<Experience> = experiences
        .iter()
        .filter(|x| singleton_set.contains(x.id.as_str()))
        .cloned()
        .collect();
    output.extend(condensed);

    let report = RefineReport {
        tau,
        before_count: experiences.len(),
        after_count: output.len(),
        groups: report_groups,
    };
    Ok((output, report))
}
