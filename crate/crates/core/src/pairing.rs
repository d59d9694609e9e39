//! Construction of labeled (bug report, patch description) pairs and the
//! bug-grouped cross-validation split.
//!
//! Positives are correct patches with their own bug report. Negatives come
//! in two kinds: developer patch descriptions re-attached to a different,
//! randomly chosen bug report, and patches labeled incorrect paired with the
//! bug they were meant to fix.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label, PatchRecord};
use crate::diffsum::{self, DiffError};

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("bug `{0}` has an empty report")]
    EmptyBugReport(String),
    #[error("patch `{patch_id}`: cannot summarize diff: {source}")]
    Describe {
        patch_id: String,
        #[source]
        source: DiffError,
    },
    #[error("random mismatches need at least 2 bugs with developer patches, found {0}")]
    TooFewBugs(usize),
    #[error("fold count {k} invalid for {bugs} bugs")]
    InvalidK { k: usize, bugs: usize },
    #[error("test group {group} out of range for k = {k}")]
    InvalidGroup { group: usize, k: usize },
    #[error("bug `{0}` has no fold assignment")]
    Unassigned(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    DevPositive,
    AprPositive,
    RandomMismatch,
    AprNegative,
}

impl ExampleKind {
    pub fn label(self) -> bool {
        matches!(self, ExampleKind::DevPositive | ExampleKind::AprPositive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    /// The bug whose report is `bug_text`. For mismatches this is the
    /// unrelated bug, not the one the patch was written for.
    pub bug_id: String,
    pub patch_id: String,
    pub bug_text: String,
    pub description_text: String,
    pub label: bool,
    pub kind: ExampleKind,
}

impl QaExample {
    fn new(bug_id: &str, patch_id: String, bug_text: String, description_text: String, kind: ExampleKind) -> Self {
        Self {
            bug_id: bug_id.to_string(),
            patch_id,
            bug_text,
            description_text,
            label: kind.label(),
            kind,
        }
    }
}

/// Ingested description if present, otherwise the rule-based diff summary.
pub fn patch_description(dataset: &Dataset, patch: &PatchRecord) -> Result<String, PairingError> {
    if let Some(d) = dataset.description(&patch.patch_id) {
        return Ok(d.text.clone());
    }
    diffsum::describe_diff(&patch.diff).map_err(|source| PairingError::Describe {
        patch_id: patch.patch_id.clone(),
        source,
    })
}

fn bug_text(dataset: &Dataset, bug_id: &str) -> String {
    dataset.bug(bug_id).map(|b| b.text()).unwrap_or_default()
}

pub fn build_positive_examples(dataset: &Dataset) -> Result<Vec<QaExample>, PairingError> {
    dataset
        .patches()
        .filter(|p| p.label == Label::Correct)
        .map(|p| {
            let text = bug_text(dataset, &p.bug_id);
            if text.trim().is_empty() {
                return Err(PairingError::EmptyBugReport(p.bug_id.clone()));
            }
            let kind = if p.origin.is_developer() {
                ExampleKind::DevPositive
            } else {
                ExampleKind::AprPositive
            };
            Ok(QaExample::new(
                &p.bug_id,
                p.patch_id.clone(),
                text,
                patch_description(dataset, p)?,
                kind,
            ))
        })
        .collect()
}

/// Labeled developer patches, in patch-id order.
fn developer_patches(dataset: &Dataset) -> impl Iterator<Item = &PatchRecord> {
    dataset
        .patches()
        .filter(|p| p.origin.is_developer() && p.label != Label::Unlabeled)
}

/// Bugs eligible as the question side of a random mismatch.
pub fn mismatch_pool(dataset: &Dataset) -> Vec<String> {
    developer_patches(dataset)
        .map(|p| p.bug_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Draws a bug uniformly from `pool` excluding `exclude`, which must be in
/// the pool. `pool` needs at least two entries.
pub(crate) fn draw_other<'a, R: Rng>(pool: &'a [String], exclude: &str, rng: &mut R) -> &'a str {
    let skip = pool.iter().position(|b| b == exclude);
    let n = pool.len() - usize::from(skip.is_some());
    let mut i = rng.random_range(0..n);
    if let Some(s) = skip {
        if i >= s {
            i += 1;
        }
    }
    &pool[i]
}

/// One mismatch per developer patch: its description paired with the report
/// of a uniformly drawn other bug.
pub fn build_random_mismatches(dataset: &Dataset, seed: u64) -> Result<Vec<QaExample>, PairingError> {
    let pool = mismatch_pool(dataset);
    if pool.len() < 2 {
        return Err(PairingError::TooFewBugs(pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    developer_patches(dataset)
        .map(|p| {
            let other = draw_other(&pool, &p.bug_id, &mut rng);
            Ok(QaExample::new(
                other,
                format!("{}~{}", p.patch_id, other),
                bug_text(dataset, other),
                patch_description(dataset, p)?,
                ExampleKind::RandomMismatch,
            ))
        })
        .collect()
}

pub fn build_apr_negatives(dataset: &Dataset) -> Result<Vec<QaExample>, PairingError> {
    dataset
        .patches()
        .filter(|p| p.label == Label::Incorrect)
        .map(|p| {
            Ok(QaExample::new(
                &p.bug_id,
                p.patch_id.clone(),
                bug_text(dataset, &p.bug_id),
                patch_description(dataset, p)?,
                ExampleKind::AprNegative,
            ))
        })
        .collect()
}

/// Positives, then random mismatches, then incorrect patches.
pub fn build_examples(dataset: &Dataset, pair_seed: u64) -> Result<Vec<QaExample>, PairingError> {
    let mut out = build_positive_examples(dataset)?;
    out.extend(build_random_mismatches(dataset, pair_seed)?);
    out.extend(build_apr_negatives(dataset)?);
    Ok(out)
}

/// Bug ids that carry at least one example; the only bugs worth planning.
pub fn example_bug_ids(examples: &[QaExample]) -> BTreeSet<String> {
    examples.iter().map(|e| e.bug_id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn group_of(&self, bug_id: &str) -> Option<usize> {
        self.assignments.get(bug_id).copied()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for g in self.assignments.values() {
            sizes[*g] += 1;
        }
        sizes
    }

    pub fn bugs_in(&self, group: usize) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, g)| **g == group)
            .map(|(b, _)| b.as_str())
    }
}

/// Seeded shuffle of the (sorted) bug ids followed by round-robin assignment.
pub fn make_fold_plan<'a>(
    bug_ids: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
) -> Result<FoldPlan, PairingError> {
    let mut ids: Vec<&str> = bug_ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || k > ids.len() {
        return Err(PairingError::InvalidK { k, bugs: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, b)| (b.to_string(), i % k))
        .collect();
    Ok(FoldPlan { seed, k, assignments })
}

/// Splits by the group of each example's `bug_id`.
pub fn fold_split<'a>(
    examples: &'a [QaExample],
    plan: &FoldPlan,
    test_group: usize,
) -> Result<(Vec<&'a QaExample>, Vec<&'a QaExample>), PairingError> {
    if test_group >= plan.k {
        return Err(PairingError::InvalidGroup {
            group: test_group,
            k: plan.k,
        });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ex in examples {
        let g = plan
            .group_of(&ex.bug_id)
            .ok_or_else(|| PairingError::Unassigned(ex.bug_id.clone()))?;
        if g == test_group {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, test))
}
