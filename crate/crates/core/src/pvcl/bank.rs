//! Per-class memory banks of confident patches.

use serde::{Deserialize, Serialize};

use crate::error::{PiaaError, Result};
use crate::zeroshot::{EntropyVector, ProbMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankStage {
    Bootstrap,
    Purified,
}

/// Global patch indices selected for each class, kept in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryBank {
    capacity: usize,
    stage: BankStage,
    members: Vec<Vec<usize>>,
}

impl MemoryBank {
    /// Builds a bank from explicit member lists (sorted on the way in).
    pub fn from_members(capacity: usize, stage: BankStage, mut members: Vec<Vec<usize>>) -> Self {
        for list in members.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self {
            capacity,
            stage,
            members,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stage(&self) -> BankStage {
        self.stage
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn class(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Total member count `|B|` across classes.
    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Sorted union of all members.
    pub fn all_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.members.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Class probabilities for a sparse set of patches, addressable by global index.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScores {
    indices: Vec<usize>,
    probs: ProbMatrix,
}

impl PatchScores {
    /// `indices` must be strictly ascending with one row of `probs` per index.
    pub fn new(indices: Vec<usize>, probs: ProbMatrix) -> Result<Self> {
        if indices.len() != probs.rows() {
            return Err(PiaaError::DimensionMismatch {
                expected: indices.len(),
                actual: probs.rows(),
            });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PiaaError::InvalidData(
                "patch indices must be strictly ascending".into(),
            ));
        }
        Ok(Self { indices, probs })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn probs(&self) -> &ProbMatrix {
        &self.probs
    }

    pub fn row_of(&self, index: usize) -> Option<&[f64]> {
        self.indices
            .binary_search(&index)
            .ok()
            .map(|r| self.probs.row(r))
    }

    pub fn score(&self, index: usize, class: usize) -> Option<f64> {
        self.row_of(index).map(|row| row[class])
    }
}

/// For each class, the `capacity` lowest-entropy patches whose argmax is that
/// class. Entropy ties go to the lower patch index.
pub fn bootstrap_banks(
    probs: &ProbMatrix,
    entropy: &EntropyVector,
    capacity: usize,
) -> Result<MemoryBank> {
    if probs.rows() != entropy.len() {
        return Err(PiaaError::DimensionMismatch {
            expected: probs.rows(),
            actual: entropy.len(),
        });
    }
    if capacity == 0 {
        return Err(PiaaError::InvalidParameter(
            "bank capacity K must be positive".into(),
        ));
    }
    let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); probs.cols()];
    for i in 0..probs.rows() {
        candidates[probs.argmax(i)].push(i);
    }
    let h = entropy.values();
    let members = candidates
        .into_iter()
        .map(|mut list| {
            list.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
            list.truncate(capacity);
            list
        })
        .collect();
    Ok(MemoryBank::from_members(
        capacity,
        BankStage::Bootstrap,
        members,
    ))
}

/// Slack on the purification threshold so that rounding in the mean and
/// deviation does not evict members sitting exactly on it.
const THRESHOLD_SLACK: f64 = 1e-12;

/// Mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Keeps members with `q_ic >= mean_c + std_c` over the class's own bank.
/// An emptied class keeps its single highest-scoring member.
pub fn purify_banks(bank: &MemoryBank, q: &PatchScores) -> Result<MemoryBank> {
    if bank.stage() != BankStage::Bootstrap {
        return Err(PiaaError::InvalidParameter(
            "purify_banks expects a bootstrap bank".into(),
        ));
    }
    let mut purified = Vec::with_capacity(bank.num_classes());
    for (class, list) in bank.members().iter().enumerate() {
        if list.is_empty() {
            purified.push(Vec::new());
            continue;
        }
        let scores = list
            .iter()
            .map(|&i| {
                q.score(i, class).ok_or_else(|| {
                    PiaaError::InvalidParameter(format!("no vision score for bank member {i}"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_and_std(&scores);
        let threshold = mean + std;
        let slack = THRESHOLD_SLACK * threshold.abs().max(1.0);
        let mut kept: Vec<usize> = list
            .iter()
            .zip(&scores)
            .filter(|(_, &s)| s >= threshold - slack)
            .map(|(&i, _)| i)
            .collect();
        if kept.is_empty() {
            let mut best = 0;
            for (k, &s) in scores.iter().enumerate().skip(1) {
                if s > scores[best] {
                    best = k;
                }
            }
            kept.push(list[best]);
        }
        purified.push(kept);
    }
    Ok(MemoryBank::from_members(
        bank.capacity(),
        BankStage::Purified,
        purified,
    ))
}
