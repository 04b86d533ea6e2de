//! Text-alignment scoring of patches and predictive entropy.

use rayon::prelude::*;

use crate::error::{PiaaError, Result};
use crate::store::{FeatureView, TextPrototypeSet};

/// Row-stochastic `rows x cols` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    /// Validating constructor: entries non-negative, rows summing to 1 within 1e-6.
    pub fn new(cols: usize, values: Vec<f64>) -> Result<Self> {
        if cols == 0 || !values.len().is_multiple_of(cols) {
            return Err(PiaaError::InvalidData(format!(
                "{} values do not form rows of {cols} columns",
                values.len()
            )));
        }
        for (i, row) in values.chunks_exact(cols).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(PiaaError::InvalidData(format!(
                    "row {i} has a negative or NaN entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(PiaaError::InvalidData(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self::from_softmax_rows(cols, values))
    }

    /// Wraps rows already produced by [`softmax_in_place`].
    pub(crate) fn from_softmax_rows(cols: usize, values: Vec<f64>) -> Self {
        Self {
            rows: values.len() / cols,
            cols,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols)
    }

    /// Index of the largest entry of row `i`; the first maximum wins.
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

/// Per-row Shannon entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyVector {
    values: Vec<f64>,
}

impl EntropyVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically guarded softmax: subtracts the row max before exponentiating.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn check_logit_scale(logit_scale: f64) -> Result<()> {
    if !logit_scale.is_finite() || logit_scale < 0.0 {
        return Err(PiaaError::InvalidParameter(format!(
            "logit_scale must be a finite non-negative number, got {logit_scale}"
        )));
    }
    Ok(())
}

/// Prototype rows widened to f64 together with their norms.
pub(crate) struct PrototypeTable {
    dim: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
}

impl PrototypeTable {
    pub(crate) fn new(prototypes: &TextPrototypeSet) -> Self {
        let rows: Vec<f64> = prototypes
            .prototypes()
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        let norms = rows
            .chunks_exact(prototypes.dim())
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self {
            dim: prototypes.dim(),
            rows,
            norms,
        }
    }

    /// `logit_scale * cos(x, w_c)` for every class, written into `out`.
    pub(crate) fn cosine_logits(&self, x: &[f64], logit_scale: f64, out: &mut [f64]) {
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for ((o, w), &w_norm) in out
            .iter_mut()
            .zip(self.rows.chunks_exact(self.dim))
            .zip(&self.norms)
        {
            let dot: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            *o = logit_scale * dot / (x_norm * w_norm);
        }
    }
}

/// Zero-shot class probabilities `softmax(logit_scale * cos(x_i, w_c))` for
/// every patch in the view.
pub fn text_align_probs(
    view: &FeatureView<'_>,
    prototypes: &TextPrototypeSet,
    logit_scale: f64,
) -> Result<ProbMatrix> {
    let indices: Vec<usize> = (0..view.num_patches()).collect();
    text_align_probs_for(view, &indices, prototypes, logit_scale)
}

/// As [`text_align_probs`], restricted to the listed global patch indices.
pub fn text_align_probs_for(
    view: &FeatureView<'_>,
    indices: &[usize],
    prototypes: &TextPrototypeSet,
    logit_scale: f64,
) -> Result<ProbMatrix> {
    if view.dim() != prototypes.dim() {
        return Err(PiaaError::DimensionMismatch {
            expected: prototypes.dim(),
            actual: view.dim(),
        });
    }
    check_logit_scale(logit_scale)?;
    let c = prototypes.num_classes();
    let table = PrototypeTable::new(prototypes);
    let mut values = vec![0.0; indices.len() * c];
    values
        .par_chunks_mut(c)
        .zip(indices.par_iter())
        .for_each_init(
            || vec![0.0; view.dim()],
            |x, (row, &idx)| {
                view.patch_into(idx, x);
                table.cosine_logits(x, logit_scale, row);
                softmax_in_place(row);
            },
        );
    Ok(ProbMatrix::from_softmax_rows(c, values))
}

/// `H_i = -sum_c p_ic ln p_ic` with `0 ln 0 = 0`, clamped into `[0, ln C]`.
pub fn predictive_entropy(probs: &ProbMatrix) -> EntropyVector {
    let max = (probs.cols() as f64).ln();
    let values = probs
        .iter_rows()
        .map(|row| {
            let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            h.clamp(0.0, max)
        })
        .collect();
    EntropyVector { values }
}
