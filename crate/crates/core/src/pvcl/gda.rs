//! Closed-form Gaussian discriminant estimation with a shared, shrunk covariance.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiaaError, Result};
use crate::pvcl::bank::{BankStage, MemoryBank, PatchScores};
use crate::store::{FeatureView, TextPrototypeSet};
use crate::zeroshot::{softmax_in_place, ProbMatrix};

/// Trace below which the pooled covariance is treated as degenerate.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Preliminary,
    Final,
}

/// Denominator used to turn the pooled scatter into a covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceDenominator {
    /// Divide by `|B|`, then multiply by `|B| - 1` inside the shrinkage.
    #[default]
    AsPrinted,
    /// Divide by `|B| - 1`, so the shrinkage sees the raw scatter.
    SelfConsistent,
}

/// Pooled within-class covariance of a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma_hat: DMatrix<f64>,
    pub n: usize,
    pub trace: f64,
}

/// Linear discriminant `w_c^T x + b_c` with the statistics that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GdaClassifier {
    dim: usize,
    num_classes: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    means: Vec<f64>,
    precision: Vec<f64>,
    provenance: Provenance,
    fallback_classes: Vec<usize>,
}

impl GdaClassifier {
    /// Assembles a classifier from stored parameters, checking shapes and finiteness.
    pub fn from_parts(
        dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        means: Vec<f64>,
        precision: Vec<f64>,
        provenance: Provenance,
        fallback_classes: Vec<usize>,
    ) -> Result<Self> {
        let num_classes = biases.len();
        if dim == 0 || num_classes == 0 {
            return Err(PiaaError::InvalidData(
                "classifier with zero classes or dimension".into(),
            ));
        }
        for (len, expected) in [
            (weights.len(), num_classes * dim),
            (means.len(), num_classes * dim),
            (precision.len(), dim * dim),
        ] {
            if len != expected {
                return Err(PiaaError::DimensionMismatch {
                    expected,
                    actual: len,
                });
            }
        }
        if weights
            .iter()
            .chain(&biases)
            .chain(&means)
            .chain(&precision)
            .any(|v| !v.is_finite())
        {
            return Err(PiaaError::NonFinite("classifier parameters"));
        }
        if fallback_classes.iter().any(|&c| c >= num_classes) {
            return Err(PiaaError::InvalidData("fallback class out of range".into()));
        }
        Ok(Self {
            dim,
            num_classes,
            weights,
            biases,
            means,
            precision,
            provenance,
            fallback_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// Row-major `d x d` precision matrix.
    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn fallback_classes(&self) -> &[usize] {
        &self.fallback_classes
    }

    pub fn is_fallback(&self, class: usize) -> bool {
        self.fallback_classes.contains(&class)
    }

    /// Discriminant scores for one feature vector.
    pub fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = self.weight(c);
            *o = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.biases[c];
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        self.logits_into(x, &mut out);
        out
    }
}

/// Knobs shared by both estimation stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Apply the trace-regularized shrinkage to the preliminary covariance.
    pub stage1_shrinkage: bool,
    pub denominator: CovarianceDenominator,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            stage1_shrinkage: true,
            denominator: CovarianceDenominator::AsPrinted,
        }
    }
}

/// Pooled covariance `1/|B| sum_c sum_{i in B_c} (x_i - mu_c)(x_i - mu_c)^T`.
pub fn pooled_covariance(
    view: &FeatureView<'_>,
    members: &[Vec<usize>],
    means: &[f64],
    denominator: CovarianceDenominator,
) -> CovarianceEstimate {
    let d = view.dim();
    let n: usize = members.iter().map(Vec::len).sum();
    let mut centered = DMatrix::<f64>::zeros(n, d);
    let mut row = 0;
    let mut x = vec![0.0; d];
    for (c, list) in members.iter().enumerate() {
        let mu = &means[c * d..(c + 1) * d];
        for &i in list {
            view.patch_into(i, &mut x);
            for j in 0..d {
                centered[(row, j)] = x[j] - mu[j];
            }
            row += 1;
        }
    }
    let scatter = centered.tr_mul(&centered);
    let divisor = match denominator {
        CovarianceDenominator::AsPrinted => n as f64,
        CovarianceDenominator::SelfConsistent => n.saturating_sub(1) as f64,
    };
    let mut sigma_hat = if divisor > 0.0 {
        scatter / divisor
    } else {
        DMatrix::zeros(d, d)
    };
    symmetrize(&mut sigma_hat);
    let trace = sigma_hat.trace();
    CovarianceEstimate {
        sigma_hat,
        n,
        trace,
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// The matrix whose scaled inverse is the precision:
/// `(|B| - 1) Sigma_hat + Tr(Sigma_hat) I`, or `eps I` when the trace is below
/// [`COVARIANCE_FLOOR`], so that the precision becomes `(d / eps) I`.
pub fn shrinkage_target(cov: &CovarianceEstimate) -> DMatrix<f64> {
    let d = cov.sigma_hat.nrows();
    if !(cov.trace >= COVARIANCE_FLOOR) {
        return DMatrix::identity(d, d) * COVARIANCE_FLOOR;
    }
    let factor = cov.n.saturating_sub(1) as f64;
    let mut a = &cov.sigma_hat * factor;
    for i in 0..d {
        a[(i, i)] += cov.trace;
    }
    a
}

/// How the precision is derived from a covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PrecisionRule {
    /// `d [(|B|-1) Sigma_hat + Tr I]^{-1}`.
    Shrunk,
    /// `Sigma_hat^{-1}` (floored when degenerate).
    Raw,
}

/// Factored precision: `precision = scale * system^{-1}`.
struct PrecisionFactor {
    cholesky: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: f64,
}

impl PrecisionFactor {
    fn new(cov: &CovarianceEstimate, rule: PrecisionRule) -> Result<Self> {
        let d = cov.sigma_hat.nrows();
        let (system, scale) = match rule {
            PrecisionRule::Shrunk => (shrinkage_target(cov), d as f64),
            PrecisionRule::Raw if !(cov.trace >= COVARIANCE_FLOOR) => {
                (DMatrix::identity(d, d) * COVARIANCE_FLOOR, 1.0)
            }
            PrecisionRule::Raw => (cov.sigma_hat.clone(), 1.0),
        };
        let cholesky = system.cholesky().ok_or(PiaaError::NotPositiveDefinite)?;
        Ok(Self { cholesky, scale })
    }

    /// `precision * rhs` for each column of `rhs`.
    fn apply(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky.solve(rhs) * self.scale
    }

    fn explicit(&self) -> DMatrix<f64> {
        let mut p = self.cholesky.inverse() * self.scale;
        symmetrize(&mut p);
        p
    }
}

/// Confidence-weighted class means plus the features needed for fallback scaling.
struct ClassMeans {
    means: Vec<f64>,
    mean_feature_norm: f64,
}

fn class_means(
    view: &FeatureView<'_>,
    members: &[Vec<usize>],
    weight_of: &(dyn Fn(usize, usize) -> f64 + Sync),
) -> Result<ClassMeans> {
    let d = view.dim();
    let c = members.len();
    let per_class: Vec<(Vec<f64>, f64)> = members
        .par_iter()
        .enumerate()
        .map(|(class, list)| {
            let mut acc = vec![0.0; d];
            let mut total_w = 0.0;
            let mut norm_sum = 0.0;
            let mut x = vec![0.0; d];
            for &i in list {
                view.patch_into(i, &mut x);
                let w = weight_of(class, i);
                total_w += w;
                norm_sum += x.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (a, v) in acc.iter_mut().zip(&x) {
                    *a += w * v;
                }
            }
            if total_w > 0.0 {
                for a in acc.iter_mut() {
                    *a /= total_w;
                }
            }
            (acc, norm_sum)
        })
        .collect();

    let mut means = vec![0.0; c * d];
    let mut norm_sum = 0.0;
    for (class, (mu, ns)) in per_class.into_iter().enumerate() {
        means[class * d..(class + 1) * d].copy_from_slice(&mu);
        norm_sum += ns;
    }
    if means.iter().any(|v| !v.is_finite()) {
        return Err(PiaaError::NonFinite("class means"));
    }
    let n: usize = members.iter().map(Vec::len).sum();
    Ok(ClassMeans {
        means,
        mean_feature_norm: if n > 0 { norm_sum / n as f64 } else { 1.0 },
    })
}

/// Shared estimation path for both stages.
fn estimate(
    view: &FeatureView<'_>,
    members: &[Vec<usize>],
    weight_of: &(dyn Fn(usize, usize) -> f64 + Sync),
    prototypes: &TextPrototypeSet,
    denominator: CovarianceDenominator,
    rule: PrecisionRule,
    provenance: Provenance,
) -> Result<(GdaClassifier, CovarianceEstimate)> {
    let d = view.dim();
    let c = members.len();
    if prototypes.dim() != d {
        return Err(PiaaError::DimensionMismatch {
            expected: d,
            actual: prototypes.dim(),
        });
    }
    if prototypes.num_classes() != c {
        return Err(PiaaError::DimensionMismatch {
            expected: c,
            actual: prototypes.num_classes(),
        });
    }
    let ClassMeans {
        mut means,
        mean_feature_norm,
    } = class_means(view, members, weight_of)?;
    let cov = pooled_covariance(view, members, &means, denominator);
    if !cov.trace.is_finite() {
        return Err(PiaaError::NonFinite("pooled covariance"));
    }

    // Classes without members borrow their text prototype, rescaled to the
    // typical norm of the bank features.
    let mut fallback = Vec::new();
    for (class, list) in members.iter().enumerate() {
        if list.is_empty() {
            fallback.push(class);
            for (m, &p) in means[class * d..(class + 1) * d]
                .iter_mut()
                .zip(prototypes.prototype(class))
            {
                *m = f64::from(p) * mean_feature_norm;
            }
        }
    }

    let factor = PrecisionFactor::new(&cov, rule)?;
    let mean_cols = DMatrix::from_row_slice(c, d, &means).transpose();
    let w_cols = factor.apply(&mean_cols);
    let mut weights = vec![0.0; c * d];
    let mut biases = vec![0.0; c];
    for class in 0..c {
        let w = w_cols.column(class);
        let mu = DVector::from_column_slice(&means[class * d..(class + 1) * d]);
        biases[class] = -0.5 * mu.dot(&w);
        weights[class * d..(class + 1) * d].copy_from_slice(w.as_slice());
    }
    let precision = factor.explicit();
    let precision: Vec<f64> = precision.transpose().as_slice().to_vec();
    let classifier =
        GdaClassifier::from_parts(d, weights, biases, means, precision, provenance, fallback)?;
    Ok((classifier, cov))
}

/// Preliminary classifier from the bootstrap bank with unweighted means.
pub fn fit_preliminary(
    view: &FeatureView<'_>,
    bank: &MemoryBank,
    prototypes: &TextPrototypeSet,
    options: &EstimatorOptions,
) -> Result<GdaClassifier> {
    if bank.stage() != BankStage::Bootstrap {
        return Err(PiaaError::InvalidParameter(
            "fit_preliminary expects a bootstrap bank".into(),
        ));
    }
    if bank.total() == 0 {
        return Err(PiaaError::NoConfidentPatches);
    }
    let rule = if options.stage1_shrinkage {
        PrecisionRule::Shrunk
    } else {
        PrecisionRule::Raw
    };
    estimate(
        view,
        bank.members(),
        &|_, _| 1.0,
        prototypes,
        options.denominator,
        rule,
        Provenance::Preliminary,
    )
    .map(|(cls, _)| cls)
}

/// Final classifier from the purified bank: confidence-weighted means,
/// pooled covariance and trace-regularized shrinkage precision.
pub fn fit_final(
    view: &FeatureView<'_>,
    bank: &MemoryBank,
    q: &PatchScores,
    prototypes: &TextPrototypeSet,
    options: &EstimatorOptions,
) -> Result<GdaClassifier> {
    fit_final_with_covariance(view, bank, q, prototypes, options).map(|(cls, _)| cls)
}

/// As [`fit_final`], also returning the pooled covariance estimate.
pub fn fit_final_with_covariance(
    view: &FeatureView<'_>,
    bank: &MemoryBank,
    q: &PatchScores,
    prototypes: &TextPrototypeSet,
    options: &EstimatorOptions,
) -> Result<(GdaClassifier, CovarianceEstimate)> {
    if bank.stage() != BankStage::Purified {
        return Err(PiaaError::InvalidParameter(
            "fit_final expects a purified bank".into(),
        ));
    }
    if bank.total() < 2 {
        return Err(PiaaError::InsufficientSamples(bank.total()));
    }
    for (class, list) in bank.members().iter().enumerate() {
        for &i in list {
            let w = q.score(i, class).ok_or_else(|| {
                PiaaError::InvalidParameter(format!("no confidence score for patch {i}"))
            })?;
            if !w.is_finite() || w < 0.0 {
                return Err(PiaaError::NonFinite("confidence weights"));
            }
        }
    }
    estimate(
        view,
        bank.members(),
        &|class, i| q.score(i, class).unwrap_or(0.0),
        prototypes,
        options.denominator,
        PrecisionRule::Shrunk,
        Provenance::Final,
    )
}

/// Softmax of the discriminant scores for the listed patches.
pub fn vision_scores(
    classifier: &GdaClassifier,
    view: &FeatureView<'_>,
    indices: &[usize],
) -> Result<ProbMatrix> {
    if classifier.dim() != view.dim() {
        return Err(PiaaError::DimensionMismatch {
            expected: classifier.dim(),
            actual: view.dim(),
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= view.num_patches()) {
        return Err(PiaaError::InvalidParameter(format!(
            "patch index {bad} out of range"
        )));
    }
    let c = classifier.num_classes();
    let mut values = vec![0.0; indices.len() * c];
    values
        .par_chunks_mut(c)
        .zip(indices.par_iter())
        .for_each_init(
            || vec![0.0; view.dim()],
            |x, (row, &i)| {
                view.patch_into(i, x);
                classifier.logits_into(x, row);
                softmax_in_place(row);
            },
        );
    Ok(ProbMatrix::from_softmax_rows(c, values))
}
