//! Patch-based visual classifier learning.
//!
//! Three stages turn unlabeled patch embeddings into a linear classifier that
//! lives in the visual space:
//!
//! 1. text-alignment probabilities pick, per class, the `K` lowest-entropy
//!    patches whose argmax is that class; a temporary discriminant is fitted;
//! 2. the temporary discriminant re-scores each bank and only members at or
//!    above `mean + std` of their class survive;
//! 3. confidence-weighted means and a trace-regularized shared precision give
//!    the final weights `w_c = P mu_c`, `b_c = -1/2 mu_c^T P mu_c`.

pub mod bank;
pub mod gda;
pub mod io;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bank::{bootstrap_banks, purify_banks, BankStage, MemoryBank, PatchScores};
pub use gda::{
    fit_final, fit_final_with_covariance, fit_preliminary, pooled_covariance, shrinkage_target,
    vision_scores, CovarianceDenominator, CovarianceEstimate, EstimatorOptions, GdaClassifier,
    Provenance, COVARIANCE_FLOOR,
};

use crate::error::Result;
use crate::store::{FeatureView, TextPrototypeSet};
use crate::zeroshot::{predictive_entropy, text_align_probs};

pub const DEFAULT_BANK_CAPACITY: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub k: usize,
    pub logit_scale: f64,
    pub estimator: EstimatorOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_BANK_CAPACITY,
            logit_scale: crate::DEFAULT_LOGIT_SCALE,
            estimator: EstimatorOptions::default(),
        }
    }
}

/// Deterministic summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub bootstrap_sizes: Vec<usize>,
    pub purified_sizes: Vec<usize>,
    pub preliminary_fallback: Vec<usize>,
    pub fallback_classes: Vec<usize>,
    pub num_patches: usize,
}

/// Wall-clock per stage, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitTimings {
    pub text_scoring_ms: f64,
    pub bootstrap_ms: f64,
    pub preliminary_ms: f64,
    pub purification_ms: f64,
    pub final_ms: f64,
    pub total_ms: f64,
}

/// Everything produced by one end-to-end run.
#[derive(Debug, Clone)]
pub struct PvclOutput {
    pub classifier: GdaClassifier,
    pub preliminary: GdaClassifier,
    pub bootstrap: MemoryBank,
    pub purified: MemoryBank,
    pub report: FitReport,
    pub timings: FitTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs all three stages on the patches of `view`.
pub fn run_pvcl(
    view: &FeatureView<'_>,
    prototypes: &TextPrototypeSet,
    options: &FitOptions,
) -> Result<PvclOutput> {
    let start = Instant::now();
    let mut timings = FitTimings::default();

    let t = Instant::now();
    let probs = text_align_probs(view, prototypes, options.logit_scale)?;
    let entropy = predictive_entropy(&probs);
    timings.text_scoring_ms = ms_since(t);

    let t = Instant::now();
    let bootstrap = bootstrap_banks(&probs, &entropy, options.k)?;
    drop(probs);
    timings.bootstrap_ms = ms_since(t);

    let t = Instant::now();
    let preliminary = fit_preliminary(view, &bootstrap, prototypes, &options.estimator)?;
    timings.preliminary_ms = ms_since(t);

    let t = Instant::now();
    let indices = bootstrap.all_indices();
    let q = PatchScores::new(
        indices.clone(),
        vision_scores(&preliminary, view, &indices)?,
    )?;
    let purified = purify_banks(&bootstrap, &q)?;
    timings.purification_ms = ms_since(t);

    let t = Instant::now();
    let classifier = fit_final(view, &purified, &q, prototypes, &options.estimator)?;
    timings.final_ms = ms_since(t);
    timings.total_ms = ms_since(start);

    let report = FitReport {
        bootstrap_sizes: bootstrap.sizes(),
        purified_sizes: purified.sizes(),
        preliminary_fallback: preliminary.fallback_classes().to_vec(),
        fallback_classes: classifier.fallback_classes().to_vec(),
        num_patches: view.num_patches(),
    };
    Ok(PvclOutput {
        classifier,
        preliminary,
        bootstrap,
        purified,
        report,
        timings,
    })
}
