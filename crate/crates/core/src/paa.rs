//! Prediction adaptive aggregation: patch probabilities are max-pooled per
//! class, recalibrated with a softmax and fused with the CLS prediction.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiaaError, Result};
use crate::pvcl::GdaClassifier;
use crate::store::{FeatureView, TextPrototypeSet};
use crate::zeroshot::{check_logit_scale, softmax_in_place, ProbMatrix, PrototypeTable};

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    Full,
    PatchOnly,
    ClsOnly,
}

impl std::str::FromStr for InferenceMode {
    type Err = PiaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "patch_only" => Ok(Self::PatchOnly),
            "cls_only" => Ok(Self::ClsOnly),
            other => Err(PiaaError::InvalidParameter(format!(
                "unknown mode {other:?} (expected full, patch_only or cls_only)"
            ))),
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::PatchOnly => "patch_only",
            Self::ClsOnly => "cls_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub alpha: f64,
    pub temperature: f64,
    pub logit_scale: f64,
    pub mode: InferenceMode,
    /// Apply the softmax over max-pooled patch probabilities.
    pub secondary_softmax: bool,
    /// Score the CLS embedding with the visual classifier instead of text.
    pub cls_via_gda: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
            logit_scale: crate::DEFAULT_LOGIT_SCALE,
            mode: InferenceMode::Full,
            secondary_softmax: true,
            cls_via_gda: false,
        }
    }
}

impl InferOptions {
    fn effective_alpha(&self) -> f64 {
        match self.mode {
            InferenceMode::Full => self.alpha,
            InferenceMode::PatchOnly => 1.0,
            InferenceMode::ClsOnly => 0.0,
        }
    }
}

/// Image-level scores. With the secondary softmax enabled every vector is a
/// distribution and `s_fused = alpha s_patch + (1 - alpha) s_cls`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub s_patch: Vec<f64>,
    pub s_cls: Vec<f64>,
    pub s_fused: Vec<f64>,
    pub alpha: f64,
}

/// Source of patch-level class probabilities.
#[derive(Debug, Clone, Copy)]
pub enum PatchScorer<'a> {
    /// Visual discriminant; probabilities are the softmax of raw logits.
    Gda(&'a GdaClassifier),
    /// Text prototypes scored by scaled cosine similarity.
    Text {
        prototypes: &'a TextPrototypeSet,
        logit_scale: f64,
    },
}

impl PatchScorer<'_> {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Gda(c) => c.num_classes(),
            Self::Text { prototypes, .. } => prototypes.num_classes(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::Gda(c) => c.dim(),
            Self::Text { prototypes, .. } => prototypes.dim(),
        }
    }

    /// Patch probabilities for every patch of `image`.
    pub fn image_probs(&self, view: &FeatureView<'_>, image: usize) -> Result<ProbMatrix> {
        if self.dim() != view.dim() {
            return Err(PiaaError::DimensionMismatch {
                expected: self.dim(),
                actual: view.dim(),
            });
        }
        let range = view.image_patches(image);
        if range.is_empty() {
            return Err(PiaaError::InvalidParameter(format!(
                "image {image} has no patches"
            )));
        }
        let c = self.num_classes();
        let mut values = vec![0.0; range.len() * c];
        let mut x = vec![0.0; view.dim()];
        let table = match self {
            Self::Text {
                prototypes,
                logit_scale,
            } => {
                check_logit_scale(*logit_scale)?;
                Some((PrototypeTable::new(prototypes), *logit_scale))
            }
            Self::Gda(_) => None,
        };
        for (row, i) in values.chunks_exact_mut(c).zip(range) {
            view.patch_into(i, &mut x);
            match (self, &table) {
                (Self::Gda(cls), _) => cls.logits_into(&x, row),
                (Self::Text { .. }, Some((t, scale))) => t.cosine_logits(&x, *scale, row),
                _ => unreachable!(),
            }
            softmax_in_place(row);
        }
        Ok(ProbMatrix::from_softmax_rows(c, values))
    }
}

/// Row-wise softmax of `w_c^T x_i + b_c` for the `m x d` row-major `patches`.
pub fn patch_probs(classifier: &GdaClassifier, patches: &[f64]) -> Result<ProbMatrix> {
    let d = classifier.dim();
    if patches.is_empty() || !patches.len().is_multiple_of(d) {
        return Err(PiaaError::InvalidParameter(format!(
            "expected m >= 1 rows of {d} values, got {} values",
            patches.len()
        )));
    }
    let c = classifier.num_classes();
    let mut values = vec![0.0; patches.len() / d * c];
    for (row, x) in values.chunks_exact_mut(c).zip(patches.chunks_exact(d)) {
        classifier.logits_into(x, row);
        softmax_in_place(row);
    }
    Ok(ProbMatrix::from_softmax_rows(c, values))
}

/// Per-class maximum over patches.
pub fn max_pool(p: &ProbMatrix) -> Vec<f64> {
    let mut v = vec![f64::NEG_INFINITY; p.cols()];
    for row in p.iter_rows() {
        for (m, &x) in v.iter_mut().zip(row) {
            *m = m.max(x);
        }
    }
    v
}

/// `softmax(max_i p_ic / temperature)`.
pub fn aggregate_patch_scores(p: &ProbMatrix, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let mut v = max_pool(p);
    for x in v.iter_mut() {
        *x /= temperature;
    }
    softmax_in_place(&mut v);
    Ok(v)
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(PiaaError::InvalidParameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Softmax of scaled cosine similarities between a CLS embedding and the prototypes.
pub fn cls_scores(
    cls: &[f64],
    prototypes: &TextPrototypeSet,
    logit_scale: f64,
) -> Result<Vec<f64>> {
    if cls.len() != prototypes.dim() {
        return Err(PiaaError::DimensionMismatch {
            expected: prototypes.dim(),
            actual: cls.len(),
        });
    }
    check_logit_scale(logit_scale)?;
    let mut out = vec![0.0; prototypes.num_classes()];
    PrototypeTable::new(prototypes).cosine_logits(cls, logit_scale, &mut out);
    softmax_in_place(&mut out);
    Ok(out)
}

fn is_distribution(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PiaaError::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn combine(s_patch: Vec<f64>, s_cls: Vec<f64>, alpha: f64) -> ImageScores {
    let s_fused = s_patch
        .iter()
        .zip(&s_cls)
        .map(|(&p, &c)| alpha * p + (1.0 - alpha) * c)
        .collect();
    ImageScores {
        s_patch,
        s_cls,
        s_fused,
        alpha,
    }
}

/// Convex combination `alpha s_patch + (1 - alpha) s_cls`.
pub fn fuse(s_patch: &[f64], s_cls: &[f64], alpha: f64) -> Result<ImageScores> {
    check_alpha(alpha)?;
    if s_patch.len() != s_cls.len() {
        return Err(PiaaError::DimensionMismatch {
            expected: s_patch.len(),
            actual: s_cls.len(),
        });
    }
    if !is_distribution(s_patch) || !is_distribution(s_cls) {
        return Err(PiaaError::InvalidData(
            "fusion inputs must be probability vectors".into(),
        ));
    }
    Ok(combine(s_patch.to_vec(), s_cls.to_vec(), alpha))
}

fn cls_prediction(
    scorer: &PatchScorer<'_>,
    view: &FeatureView<'_>,
    image: usize,
    prototypes: &TextPrototypeSet,
    options: &InferOptions,
) -> Result<Vec<f64>> {
    let cls = view.cls(image);
    match (scorer, options.cls_via_gda) {
        (PatchScorer::Gda(classifier), true) => {
            let mut logits = classifier.logits(&cls);
            softmax_in_place(&mut logits);
            Ok(logits)
        }
        _ => cls_scores(&cls, prototypes, options.logit_scale),
    }
}

fn infer_counted(
    scorer: &PatchScorer<'_>,
    view: &FeatureView<'_>,
    image: usize,
    prototypes: &TextPrototypeSet,
    options: &InferOptions,
    counter: &AtomicU64,
) -> Result<(ImageScores, Option<ProbMatrix>)> {
    if image >= view.num_images() {
        return Err(PiaaError::InvalidParameter(format!(
            "image index {image} out of range"
        )));
    }
    if scorer.num_classes() != prototypes.num_classes() {
        return Err(PiaaError::DimensionMismatch {
            expected: prototypes.num_classes(),
            actual: scorer.num_classes(),
        });
    }
    let alpha = options.effective_alpha();
    check_alpha(alpha)?;
    let s_cls = cls_prediction(scorer, view, image, prototypes, options)?;
    if options.mode == InferenceMode::ClsOnly {
        let c = s_cls.len();
        return Ok((combine(vec![1.0 / c as f64; c], s_cls, 0.0), None));
    }
    let probs = scorer.image_probs(view, image)?;
    counter.fetch_add(probs.rows() as u64, Ordering::Relaxed);
    let s_patch = if options.secondary_softmax {
        aggregate_patch_scores(&probs, options.temperature)?
    } else {
        max_pool(&probs)
    };
    Ok((combine(s_patch, s_cls, alpha), Some(probs)))
}

/// Scores one image under the requested mode.
pub fn infer_image(
    scorer: &PatchScorer<'_>,
    view: &FeatureView<'_>,
    image: usize,
    prototypes: &TextPrototypeSet,
    options: &InferOptions,
) -> Result<ImageScores> {
    let counter = AtomicU64::new(0);
    infer_counted(scorer, view, image, prototypes, options, &counter).map(|(s, _)| s)
}

/// Batch output plus per-patch probabilities when requested.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub scores: Vec<ImageScores>,
    pub patch_probs: Option<Vec<Option<ProbMatrix>>>,
    /// Number of patch rows pushed through the scorer.
    pub patch_evaluations: u64,
}

/// Parallel map of [`infer_image`] over every image of the view.
pub fn infer_batch(
    scorer: &PatchScorer<'_>,
    view: &FeatureView<'_>,
    prototypes: &TextPrototypeSet,
    options: &InferOptions,
    keep_patch_probs: bool,
) -> Result<BatchOutput> {
    let counter = AtomicU64::new(0);
    let results: Vec<(ImageScores, Option<ProbMatrix>)> = (0..view.num_images())
        .into_par_iter()
        .map(|img| infer_counted(scorer, view, img, prototypes, options, &counter))
        .collect::<Result<_>>()?;
    let (scores, probs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(BatchOutput {
        scores,
        patch_probs: keep_patch_probs.then_some(probs),
        patch_evaluations: counter.into_inner(),
    })
}
