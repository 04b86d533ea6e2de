//! Fit-then-score composition used by the CLI and the experiment drivers.

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{PiaaError, Result};
use crate::eval::{evaluate, EvalResult};
use crate::paa::{infer_batch, BatchOutput, ImageScores, InferOptions, PatchScorer};
use crate::pvcl::{run_pvcl, GdaClassifier, PvclOutput};
use crate::store::{EmbeddingSet, FeatureView, TextPrototypeSet};

/// Which image-level vector is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    #[default]
    Fused,
    Patch,
    Cls,
}

/// Fits the visual classifier on the adaptation patches.
pub fn fit(
    adapt: &FeatureView<'_>,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
) -> Result<PvclOutput> {
    config.validate()?;
    run_pvcl(adapt, prototypes, &config.fit_options())
}

/// The visual classifier when present, otherwise text-prototype scoring.
pub fn scorer<'a>(
    classifier: Option<&'a GdaClassifier>,
    prototypes: &'a TextPrototypeSet,
    logit_scale: f64,
) -> PatchScorer<'a> {
    match classifier {
        Some(c) => PatchScorer::Gda(c),
        None => PatchScorer::Text {
            prototypes,
            logit_scale,
        },
    }
}

pub fn score_set(
    scorer: &PatchScorer<'_>,
    eval: &FeatureView<'_>,
    prototypes: &TextPrototypeSet,
    options: &InferOptions,
) -> Result<BatchOutput> {
    infer_batch(scorer, eval, prototypes, options, false)
}

/// Row-major `num_images x C` matrix of the selected field.
pub fn score_matrix(scores: &[ImageScores], field: ScoreField) -> Vec<f64> {
    scores
        .iter()
        .flat_map(|s| match field {
            ScoreField::Fused => s.s_fused.iter(),
            ScoreField::Patch => s.s_patch.iter(),
            ScoreField::Cls => s.s_cls.iter(),
        })
        .copied()
        .collect()
}

/// Ranks `scores` against the labels of `eval`.
pub fn evaluate_scores(
    eval: &EmbeddingSet,
    scores: &[ImageScores],
    field: ScoreField,
    digest: &str,
) -> Result<EvalResult> {
    let labels = eval.labels().ok_or(PiaaError::MissingLabels)?;
    evaluate(
        &score_matrix(scores, field),
        labels,
        eval.image_ids(),
        digest,
    )
}

/// The adaptation view: the evaluation images themselves when transductive.
pub fn adaptation_view<'a>(
    adapt: Option<&'a EmbeddingSet>,
    eval: &'a EmbeddingSet,
    transductive: bool,
) -> Result<FeatureView<'a>> {
    match (adapt, transductive) {
        (_, true) => Ok(eval.view()),
        (Some(a), false) => Ok(a.view()),
        (None, false) => Err(PiaaError::InvalidParameter(
            "an adaptation split is required unless --transductive is set".into(),
        )),
    }
}
