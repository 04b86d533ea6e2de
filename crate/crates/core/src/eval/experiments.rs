//! Component ablations, hyperparameter sweeps and the per-class scale breakdown.

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{PiaaError, Result};
use crate::eval::EvalResult;
use crate::paa::InferenceMode;
use crate::pipeline::{evaluate_scores, fit, score_set, scorer, ScoreField};
use crate::pvcl::GdaClassifier;
use crate::store::{EmbeddingSet, FeatureView, TextPrototypeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pvcl: bool,
    pub paa: bool,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, pvcl: bool, paa: bool) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.pvcl == pvcl && r.paa == paa)
            .expect("all four cells are present")
    }
}

/// Configuration of one ablation cell. Without aggregation the image score is
/// the raw per-class max patch probability with no CLS fusion.
fn ablation_config(base: &PipelineConfig, paa: bool) -> PipelineConfig {
    if paa {
        PipelineConfig {
            mode: InferenceMode::Full,
            secondary_softmax: true,
            ..*base
        }
    } else {
        PipelineConfig {
            mode: InferenceMode::PatchOnly,
            secondary_softmax: false,
            ..*base
        }
    }
}

fn run_cell(
    classifier: Option<&GdaClassifier>,
    eval: &EmbeddingSet,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
) -> Result<EvalResult> {
    let s = scorer(classifier, prototypes, config.logit_scale);
    let out = score_set(&s, &eval.view(), prototypes, &config.infer_options())?;
    evaluate_scores(eval, &out.scores, ScoreField::Fused, &config.digest())
}

/// The four {PVCL on/off} x {PAA on/off} cells, in the order
/// (-,-), (-,PAA), (PVCL,-), (PVCL,PAA).
pub fn ablation_grid(
    adapt: &FeatureView<'_>,
    eval: &EmbeddingSet,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
) -> Result<AblationTable> {
    let fitted = fit(adapt, prototypes, config)?;
    ablation_grid_with(&fitted.classifier, eval, prototypes, config)
}

/// [`ablation_grid`] with an already fitted classifier.
pub fn ablation_grid_with(
    classifier: &GdaClassifier,
    eval: &EmbeddingSet,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
) -> Result<AblationTable> {
    config.validate()?;
    let mut rows = Vec::with_capacity(4);
    for pvcl in [false, true] {
        for paa in [false, true] {
            let cfg = ablation_config(config, paa);
            let classifier = pvcl.then_some(classifier);
            rows.push(AblationRow {
                pvcl,
                paa,
                result: run_cell(classifier, eval, prototypes, &cfg)?,
            });
        }
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    Alpha,
}

impl std::str::FromStr for SweepParam {
    type Err = PiaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Self::K),
            "alpha" => Ok(Self::Alpha),
            other => Err(PiaaError::InvalidParameter(format!(
                "unknown sweep parameter {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "K",
            Self::Alpha => "alpha",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub result: EvalResult,
}

/// One evaluation per value. An `alpha` sweep fits once; a `K` sweep refits
/// for every capacity.
pub fn sweep(
    adapt: &FeatureView<'_>,
    eval: &EmbeddingSet,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    let shared = match param {
        SweepParam::Alpha => Some(fit(adapt, prototypes, config)?),
        SweepParam::K => None,
    };
    values
        .iter()
        .map(|&value| {
            let (cfg, result) = match (param, &shared) {
                (SweepParam::Alpha, Some(fitted)) => {
                    let cfg = PipelineConfig {
                        alpha: value,
                        mode: InferenceMode::Full,
                        ..*config
                    };
                    let r = run_cell(Some(&fitted.classifier), eval, prototypes, &cfg)?;
                    (cfg, r)
                }
                _ => {
                    if !(value >= 1.0 && value.fract() == 0.0) {
                        return Err(PiaaError::InvalidParameter(format!(
                            "K must be a positive integer, got {value}"
                        )));
                    }
                    let cfg = PipelineConfig {
                        k: value as usize,
                        ..*config
                    };
                    let fitted = fit(adapt, prototypes, &cfg)?;
                    let r = run_cell(Some(&fitted.classifier), eval, prototypes, &cfg)?;
                    (cfg, r)
                }
            };
            cfg.validate()?;
            Ok(SweepPoint {
                param,
                value,
                result,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub class_name: String,
    pub ap_cls_only: Option<f64>,
    pub ap_patch_only: Option<f64>,
    pub ap_fused: Option<f64>,
}

/// Per-class AP of the CLS-only, patch-only and fused scores for the named classes.
pub fn scale_breakdown(
    adapt: &FeatureView<'_>,
    eval: &EmbeddingSet,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
    class_names: &[String],
) -> Result<Vec<BreakdownRow>> {
    // resolve names before paying for the fit
    for n in class_names {
        prototypes.class_index(n)?;
    }
    let fitted = fit(adapt, prototypes, config)?;
    scale_breakdown_with(&fitted.classifier, eval, prototypes, config, class_names)
}

/// [`scale_breakdown`] with an already fitted classifier.
pub fn scale_breakdown_with(
    classifier: &GdaClassifier,
    eval: &EmbeddingSet,
    prototypes: &TextPrototypeSet,
    config: &PipelineConfig,
    class_names: &[String],
) -> Result<Vec<BreakdownRow>> {
    let classes = class_names
        .iter()
        .map(|n| prototypes.class_index(n))
        .collect::<Result<Vec<usize>>>()?;
    let cfg = PipelineConfig {
        mode: InferenceMode::Full,
        ..*config
    };
    let s = scorer(Some(classifier), prototypes, cfg.logit_scale);
    let out = score_set(&s, &eval.view(), prototypes, &cfg.infer_options())?;
    let digest = cfg.digest();
    let cls = evaluate_scores(eval, &out.scores, ScoreField::Cls, &digest)?;
    let patch = evaluate_scores(eval, &out.scores, ScoreField::Patch, &digest)?;
    let fused = evaluate_scores(eval, &out.scores, ScoreField::Fused, &digest)?;
    Ok(classes
        .iter()
        .zip(class_names)
        .map(|(&c, name)| BreakdownRow {
            class_name: name.clone(),
            ap_cls_only: cls.per_class_ap[c],
            ap_patch_only: patch.per_class_ap[c],
            ap_fused: fused.per_class_ap[c],
        })
        .collect())
}
