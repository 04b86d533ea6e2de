//! Hyperparameters shared by fitting, inference and evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PiaaError, Result};
use crate::paa::{InferOptions, InferenceMode, DEFAULT_ALPHA, DEFAULT_TEMPERATURE};
use crate::pvcl::{CovarianceDenominator, EstimatorOptions, FitOptions, DEFAULT_BANK_CAPACITY};
use crate::DEFAULT_LOGIT_SCALE;

/// Every numerical knob of a run. Its digest identifies a configuration in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub alpha: f64,
    pub logit_scale: f64,
    pub secondary_softmax_temperature: f64,
    pub mode: InferenceMode,
    pub secondary_softmax: bool,
    pub stage1_shrinkage: bool,
    pub covariance: CovarianceDenominator,
    pub transductive: bool,
    pub cls_via_gda: bool,
    pub normalize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_BANK_CAPACITY,
            alpha: DEFAULT_ALPHA,
            logit_scale: DEFAULT_LOGIT_SCALE,
            secondary_softmax_temperature: DEFAULT_TEMPERATURE,
            mode: InferenceMode::Full,
            secondary_softmax: true,
            stage1_shrinkage: true,
            covariance: CovarianceDenominator::AsPrinted,
            transductive: false,
            cls_via_gda: false,
            normalize: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PiaaError::InvalidParameter("K must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PiaaError::InvalidParameter(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            return Err(PiaaError::InvalidParameter(format!(
                "logit_scale {}",
                self.logit_scale
            )));
        }
        let t = self.secondary_softmax_temperature;
        if !(t.is_finite() && t > 0.0) {
            return Err(PiaaError::InvalidParameter(format!("temperature {t}")));
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            k: self.k,
            logit_scale: self.logit_scale,
            estimator: EstimatorOptions {
                stage1_shrinkage: self.stage1_shrinkage,
                denominator: self.covariance,
            },
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions {
            alpha: self.alpha,
            temperature: self.secondary_softmax_temperature,
            logit_scale: self.logit_scale,
            mode: self.mode,
            secondary_softmax: self.secondary_softmax,
            cls_via_gda: self.cls_via_gda,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
