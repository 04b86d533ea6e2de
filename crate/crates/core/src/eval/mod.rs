//! Ranking metrics and the experiment drivers built on them.

pub mod experiments;
pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiaaError, Result};
use crate::store::LabelMatrix;

pub use experiments::{
    ablation_grid, ablation_grid_with, scale_breakdown, scale_breakdown_with, sweep, AblationRow,
    AblationTable, BreakdownRow, SweepParam, SweepPoint,
};

/// All-points average precision: the mean, over positives, of the precision
/// at each positive's rank. Items are ranked by descending score with ties
/// broken by ascending index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels differ in length"
    );
    let num_pos = labels.iter().filter(|&&l| l).count();
    if num_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / num_pos as f64)
}

/// Per-class AP and their mean over classes with at least one positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub num_pos: Vec<usize>,
    pub undefined_classes: Vec<usize>,
    pub config_digest: String,
}

/// Evaluates a row-major `num_images x C` score matrix against labels.
///
/// Images are ordered by `image_ids` before ranking so that score ties are
/// broken identically however the images are stored.
pub fn evaluate(
    scores: &[f64],
    labels: &LabelMatrix,
    image_ids: &[String],
    config_digest: &str,
) -> Result<EvalResult> {
    let n = labels.num_images();
    let c = labels.num_classes();
    if scores.len() != n * c {
        return Err(PiaaError::DimensionMismatch {
            expected: n * c,
            actual: scores.len(),
        });
    }
    if image_ids.len() != n {
        return Err(PiaaError::DimensionMismatch {
            expected: n,
            actual: image_ids.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PiaaError::NonFinite("scores"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| image_ids[a].cmp(&image_ids[b]).then(a.cmp(&b)));

    let per_class: Vec<(Option<f64>, usize)> = (0..c)
        .into_par_iter()
        .map(|class| {
            let s: Vec<f64> = order.iter().map(|&i| scores[i * c + class]).collect();
            let l: Vec<bool> = order.iter().map(|&i| labels.get(i, class)).collect();
            let pos = l.iter().filter(|&&x| x).count();
            (average_precision(&s, &l), pos)
        })
        .collect();

    let per_class_ap: Vec<Option<f64>> = per_class.iter().map(|p| p.0).collect();
    let num_pos = per_class.iter().map(|p| p.1).collect();
    let undefined_classes: Vec<usize> = per_class_ap
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(k, _)| k)
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(PiaaError::InvalidData(
            "no class has a positive image".into(),
        ));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(EvalResult {
        per_class_ap,
        map,
        num_pos,
        undefined_classes,
        config_digest: config_digest.to_string(),
    })
}
