//! Reference implementations used to cross-check the production code paths.
//!
//! Nothing here calls into `pvcl` or `eval`; linear algebra is done with a
//! plain Gauss-Jordan inverse on nested vectors.

#![allow(clippy::needless_range_loop)]

use crate::error::{PiaaError, Result};
use crate::pvcl::{GdaClassifier, Provenance, COVARIANCE_FLOOR};

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[n..].to_vec()).collect())
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Closed-form discriminant from hard labels and optional per-sample weights,
/// transcribed directly from the estimator's formulas.
pub fn oracle_gda(
    features: &[Vec<f64>],
    labels: &[usize],
    weights: Option<&[f64]>,
    num_classes: usize,
) -> Result<GdaClassifier> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(PiaaError::InvalidData(
            "oracle needs one label per feature".into(),
        ));
    }
    let d = features[0].len();

    // weighted class means
    let mut means = vec![vec![0.0; d]; num_classes];
    let mut totals = vec![0.0; num_classes];
    for (i, x) in features.iter().enumerate() {
        let c = labels[i];
        let q = weights.map_or(1.0, |w| w[i]);
        totals[c] += q;
        for j in 0..d {
            means[c][j] += q * x[j];
        }
    }
    for c in 0..num_classes {
        if totals[c] <= 0.0 {
            return Err(PiaaError::InvalidData(format!(
                "class {c} has no weighted samples"
            )));
        }
        for j in 0..d {
            means[c][j] /= totals[c];
        }
    }

    // pooled covariance over |B|
    let mut sigma = vec![vec![0.0; d]; d];
    for (i, x) in features.iter().enumerate() {
        let mu = &means[labels[i]];
        for a in 0..d {
            for b in 0..d {
                sigma[a][b] += (x[a] - mu[a]) * (x[b] - mu[b]);
            }
        }
    }
    for row in sigma.iter_mut() {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let trace: f64 = (0..d).map(|j| sigma[j][j]).sum();

    // d [ (|B|-1) Sigma + Tr I ]^{-1}, floored when the trace vanishes
    let mut target = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..d {
            target[a][b] = if trace < COVARIANCE_FLOOR {
                if a == b {
                    COVARIANCE_FLOOR
                } else {
                    0.0
                }
            } else {
                (n as f64 - 1.0) * sigma[a][b] + if a == b { trace } else { 0.0 }
            };
        }
    }
    let inv = gauss_jordan_inverse(&target).ok_or(PiaaError::NotPositiveDefinite)?;
    let precision: Vec<Vec<f64>> = inv
        .iter()
        .map(|row| row.iter().map(|v| v * d as f64).collect())
        .collect();

    let mut w = Vec::with_capacity(num_classes * d);
    let mut b = Vec::with_capacity(num_classes);
    for mu in &means {
        let wc = mat_vec(&precision, mu);
        b.push(-0.5 * mu.iter().zip(&wc).map(|(x, y)| x * y).sum::<f64>());
        w.extend(wc);
    }
    GdaClassifier::from_parts(
        d,
        w,
        b,
        means.concat(),
        precision.concat(),
        Provenance::Final,
        Vec::new(),
    )
}

/// Linear discriminant `Sigma^{-1} mu_c`, `-1/2 mu_c^T Sigma^{-1} mu_c` for
/// known parameters.
pub fn exact_discriminant(means: &[Vec<f64>], covariance: &[Vec<f64>]) -> Result<GdaClassifier> {
    let d = covariance.len();
    let precision = gauss_jordan_inverse(covariance).ok_or(PiaaError::NotPositiveDefinite)?;
    let mut w = Vec::with_capacity(means.len() * d);
    let mut b = Vec::with_capacity(means.len());
    for mu in means {
        let wc = mat_vec(&precision, mu);
        b.push(-0.5 * mu.iter().zip(&wc).map(|(x, y)| x * y).sum::<f64>());
        w.extend(wc);
    }
    GdaClassifier::from_parts(
        d,
        w,
        b,
        means.concat(),
        precision.concat(),
        Provenance::Final,
        Vec::new(),
    )
}

/// Average precision by pairwise enumeration: an item's rank is one plus the
/// number of items scored higher, or tied with a lower index.
pub fn oracle_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for i in 0..n {
        if !labels[i] {
            continue;
        }
        let mut above = 0usize;
        let mut pos_above = 0usize;
        for j in 0..n {
            if j != i && ahead(j, i) {
                above += 1;
                if labels[j] {
                    pos_above += 1;
                }
            }
        }
        let rank = above + 1;
        terms.push((rank, (pos_above + 1) as f64 / rank as f64));
    }
    if terms.is_empty() {
        return None;
    }
    // accumulate in rank order so the rounding matches a sequential scan
    terms.sort_by_key(|t| t.0);
    let total = terms.len() as f64;
    Some(terms.iter().map(|t| t.1).sum::<f64>() / total)
}

/// AP of a fully reversed ranking with `p` positives among `n` items.
pub fn worst_case_ap(n: usize, p: usize) -> f64 {
    (1..=p).map(|k| k as f64 / (n - p + k) as f64).sum::<f64>() / p as f64
}

/// Fraction of rows on which two classifiers pick the same argmax class.
pub fn argmax_agreement(a: &GdaClassifier, b: &GdaClassifier, rows: &[Vec<f64>]) -> f64 {
    let pick = |c: &GdaClassifier, x: &[f64]| {
        let l = c.logits(x);
        (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    };
    let agree = rows.iter().filter(|x| pick(a, x) == pick(b, x)).count();
    agree as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_case_matches_hand_values() {
        let x = vec![
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ];
        let g = oracle_gda(&x, &[0, 0, 1, 1], None, 2).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        assert!(close(g.weight(0)[0], 2.0) && close(g.weight(0)[1], 0.0));
        assert!(close(g.weight(1)[0], -2.0));
        assert!(close(g.biases()[0], -1.0) && close(g.biases()[1], -1.0));
        assert!(close(g.precision()[0], 2.0) && close(g.precision()[3], 0.5));
    }

    #[test]
    fn single_class_structure() {
        let x = vec![vec![0.5, 0.1], vec![0.7, -0.2], vec![0.4, 0.3]];
        let g = oracle_gda(&x, &[0, 0, 0], None, 1).unwrap();
        assert!(g.biases()[0].is_finite());
        let p = g.precision();
        let mu = g.mean(0);
        let expected = [p[0] * mu[0] + p[1] * mu[1], p[2] * mu[0] + p[3] * mu[1]];
        assert!((g.weight(0)[0] - expected[0]).abs() < 1e-12);
        assert!((g.weight(0)[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn degenerate_input_uses_floor() {
        let x = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let g = oracle_gda(&x, &[0, 0], None, 1).unwrap();
        assert!((g.precision()[0] * COVARIANCE_FLOOR / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_of_known_matrix() {
        let inv = gauss_jordan_inverse(&[vec![4.0, 7.0], vec![2.0, 6.0]]).unwrap();
        let expected = [[0.6, -0.7], [-0.2, 0.4]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((inv[i][j] - expected[i][j]).abs() < 1e-12);
            }
        }
        assert!(gauss_jordan_inverse(&[vec![1.0, 2.0], vec![2.0, 4.0]]).is_none());
    }

    #[test]
    fn oracle_ap_hand_cases() {
        assert_eq!(oracle_ap(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        let ap = oracle_ap(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(oracle_ap(&[0.1], &[false]), None);
        // reversed ranking, 2 positives of 4: (1/3 + 2/4) / 2
        let ap = oracle_ap(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]).unwrap();
        assert!((ap - worst_case_ap(4, 2)).abs() < 1e-15);
        assert!((ap - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }
}
