//! Synthetic Gaussian patch manifolds with known ground truth.
//!
//! A [`SynthSpec`] is materialized once into a [`SynthModel`] (class means,
//! shared covariance, gapped text prototypes and the exact Bayes
//! discriminant). Splits are then sampled image by image.
//!
//! Randomness comes from ChaCha8. The model parameters use stream 0 of the
//! spec seed. Image `i` of split `s` uses stream `(s + 1) * 2^40 + i` and
//! draws its label count, label subset, patch order, then per patch the
//! clutter target (clutter only) and noise, then the CLS noise. Per-class
//! labeled draws use stream `(s + 1) * 2^40 + 2^39 + class`. Gaussian draws
//! use `rand_distr::StandardNormal`.

pub mod oracle;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PiaaError, Result};
use crate::pvcl::GdaClassifier;
use crate::store::{EmbeddingSet, LabelMatrix, Normalization, TextPrototypeSet};

/// Direction toward which each text prototype is rotated away from its mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapTarget {
    /// Toward the next class's mean, so neighbouring classes get confused.
    #[default]
    NextClass,
    /// Toward a random direction orthogonal to the mean.
    Random,
}

/// Generator settings, readable from a TOML `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub images: usize,
    pub patches_per_image: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    /// Minimum distance between class means in units of the largest noise
    /// standard deviation. Ignored when `shared_cov` is given.
    pub separation: f64,
    pub mean_norm: f64,
    /// Noise is `sigma^2 (I + cov_strength U U^T)` with `U` a random
    /// orthonormal `d x cov_rank` basis.
    pub cov_rank: usize,
    pub cov_strength: f64,
    /// Explicit row-major `C x d` means.
    pub true_means: Option<Vec<f64>>,
    /// Explicit row-major `d x d` covariance.
    pub shared_cov: Option<Vec<f64>>,
    pub gap_angle_deg: f64,
    pub gap_offset: f64,
    pub gap_target: GapTarget,
    pub small_object_classes: Vec<usize>,
    /// Share of an image's patches given to each small-object class present.
    pub small_object_fraction: f64,
    /// Classes whose patches carry only `large_object_signal` times their
    /// mean, so single patches are weak while the image average is clear.
    pub large_object_classes: Vec<usize>,
    pub large_object_signal: f64,
    pub background_fraction: f64,
    /// Share of each image's patches that are background pulled a fraction
    /// `clutter_strength` of the way toward a random class mean.
    pub clutter_fraction: f64,
    pub clutter_strength: f64,
    pub cls_noise: f64,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 16,
            images: 200,
            patches_per_image: 16,
            min_labels: 1,
            max_labels: 3,
            separation: 6.0,
            mean_norm: 1.0,
            cov_rank: 0,
            cov_strength: 0.0,
            true_means: None,
            shared_cov: None,
            gap_angle_deg: 0.0,
            gap_offset: 0.0,
            gap_target: GapTarget::NextClass,
            small_object_classes: Vec::new(),
            small_object_fraction: 0.1,
            large_object_classes: Vec::new(),
            large_object_signal: 1.0,
            background_fraction: 0.0,
            clutter_fraction: 0.0,
            clutter_strength: 0.5,
            cls_noise: 0.05,
            normalize: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| PiaaError::InvalidParameter(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PiaaError::InvalidParameter(msg));
        if self.classes == 0 || self.dim == 0 || self.images == 0 || self.patches_per_image == 0 {
            return bad("classes, dim, images and patches_per_image must be positive".into());
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return bad(format!(
                "label range {}..={}",
                self.min_labels, self.max_labels
            ));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return bad(format!("separation {}", self.separation));
        }
        if !(self.mean_norm.is_finite() && self.mean_norm > 0.0) {
            return bad(format!("mean_norm {}", self.mean_norm));
        }
        if self.cov_rank > self.dim || !(self.cov_strength >= 0.0 && self.cov_strength.is_finite())
        {
            return bad(format!(
                "cov_rank {} / cov_strength {}",
                self.cov_rank, self.cov_strength
            ));
        }
        for (name, v) in [
            ("small_object_fraction", self.small_object_fraction),
            ("background_fraction", self.background_fraction),
            ("clutter_fraction", self.clutter_fraction),
            ("clutter_strength", self.clutter_strength),
            ("large_object_signal", self.large_object_signal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.cls_noise >= 0.0 && self.cls_noise.is_finite()) {
            return bad(format!("cls_noise {}", self.cls_noise));
        }
        if !(self.gap_angle_deg.is_finite() && self.gap_offset.is_finite()) {
            return bad("gap parameters must be finite".into());
        }
        let listed = self
            .small_object_classes
            .iter()
            .chain(&self.large_object_classes);
        if let Some(&c) = listed.clone().find(|&&c| c >= self.classes) {
            return bad(format!("object-scale class {c} out of range"));
        }
        if self
            .small_object_classes
            .iter()
            .any(|c| self.large_object_classes.contains(c))
        {
            return bad("a class cannot be both small and large".into());
        }
        if let Some(m) = &self.true_means {
            if m.len() != self.classes * self.dim {
                return Err(PiaaError::DimensionMismatch {
                    expected: self.classes * self.dim,
                    actual: m.len(),
                });
            }
        }
        if let Some(s) = &self.shared_cov {
            if s.len() != self.dim * self.dim {
                return Err(PiaaError::DimensionMismatch {
                    expected: self.dim * self.dim,
                    actual: s.len(),
                });
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class_{c:02}")).collect()
    }
}

/// Stream ids at or above this offset hold per-class labeled draws.
const LABELED_STREAM: u64 = 1 << 39;

#[derive(Debug, Clone)]
enum NoiseFactor {
    LowRank {
        sigma: f64,
        strength_sqrt: f64,
        basis: Vec<Vec<f64>>,
    },
    Full(Vec<Vec<f64>>),
}

/// What generated one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Class(usize),
    Background,
    Clutter,
}

/// Materialized ground truth for a spec.
#[derive(Debug, Clone)]
pub struct SynthModel {
    spec: SynthSpec,
    means: Vec<Vec<f64>>,
    background: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    noise: NoiseFactor,
    prototypes: TextPrototypeSet,
    ground_truth: GdaClassifier,
}

/// One sampled split.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub embeddings: EmbeddingSet,
    pub prototypes: TextPrototypeSet,
    pub ground_truth: GdaClassifier,
    /// Generating class of every patch, `None` for background.
    pub patch_classes: Vec<Option<usize>>,
}

/// Samples split 0 of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    SynthModel::new(spec)?.sample_split(0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Gram-Schmidt with one re-orthogonalization pass. `None` if a vector
/// collapses.
fn orthonormalize(mut vs: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let p = dot(&vs[i], &vs[j]);
                let (head, tail) = vs.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= p * y;
                }
            }
        }
        let n = norm(&vs[i]);
        if n < 1e-10 {
            return None;
        }
        vs[i].iter_mut().for_each(|x| *x /= n);
    }
    Some(vs)
}

fn cholesky_lower(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn random_means<R: Rng>(rng: &mut R, count: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = (0..count).map(|_| gaussian_vec(rng, d)).collect();
    let unit = if count <= d {
        orthonormalize(raw).expect("gaussian vectors are independent almost surely")
    } else {
        raw.into_iter()
            .map(|v| {
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    };
    unit.into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

fn min_pairwise_distance(means: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

impl SynthModel {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let (c, d) = (spec.classes, spec.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let drawn = random_means(&mut rng, c + 1, d, spec.mean_norm);
        let background = drawn[c].clone();
        let means: Vec<Vec<f64>> = match &spec.true_means {
            Some(m) => m.chunks(d).map(<[f64]>::to_vec).collect(),
            None => drawn[..c].to_vec(),
        };
        if means
            .iter()
            .any(|m| norm(m) == 0.0 || m.iter().any(|x| !x.is_finite()))
        {
            return Err(PiaaError::InvalidParameter(
                "class means must be finite and nonzero".into(),
            ));
        }

        let (covariance, noise) = match &spec.shared_cov {
            Some(s) => {
                let cov: Vec<Vec<f64>> = s.chunks(d).map(<[f64]>::to_vec).collect();
                let symmetric = (0..d).all(|i| (0..d).all(|j| cov[i][j] == cov[j][i]));
                let l = cholesky_lower(&cov).filter(|_| symmetric);
                let l = l.ok_or(PiaaError::NotPositiveDefinite)?;
                (cov, NoiseFactor::Full(l))
            }
            None => {
                let basis = if spec.cov_rank > 0 {
                    let raw = (0..spec.cov_rank)
                        .map(|_| gaussian_vec(&mut rng, d))
                        .collect();
                    orthonormalize(raw).ok_or(PiaaError::NotPositiveDefinite)?
                } else {
                    Vec::new()
                };
                let spread = if c > 1 {
                    min_pairwise_distance(&means)
                } else {
                    norm(&means[0])
                };
                let sigma = spread / (spec.separation * (1.0 + spec.cov_strength).sqrt());
                let mut cov = vec![vec![0.0; d]; d];
                for i in 0..d {
                    for j in 0..d {
                        let low: f64 = basis.iter().map(|u| u[i] * u[j]).sum();
                        cov[i][j] =
                            sigma * sigma * (f64::from(u8::from(i == j)) + spec.cov_strength * low);
                    }
                }
                let noise = NoiseFactor::LowRank {
                    sigma,
                    strength_sqrt: spec.cov_strength.sqrt(),
                    basis,
                };
                (cov, noise)
            }
        };

        let prototypes = gapped_prototypes(spec, &means, &mut rng)?;
        let ground_truth = oracle::exact_discriminant(&means, &covariance)?;
        Ok(Self {
            spec: spec.clone(),
            means,
            background,
            covariance,
            noise,
            prototypes,
            ground_truth,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    pub fn prototypes(&self) -> &TextPrototypeSet {
        &self.prototypes
    }

    pub fn ground_truth(&self) -> &GdaClassifier {
        &self.ground_truth
    }

    /// Largest eigenvalue of the noise covariance for the low-rank model.
    pub fn max_noise_variance(&self) -> Option<f64> {
        match &self.noise {
            NoiseFactor::LowRank {
                sigma,
                strength_sqrt,
                basis,
            } => {
                let boost = if basis.is_empty() {
                    0.0
                } else {
                    strength_sqrt * strength_sqrt
                };
                Some(sigma * sigma * (1.0 + boost))
            }
            NoiseFactor::Full(_) => None,
        }
    }

    fn rng_for(&self, split: u32, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(((u64::from(split) + 1) << 40) | index);
        rng
    }

    /// One noisy draw around `mean`.
    fn sample_into<R: Rng>(&self, rng: &mut R, mean: &[f64], out: &mut [f64]) {
        let d = mean.len();
        match &self.noise {
            NoiseFactor::LowRank {
                sigma,
                strength_sqrt,
                basis,
            } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + sigma * rng.sample::<f64, _>(StandardNormal);
                }
                for u in basis {
                    let z: f64 = rng.sample(StandardNormal);
                    let a = sigma * strength_sqrt * z;
                    for (o, x) in out.iter_mut().zip(u) {
                        *o += a * x;
                    }
                }
            }
            NoiseFactor::Full(l) => {
                let z = gaussian_vec(rng, d);
                for i in 0..d {
                    out[i] = mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>();
                }
            }
        }
    }

    /// Mean of the distribution a slot is drawn from. Clutter draws its
    /// target class from `rng`.
    fn slot_mean<R: Rng>(&self, rng: &mut R, slot: Slot) -> Vec<f64> {
        match slot {
            Slot::Class(c) if self.spec.large_object_classes.contains(&c) => {
                let w = self.spec.large_object_signal;
                self.means[c].iter().map(|x| w * x).collect()
            }
            Slot::Class(c) => self.means[c].clone(),
            Slot::Background => self.background.clone(),
            Slot::Clutter => {
                let target = &self.means[rng.gen_range(0..self.spec.classes)];
                let l = self.spec.clutter_strength;
                self.background
                    .iter()
                    .zip(target)
                    .map(|(b, t)| (1.0 - l) * b + l * t)
                    .collect()
            }
        }
    }

    /// Generating slot of each patch of one image.
    fn allocate<R: Rng>(&self, rng: &mut R) -> Vec<Slot> {
        let spec = &self.spec;
        let m = spec.patches_per_image;
        let max = spec.max_labels.min(spec.classes).min(m);
        let min = spec.min_labels.min(max);
        let count = rng.gen_range(min..=max);
        let mut chosen = rand::seq::index::sample(rng, spec.classes, count).into_vec();
        chosen.sort_unstable();

        let (small, regular): (Vec<usize>, Vec<usize>) = chosen
            .iter()
            .partition(|c| spec.small_object_classes.contains(c));
        let mut slots: Vec<Slot> = Vec::with_capacity(m);
        let per_small = ((spec.small_object_fraction * m as f64).floor() as usize).max(1);
        for &c in &small {
            let n = per_small.min(m - slots.len());
            slots.extend(std::iter::repeat_n(Slot::Class(c), n));
        }
        // regular classes keep at least one patch each
        let spare = |slots: &Vec<Slot>| (m - slots.len()).saturating_sub(regular.len());
        let clutter = ((spec.clutter_fraction * m as f64).round() as usize).min(spare(&slots));
        slots.extend(std::iter::repeat_n(Slot::Clutter, clutter));
        let background =
            ((spec.background_fraction * m as f64).round() as usize).min(spare(&slots));
        slots.extend(std::iter::repeat_n(Slot::Background, background));
        let rest = m - slots.len();
        if regular.is_empty() {
            slots.extend(std::iter::repeat_n(Slot::Background, rest));
        } else {
            for k in 0..rest {
                slots.push(Slot::Class(regular[k % regular.len()]));
            }
        }
        slots.shuffle(rng);
        slots
    }

    /// Samples `spec.images` images. Splits with different ids are independent.
    pub fn sample_split(&self, split: u32) -> Result<SynthData> {
        let spec = &self.spec;
        let (d, m, c, n) = (spec.dim, spec.patches_per_image, spec.classes, spec.images);
        let mut patches = vec![0f32; n * m * d];
        let mut cls = vec![0f32; n * d];
        let mut labels = vec![0u8; n * c];
        let mut truth = vec![None; n * m];

        patches
            .par_chunks_mut(m * d)
            .zip(cls.par_chunks_mut(d))
            .zip(labels.par_chunks_mut(c))
            .zip(truth.par_chunks_mut(m))
            .enumerate()
            .for_each(|(i, (((p, cl), lab), tr))| {
                let mut rng = self.rng_for(split, i as u64);
                let slots = self.allocate(&mut rng);
                let mut x = vec![0.0; d];
                let mut sum = vec![0.0; d];
                for (k, &slot) in slots.iter().enumerate() {
                    let mean = self.slot_mean(&mut rng, slot);
                    self.sample_into(&mut rng, &mean, &mut x);
                    for ((dst, s), v) in p[k * d..(k + 1) * d].iter_mut().zip(&mut sum).zip(&x) {
                        *dst = *v as f32;
                        *s += v;
                    }
                    tr[k] = match slot {
                        Slot::Class(class) => {
                            lab[class] = 1;
                            Some(class)
                        }
                        Slot::Background | Slot::Clutter => None,
                    };
                }
                let len = norm(&sum).max(f64::MIN_POSITIVE);
                let scale = spec.cls_noise / (d as f64).sqrt();
                for (dst, s) in cl.iter_mut().zip(&sum) {
                    let z: f64 = rng.sample(StandardNormal);
                    *dst = (s / len + scale * z) as f32;
                }
            });

        let ids = (0..n).map(|i| format!("s{split}_{i:06}")).collect();
        let normalization = if spec.normalize {
            Normalization::L2
        } else {
            Normalization::Disabled
        };
        let embeddings = EmbeddingSet::new(
            d,
            &vec![m; n],
            patches,
            cls,
            ids,
            Some(LabelMatrix::new(c, labels)?),
            normalization,
        )?;
        Ok(SynthData {
            embeddings,
            prototypes: self.prototypes.clone(),
            ground_truth: self.ground_truth.clone(),
            patch_classes: truth,
        })
    }

    /// `per_class` independent draws from every class, class-major, as rows.
    pub fn sample_labeled(&self, per_class: usize, split: u32) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::with_capacity(per_class * self.spec.classes);
        let mut labels = Vec::with_capacity(rows.capacity());
        for (class, mean) in self.means.iter().enumerate() {
            let mut rng = self.rng_for(split, LABELED_STREAM | class as u64);
            for _ in 0..per_class {
                let mut x = vec![0.0; self.spec.dim];
                self.sample_into(&mut rng, mean, &mut x);
                rows.push(x);
                labels.push(class);
            }
        }
        (rows, labels)
    }
}

/// Unit prototypes rotated by `gap_angle_deg` away from each mean and shifted
/// by a shared offset of length `gap_offset`.
fn gapped_prototypes<R: Rng>(
    spec: &SynthSpec,
    means: &[Vec<f64>],
    rng: &mut R,
) -> Result<TextPrototypeSet> {
    let (c, d) = (spec.classes, spec.dim);
    let theta = spec.gap_angle_deg.to_radians();
    let unit = |v: &[f64]| {
        let n = norm(v);
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let offset = unit(&gaussian_vec(rng, d));
    let mut flat = Vec::with_capacity(c * d);
    for k in 0..c {
        let mu = unit(&means[k]);
        let toward = match spec.gap_target {
            GapTarget::NextClass if c > 1 => means[(k + 1) % c].clone(),
            _ => gaussian_vec(rng, d),
        };
        let along = dot(&toward, &mu);
        let perp: Vec<f64> = toward.iter().zip(&mu).map(|(t, m)| t - along * m).collect();
        let perp = if norm(&perp) > 1e-12 {
            unit(&perp)
        } else {
            vec![0.0; d]
        };
        for j in 0..d {
            let v = theta.cos() * mu[j] + theta.sin() * perp[j] + spec.gap_offset * offset[j];
            flat.push(v as f32);
        }
    }
    TextPrototypeSet::new(d, flat, spec.class_names(), Normalization::L2)
}
