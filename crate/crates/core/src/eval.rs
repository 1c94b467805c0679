//! Desk-scale metrics and the attention-cost profiler.
//!
//! Fréchet distance, diversity and condition fidelity all work on a fixed
//! hand-crafted featurizer rather than a learned evaluator: per-channel mean,
//! standard deviation, mean absolute velocity and dominant Fourier magnitude,
//! pooled to [`FEATURE_DIM`] dimensions by a seed-pinned Gaussian projection.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::keyframes::KeyframeMask;
use crate::model::{denoise_vars, DenoisePath, DenoiserConfig, DenoiserParams, ModelError};
use crate::motion::{MotionSequence, NormStats, SkeletonLayout};
use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::{OpCategory, Tape, Tensor};

pub const FEATURE_DIM: usize = 16;
const PROJECTION_SEED: u64 = 0x5eed_f00d;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("feature dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("class {0} has no reference sequences")]
    EmptyClass(usize),
    #[error("K = {k} exceeds N = {n}")]
    BadKeyframeCount { k: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Unprojected features, `4·D` values: means, stds, mean |velocity|, dominant
/// non-DC DFT magnitude (normalized by N) of each channel.
pub fn raw_features(seq: &MotionSequence) -> Vec<f64> {
    let (n, d) = (seq.n_frames(), seq.dim());
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    let mut vels = vec![0.0; d];
    let mut peaks = vec![0.0; d];
    for c in 0..d {
        let x: Vec<f64> = (0..n).map(|i| seq.frame(i)[c]).collect();
        let m = x.iter().sum::<f64>() / n as f64;
        means[c] = m;
        stds[c] = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        vels[c] = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (n - 1) as f64;
        peaks[c] = (1..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let ang = TAU * (k * i) as f64 / n as f64;
                    re += (v - m) * ang.cos();
                    im -= (v - m) * ang.sin();
                }
                re.hypot(im) / n as f64
            })
            .fold(0.0, f64::max);
    }
    [means, stds, vels, peaks].concat()
}

/// Fixed `FEATURE_DIM × 4D` projection; identical for every call with the same D.
fn projection(d_raw: usize) -> Vec<f64> {
    let mut rng = stream_rng(PROJECTION_SEED, Stream::Eval, d_raw as u64);
    let normal = Normal::new(0.0, 1.0 / (d_raw as f64).sqrt()).expect("positive std");
    (0..FEATURE_DIM * d_raw).map(|_| normal.sample(&mut rng)).collect()
}

/// Projected features of a sequence, optionally z-scored first.
#[derive(Debug, Clone)]
pub struct Featurizer {
    stats: Option<NormStats>,
}

impl Featurizer {
    pub fn new(stats: Option<NormStats>) -> Self {
        Self { stats }
    }

    pub fn features(&self, seq: &MotionSequence) -> Vec<f64> {
        let raw = match &self.stats {
            Some(s) => {
                let normed = MotionSequence::new(s.normalize(seq.frames()), seq.fps, seq.class_id).expect("finite input stays finite");
                raw_features(&normed)
            }
            None => raw_features(seq),
        };
        let p = projection(raw.len());
        p.chunks(raw.len()).map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Features of a sequence in its own units.
pub fn motion_features(seq: &MotionSequence) -> Vec<f64> {
    Featurizer::new(None).features(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major d×d covariance (unbiased; zero for a single sample).
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(EvalError::TooFewSamples { need: 1, got: 0 });
        };
        let d = first.len();
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(EvalError::DimMismatch(d, f.len()));
        }
        let n = features.len();
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            for f in features {
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] += (f[i] - mean[i]) * (f[j] - mean[j]);
                    }
                }
            }
            cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)`.
///
/// `tr((Σa Σb)^½)` equals the sum of singular values of `Σb^½ Σa^½`; taking
/// it that way keeps near-singular covariances accurate to rounding instead
/// of to its square root.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimMismatch(a.dim(), b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let cross: f64 = (sym_sqrt(&sb) * sym_sqrt(&sa)).singular_values().sum();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * cross)
}

/// Mean end-effector displacement per frame, in data units.
pub fn ees(seq: &MotionSequence, layout: &SkeletonLayout) -> f64 {
    let n = seq.n_frames();
    let mut total = 0.0;
    for &j in &layout.end_effectors {
        for i in 1..n {
            let (a, b) = (seq.frame(i - 1), seq.frame(i));
            total += layout.channels(j).map(|c| (b[c] - a[c]).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (layout.end_effectors.len() * (n - 1)) as f64
}

/// Mean feature distance over up to `pairs` disjoint random pairs.
pub fn diversity(samples: &[&MotionSequence], pairs: usize, featurizer: &Featurizer, rng: &mut Rng) -> Result<f64> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: samples.len() });
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(rng);
    let used = pairs.clamp(1, samples.len() / 2);
    let total: f64 = idx
        .chunks_exact(2)
        .take(used)
        .map(|p| {
            let (a, b) = (featurizer.features(samples[p[0]]), featurizer.features(samples[p[1]]));
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / used as f64)
}

/// Class centroids of reference features.
fn centroids(reference: &[&MotionSequence], n_classes: usize, featurizer: &Featurizer) -> Result<Vec<Vec<f64>>> {
    let mut sums = vec![vec![0.0; FEATURE_DIM]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for s in reference {
        if s.class_id < n_classes {
            for (a, v) in sums[s.class_id].iter_mut().zip(featurizer.features(s)) {
                *a += v;
            }
            counts[s.class_id] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, k))| if k == 0 { Err(EvalError::EmptyClass(c)) } else { Ok(s.into_iter().map(|v| v / k as f64).collect()) })
        .collect()
}

/// Fraction of samples whose features are nearest to the centroid of their
/// own `class_id` among all reference class centroids.
pub fn condition_fidelity(
    samples: &[&MotionSequence],
    reference: &[&MotionSequence],
    n_classes: usize,
    featurizer: &Featurizer,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(EvalError::TooFewSamples { need: 1, got: 0 });
    }
    let cents = centroids(reference, n_classes, featurizer)?;
    let hits = samples
        .iter()
        .filter(|s| {
            let f = featurizer.features(s);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..n_classes).min_by(|&a, &b| dist(&cents[a]).total_cmp(&dist(&cents[b]))).expect("n_classes ≥ 1");
            best == s.class_id
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Multiply-accumulate counts of one denoiser forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCount {
    pub attention_score: u64,
    pub value_mix: u64,
    pub feed_forward: u64,
    pub interpolation: u64,
}

/// Analytic counts for `K` keyframes out of `N` frames; the condition token
/// makes the stack see `K + 1` tokens.
pub fn profile_denoise(config: &DenoiserConfig, n: usize, k: usize) -> Result<OpCount> {
    if k > n {
        return Err(EvalError::BadKeyframeCount { k, n });
    }
    let (l, h, d) = (config.n_layers as u64, config.n_heads as u64, config.d_model as u64);
    let tokens = k as u64 + 1;
    let dh = d / h;
    let attn = l * h * tokens * tokens * dh;
    Ok(OpCount {
        attention_score: attn,
        value_mix: attn,
        feed_forward: l * tokens * 2 * d * config.ffn_dim as u64,
        interpolation: 2 * d * (n - k) as u64,
    })
}

/// Counts read back from a tape that ran one eval-mode forward pass.
pub fn instrumented_counts(params: &DenoiserParams, x_t: &Tensor, mask: &KeyframeMask) -> Result<OpCount> {
    let tape = Tape::no_grad();
    let bound = params.store.bind(&tape);
    denoise_vars(params, &bound, x_t, 1, None, DenoisePath::Sparse(mask), &mut None)?;
    Ok(OpCount {
        attention_score: tape.counts(OpCategory::AttentionScore),
        value_mix: tape.counts(OpCategory::ValueMix),
        feed_forward: tape.counts(OpCategory::FeedForward),
        interpolation: tape.counts(OpCategory::Interpolation),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyframes::uniform_mask;

    fn seq_from(rows: Vec<Vec<f64>>) -> MotionSequence {
        MotionSequence::new(Tensor::from_rows(&rows).unwrap(), 20.0, 0).unwrap()
    }

    fn diag_stats(mean: &[f64], var: &[f64]) -> FeatureStats {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var[i];
        }
        FeatureStats { mean: mean.to_vec(), cov, count: 10 }
    }

    #[test]
    fn static_sequence_has_no_velocity() {
        let s = seq_from(vec![vec![1.0, 2.0]; 8]);
        let f = raw_features(&s);
        assert_eq!(&f[4..6], &[0.0, 0.0]);
        assert_eq!(motion_features(&s), motion_features(&s));
        assert_eq!(motion_features(&s).len(), FEATURE_DIM);
    }

    #[test]
    fn doubled_amplitude_doubles_std() {
        let make = |a: f64| seq_from((0..32).map(|i| vec![a * (i as f64 * 0.4).sin(), 1.0]).collect());
        let (f1, f2) = (raw_features(&make(1.0)), raw_features(&make(2.0)));
        assert!((f2[2] - 2.0 * f1[2]).abs() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = diag_stats(&[0.0, 1.0, 2.0], &[1.0, 2.0, 0.5]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let i = diag_stats(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let shifted = diag_stats(&[1.0, -2.0, 0.5], &[1.0, 1.0, 1.0]);
        assert!((frechet_distance(&i, &shifted).unwrap() - 5.25).abs() < 1e-9);
        let b = diag_stats(&[0.5, 0.0, 2.0], &[4.0, 0.1, 0.5]);
        let expected: f64 = (0..3)
            .map(|j| (a.mean[j] - b.mean[j]).powi(2) + (a.cov[j * 4].sqrt() - b.cov[j * 4].sqrt()).powi(2))
            .sum();
        assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!(matches!(frechet_distance(&a, &diag_stats(&[0.0], &[1.0])), Err(EvalError::DimMismatch(3, 1))));
    }

    #[test]
    fn ees_constant_speed() {
        let layout = SkeletonLayout::default();
        // hand and foot move 2 cm/frame along a 3-4-5 direction scaled to 2
        let s = seq_from(
            (0..10)
                .map(|i| {
                    let mut f = vec![0.0; 10];
                    for j in [3, 4] {
                        f[2 * j] = 1.2 * i as f64;
                        f[2 * j + 1] = 1.6 * i as f64;
                    }
                    f
                })
                .collect(),
        );
        assert!((ees(&s, &layout) - 2.0).abs() < 1e-12);
        assert_eq!(ees(&seq_from(vec![vec![3.0; 10]; 5]), &layout), 0.0);
    }

    #[test]
    fn diversity_cases() {
        let a = seq_from((0..8).map(|i| vec![i as f64, 0.0]).collect());
        let b = seq_from((0..8).map(|i| vec![(i * i) as f64, 1.0]).collect());
        let fz = Featurizer::new(None);
        let mut rng = stream_rng(0, Stream::Eval, 0);
        let d = diversity(&[&a, &b], 1, &fz, &mut rng).unwrap();
        let (fa, fb) = (motion_features(&a), motion_features(&b));
        let exact = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!((d - exact).abs() < 1e-12);
        assert_eq!(diversity(&[&a, &a, &a, &a], 2, &fz, &mut rng).unwrap(), 0.0);
        assert!(matches!(diversity(&[&a], 1, &fz, &mut rng), Err(EvalError::TooFewSamples { .. })));
    }

    #[test]
    fn single_class_fidelity_is_one() {
        let a = seq_from((0..8).map(|i| vec![i as f64, 0.0]).collect());
        assert_eq!(condition_fidelity(&[&a], &[&a], 1, &Featurizer::new(None)).unwrap(), 1.0);
        assert!(matches!(condition_fidelity(&[&a], &[&a], 2, &Featurizer::new(None)), Err(EvalError::EmptyClass(1))));
    }

    #[test]
    fn profile_examples() {
        let cfg = DenoiserConfig::default();
        let dense = profile_denoise(&cfg, 100, 100).unwrap();
        let sparse = profile_denoise(&cfg, 100, 20).unwrap();
        assert_eq!(sparse.attention_score * 101 * 101, dense.attention_score * 21 * 21);
        assert!(profile_denoise(&cfg, 10, 11).is_err());
    }

    #[test]
    fn profile_matches_instrumented_counts() {
        let cfg = DenoiserConfig { d_model: 16, n_layers: 2, n_heads: 4, ffn_dim: 24, ..DenoiserConfig::default() };
        let params = DenoiserParams::init(&cfg, 6, 0).unwrap();
        for rate in [0.0, 0.5, 0.8] {
            let mask = uniform_mask(30, rate).unwrap();
            let x = Tensor::full(&[30, 6], 0.3);
            let got = instrumented_counts(&params, &x, &mask).unwrap();
            assert_eq!(got, profile_denoise(&cfg, 30, mask.count()).unwrap());
        }
    }
}
