//! Motion sequences and the procedural, class-labeled generator used as the
//! training corpus.
//!
//! Joint 0 is the root in world coordinates; the remaining joints are
//! stored relative to the root. Coordinates are centimeters, `x` forward and
//! `y` up (and `z` lateral when the layout has arity 3).

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotionError {
    #[error("a motion needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("motion has {got} values per frame, layout expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("motion contains a non-finite value at frame {frame}, channel {channel}")]
    NonFinite { frame: usize, channel: usize },
    #[error("unknown class `{name}`; valid classes: {}", valid.join(", "))]
    UnknownClass { name: String, valid: Vec<String> },
    #[error("class id {id} out of range for {count} classes")]
    ClassOutOfRange { id: usize, count: usize },
    #[error("invalid skeleton layout: {0}")]
    Layout(String),
    #[error("{0}")]
    Invalid(String),
}

/// Dense `N × D` motion with its frame rate and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    pub fps: f64,
    pub class_id: usize,
    pub name: Option<String>,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f64, class_id: usize) -> Result<Self, MotionError> {
        if frames.rank() != 2 {
            return Err(MotionError::Invalid(format!("frames must be N×D, got {:?}", frames.shape())));
        }
        let (n, d) = (frames.shape()[0], frames.shape()[1]);
        if n < 2 {
            return Err(MotionError::TooFewFrames(n));
        }
        if let Some(pos) = frames.data().iter().position(|v| !v.is_finite()) {
            return Err(MotionError::NonFinite { frame: pos / d, channel: pos % d });
        }
        Ok(Self { frames, fps, class_id, name: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        self.frames.row(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonLayout {
    pub joints: usize,
    pub arity: usize,
    pub end_effectors: Vec<usize>,
}

impl Default for SkeletonLayout {
    /// Five planar joints: root, chest, head, hand, foot.
    fn default() -> Self {
        Self { joints: 5, arity: 2, end_effectors: vec![3, 4] }
    }
}

impl SkeletonLayout {
    pub fn dim(&self) -> usize {
        self.joints * self.arity
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if !(2..=3).contains(&self.arity) {
            return Err(MotionError::Layout(format!("arity must be 2 or 3, got {}", self.arity)));
        }
        if let Some(&e) = self.end_effectors.iter().find(|&&e| e >= self.joints) {
            return Err(MotionError::Layout(format!("end effector {e} ≥ joint count {}", self.joints)));
        }
        Ok(())
    }

    /// Channel range of joint `j`.
    pub fn channels(&self, j: usize) -> std::ops::Range<usize> {
        j * self.arity..(j + 1) * self.arity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Walk,
    Run,
    Jump,
    Wave,
    Circle,
    Zigzag,
}

impl MotionClass {
    pub const ALL: [MotionClass; 6] = [
        MotionClass::Walk,
        MotionClass::Run,
        MotionClass::Jump,
        MotionClass::Wave,
        MotionClass::Circle,
        MotionClass::Zigzag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Walk => "walk",
            MotionClass::Run => "run",
            MotionClass::Jump => "jump",
            MotionClass::Wave => "wave",
            MotionClass::Circle => "circle",
            MotionClass::Zigzag => "zigzag",
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self, MotionError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(MotionError::ClassOutOfRange { id, count: Self::ALL.len() })
    }

    pub fn from_name(name: &str) -> Result<Self, MotionError> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| MotionError::UnknownClass { name: name.to_string(), valid: Self::names() })
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }

    /// Base cycle frequency in Hz before per-sample jitter.
    fn base_frequency(self) -> f64 {
        match self {
            MotionClass::Walk => 1.0,
            MotionClass::Run => 1.6,
            MotionClass::Jump => 0.5,
            MotionClass::Wave => 1.5,
            MotionClass::Circle => 0.7,
            MotionClass::Zigzag => 0.5,
        }
    }

    /// Upper bound on any channel's per-frame displacement (cm/frame) at 20 fps
    /// with the given noise level.
    pub fn speed_bound(self, fps: f64, noise_sigma: f64) -> f64 {
        // largest amplitude·angular-frequency product over the class's terms,
        // evaluated at the top of the jitter range
        let w = TAU * self.base_frequency() * 1.1;
        let per_second = match self {
            MotionClass::Walk => (35.0 * 1.1 * w).max(121.0),
            MotionClass::Run => (55.0 * 1.1 * w).max(352.0),
            MotionClass::Jump => 60.0 * 1.1 * PI + 33.0,
            MotionClass::Wave => 25.0 * 1.1 * w,
            MotionClass::Circle => 30.0 * 1.1 * w,
            MotionClass::Zigzag => (60.0 * 1.1 * w * 2.0 / PI).max(25.0 * 1.1 * TAU * 1.32),
        };
        per_second / fps + 12.0 * noise_sigma
    }
}

/// Generator knobs shared by a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub fps: f64,
    /// Standard deviation (cm) of the smooth additive noise.
    pub noise_sigma: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { fps: 20.0, noise_sigma: 0.5 }
    }
}

/// Per-sample jitter drawn once per sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    pub class: MotionClass,
    pub speed: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl ClassParams {
    pub fn draw(class: MotionClass, rng: &mut Rng) -> Self {
        Self {
            class,
            speed: rng.random_range(0.9..1.1),
            amplitude: rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..TAU),
        }
    }

    pub fn frequency(&self) -> f64 {
        self.class.base_frequency() * self.speed
    }

    /// Length of one limb cycle in frames.
    pub fn period_frames(&self, fps: f64) -> f64 {
        fps / self.frequency()
    }

    /// Noise-free joint positions `[root, chest, head, hand, foot]` as (x, y, z).
    fn pose(&self, n: usize, n_frames: usize, fps: f64) -> [[f64; 3]; 5] {
        let tau = n as f64 / fps;
        let (a, s, phi) = (self.amplitude, self.speed, self.phase);
        let th = TAU * self.frequency() * tau + phi;
        let u = if n_frames > 1 { n as f64 / (n_frames - 1) as f64 } else { 0.0 };
        let sway = 1.5 * a * th.sin();
        match self.class {
            MotionClass::Walk | MotionClass::Run => {
                let run = self.class == MotionClass::Run;
                let (v, bob, hand, foot, lift, lean) =
                    if run { (320.0, 5.0, 35.0, 50.0, 20.0, 8.0) } else { (110.0, 2.0, 20.0, 30.0, 8.0, 0.0) };
                [
                    [v * s * tau, 95.0 + bob * a * (2.0 * th).sin(), sway],
                    [lean + 2.0 * a * th.sin(), 45.0, 0.0],
                    [lean * 1.5 + 3.0 * a * th.sin(), 70.0 + a * (2.0 * th).sin(), 0.0],
                    [hand * a * th.sin(), 20.0 + 5.0 * a * th.cos(), 0.0],
                    [foot * a * (th + PI).sin(), -90.0 + lift * a * 0.5 * (1.0 - th.cos()), 0.0],
                ]
            }
            MotionClass::Jump => {
                let arc = (PI * u).sin();
                [
                    [30.0 * s * tau, 95.0 + 40.0 * a * arc, 0.0],
                    [0.0, 45.0 - 5.0 * a * (1.0 - arc), 0.0],
                    [0.0, 70.0 - 5.0 * a * (1.0 - arc), 0.0],
                    [10.0 + 3.0 * a * th.sin(), 30.0 + 30.0 * a * arc, 0.0],
                    [2.0 * a * th.sin(), -90.0 + 10.0 * a * arc, 0.0],
                ]
            }
            MotionClass::Wave => [
                [2.0 * a * (0.5 * th).sin(), 95.0, 0.0],
                [0.0, 45.0, 0.0],
                [0.0, 70.0, 0.0],
                [15.0 + 20.0 * a * th.sin(), 65.0 + 5.0 * a * (2.0 * th).cos(), sway],
                [0.0, -90.0, 0.0],
            ],
            MotionClass::Circle => [
                [0.0, 95.0, 0.0],
                [3.0 * a * th.cos(), 45.0, 0.0],
                [2.0 * a * th.cos(), 70.0, 0.0],
                [25.0 * a * th.cos(), 35.0 + 25.0 * a * th.sin(), sway],
                [0.0, -90.0, 0.0],
            ],
            MotionClass::Zigzag => {
                // triangle wave in [-1, 1]
                let tri = 2.0 / PI * th.sin().asin();
                let step = TAU * 1.2 * s * tau + phi;
                [
                    [60.0 * a * tri, 95.0 + 2.0 * a * (2.0 * step).sin(), 0.0],
                    [0.0, 45.0, 0.0],
                    [0.0, 70.0, 0.0],
                    [15.0 * a * step.sin(), 20.0, 0.0],
                    [25.0 * a * (step + PI).sin(), -90.0, 0.0],
                ]
            }
        }
    }
}

/// Generates one labeled sequence of `n_frames` frames.
pub fn gen_class_motion(
    class: MotionClass,
    n_frames: usize,
    layout: &SkeletonLayout,
    opts: &GenOptions,
    rng: &mut Rng,
) -> Result<MotionSequence, MotionError> {
    let params = ClassParams::draw(class, rng);
    gen_with_params(&params, n_frames, layout, opts, rng)
}

pub fn gen_with_params(
    params: &ClassParams,
    n_frames: usize,
    layout: &SkeletonLayout,
    opts: &GenOptions,
    rng: &mut Rng,
) -> Result<MotionSequence, MotionError> {
    layout.validate()?;
    if layout.joints != 5 {
        return Err(MotionError::Layout(format!("the generator drives exactly 5 joints, layout has {}", layout.joints)));
    }
    if n_frames < 2 {
        return Err(MotionError::TooFewFrames(n_frames));
    }
    let d = layout.dim();
    let mut data = Vec::with_capacity(n_frames * d);
    for n in 0..n_frames {
        for joint in params.pose(n, n_frames, opts.fps) {
            data.extend_from_slice(&joint[..layout.arity]);
        }
    }
    if opts.noise_sigma > 0.0 {
        add_smooth_noise(&mut data, n_frames, d, opts.noise_sigma, rng);
    }
    let frames = Tensor::new(&[n_frames, d], data).expect("shape by construction");
    MotionSequence::new(frames, opts.fps, params.class.id())
}

const NOISE_WINDOW: usize = 5;

/// White noise box-filtered over `NOISE_WINDOW` frames, rescaled to `sigma`.
fn add_smooth_noise(data: &mut [f64], n: usize, d: usize, sigma: f64, rng: &mut Rng) {
    let len = n + NOISE_WINDOW - 1;
    let gain = sigma / (NOISE_WINDOW as f64).sqrt();
    for c in 0..d {
        let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for t in 0..n {
            let s: f64 = white[t..t + NOISE_WINDOW].iter().sum();
            data[t * d + c] += gain * s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Per-channel z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Self {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let seqs: Vec<&MotionSequence> = seqs.into_iter().collect();
        for s in &seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
            }
            for row in s.frames().data().chunks(s.dim()) {
                for (a, v) in sum.iter_mut().zip(row) {
                    *a += v;
                }
                count += 1;
            }
        }
        let d = sum.len();
        let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
        let mut var = vec![0.0; d];
        for s in &seqs {
            for row in s.frames().data().chunks(d) {
                for ((a, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count.max(1) as f64).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, frames: &Tensor) -> Tensor {
        let d = frames.cols();
        let mut out = frames.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, frames: &Tensor) -> Tensor {
        let d = frames.cols();
        let mut out = frames.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// Labeled corpus with its split and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: SkeletonLayout,
    pub fps: f64,
    pub classes: Vec<String>,
    pub stats: NormStats,
    pub sequences: Vec<MotionSequence>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &MotionSequence> {
        self.sequences.iter().zip(&self.splits).filter(|(_, s)| **s == Split::Train).map(|(q, _)| q)
    }

    pub fn val(&self) -> impl Iterator<Item = &MotionSequence> {
        self.sequences.iter().zip(&self.splits).filter(|(_, s)| **s == Split::Val).map(|(q, _)| q)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }
}

/// Generates `n_per_class` sequences for each class and splits them 90/10.
pub fn make_dataset(
    n_per_class: usize,
    n_frames: usize,
    layout: &SkeletonLayout,
    opts: &GenOptions,
    seed: u64,
) -> Result<Dataset, MotionError> {
    if n_per_class == 0 {
        return Err(MotionError::Invalid("sequences per class must be at least 1".into()));
    }
    let mut sequences = Vec::with_capacity(n_per_class * MotionClass::ALL.len());
    for class in MotionClass::ALL {
        for i in 0..n_per_class {
            let mut rng = stream_rng(seed, Stream::Data, (class.id() * n_per_class + i) as u64);
            let seq = gen_class_motion(class, n_frames, layout, opts, &mut rng)?
                .with_name(format!("{}_{i:04}", class.name()));
            sequences.push(seq);
        }
    }
    let total = sequences.len();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Data, 1 << 47));
    let n_train = total * 9 / 10;
    let mut splits = vec![Split::Val; total];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    let stats = NormStats::fit(sequences.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).map(|(q, _)| q));
    Ok(Dataset {
        layout: layout.clone(),
        fps: opts.fps,
        classes: MotionClass::names(),
        stats,
        sequences,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(class: MotionClass, seed: u64, sigma: f64) -> (MotionSequence, ClassParams) {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        let p = ClassParams::draw(class, &mut rng);
        let opts = GenOptions { noise_sigma: sigma, ..GenOptions::default() };
        (gen_with_params(&p, 64, &SkeletonLayout::default(), &opts, &mut rng).unwrap(), p)
    }

    #[test]
    fn walk_limbs_are_periodic_without_noise() {
        let (seq, p) = gen(MotionClass::Walk, 3, 0.0);
        let period = p.period_frames(20.0);
        let hand_x: Vec<f64> = (0..seq.n_frames()).map(|n| seq.frame(n)[6]).collect();
        let mean = hand_x.iter().sum::<f64>() / hand_x.len() as f64;
        let centered: Vec<f64> = hand_x.iter().map(|v| v - mean).collect();
        // autocorrelation over one period either side of the expected first peak
        let ac = |lag: usize| {
            let m = centered.len() - lag;
            (0..m).map(|i| centered[i] * centered[i + lag]).sum::<f64>() / m as f64
        };
        let lags = (period / 2.0).ceil() as usize..(1.5 * period) as usize;
        let best = lags.max_by(|&a, &b| ac(a).partial_cmp(&ac(b)).unwrap()).unwrap();
        assert!((best as f64 - period).abs() <= 1.0, "peak at {best}, period {period}");
    }

    #[test]
    fn same_seed_same_sequence() {
        assert_eq!(gen(MotionClass::Run, 9, 0.5).0, gen(MotionClass::Run, 9, 0.5).0);
    }

    #[test]
    fn jump_peaks_inside() {
        let (seq, _) = gen(MotionClass::Jump, 1, 0.0);
        let y: Vec<f64> = (0..seq.n_frames()).map(|n| seq.frame(n)[1]).collect();
        let argmax = (0..y.len()).max_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap()).unwrap();
        assert!(argmax > 0 && argmax < y.len() - 1);
    }

    #[test]
    fn unknown_class_lists_valid_names() {
        let err = MotionClass::from_name("dance").unwrap_err().to_string();
        assert!(err.contains("walk") && err.contains("zigzag"), "{err}");
    }

    #[test]
    fn dataset_counts_and_normalization() {
        let ds = make_dataset(10, 32, &SkeletonLayout::default(), &GenOptions::default(), 5).unwrap();
        assert_eq!(ds.sequences.len(), 60);
        assert_eq!(ds.train().count(), 54);
        assert_eq!(ds.val().count(), 6);
        let d = ds.dim();
        let normed: Vec<Tensor> = ds.train().map(|s| ds.stats.normalize(s.frames())).collect();
        for c in 0..d {
            let vals: Vec<f64> = normed.iter().flat_map(|t| (0..t.shape()[0]).map(move |n| t.get(n, c))).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-9, "channel {c} mean {m}");
            assert!((sd - 1.0).abs() < 1e-9 || ds.stats.std[c] == 1.0, "channel {c} std {sd}");
        }
    }

    #[test]
    fn rejects_short_motion() {
        assert_eq!(
            MotionSequence::new(Tensor::zeros(&[1, 2]), 20.0, 0).unwrap_err(),
            MotionError::TooFewFrames(1)
        );
    }
}
