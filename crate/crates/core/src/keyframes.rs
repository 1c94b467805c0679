//! Keyframe masks: Visvalingam-Whyatt priority over frame features, uniform
//! spacing, mask-noise augmentation and the sampling-time schedule.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::motion::MotionSequence;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KeyframeError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("reduction rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("points must share one dimension ≥ 2: {0}")]
    BadFeatures(String),
}

/// One point per frame: the flattened pose with the frame index appended.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    points: Vec<Vec<f64>>,
}

impl FrameFeatures {
    /// Wraps arbitrary points (no index column is added).
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self, KeyframeError> {
        let f = points.first().map_or(0, Vec::len);
        if f < 2 || points.iter().any(|p| p.len() != f) {
            return Err(KeyframeError::BadFeatures(format!("{} points of dim {f}", points.len())));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn point(&self, n: usize) -> &[f64] {
        &self.points[n]
    }
}

/// Concatenates each frame with its frame index multiplied by `index_scale`
/// (1.0 appends the raw index).
pub fn build_frame_features_scaled(motion: &MotionSequence, index_scale: f64) -> FrameFeatures {
    let points = (0..motion.n_frames())
        .map(|n| {
            let mut p = motion.frame(n).to_vec();
            p.push(n as f64 * index_scale);
            p
        })
        .collect();
    FrameFeatures { points }
}

pub fn build_frame_features(motion: &MotionSequence) -> FrameFeatures {
    build_frame_features_scaled(motion, 1.0)
}

/// Area of the triangle (prev, cur, next) in any dimension:
/// `½·sqrt(‖a‖²‖b‖² − (a·b)²)` with `a = cur − prev`, `b = next − prev`.
///
/// The Gram determinant is summed as `Σ_{i<j} (a_i b_j − a_j b_i)²`
/// (Lagrange's identity), which avoids the cancellation of the direct form
/// on nearly collinear triples.
pub fn effective_area(prev: &[f64], cur: &[f64], next: &[f64]) -> f64 {
    let a: Vec<f64> = cur.iter().zip(prev).map(|(c, p)| c - p).collect();
    let b: Vec<f64> = next.iter().zip(prev).map(|(n, p)| n - p).collect();
    let mut gram = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let m = a[i] * b[j] - a[j] * b[i];
            gram += m * m;
        }
    }
    0.5 * gram.sqrt()
}

/// Interior removal order with the effective area each vertex had when removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityList {
    pub n_frames: usize,
    pub order: Vec<usize>,
    pub areas: Vec<f64>,
}

#[derive(PartialEq)]
struct Candidate {
    area: f64,
    index: usize,
    version: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // min-heap on (area, index)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .area
            .total_cmp(&self.area)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Visvalingam-Whyatt: repeatedly remove the interior vertex of least
/// effective area (ties to the lowest index), reconnecting its neighbors and
/// recomputing their areas, until only the endpoints remain.
pub fn vw_priority(features: &FrameFeatures) -> Result<PriorityList, KeyframeError> {
    let n = features.len();
    if n < 2 {
        return Err(KeyframeError::TooFewFrames(n));
    }
    let mut prev: Vec<usize> = (0..n).map(|i| i.saturating_sub(1)).collect();
    let mut next: Vec<usize> = (0..n).map(|i| (i + 1).min(n - 1)).collect();
    let mut version = vec![0u32; n];
    let area_of = |i: usize, prev: &[usize], next: &[usize]| {
        effective_area(features.point(prev[i]), features.point(i), features.point(next[i]))
    };
    let mut heap: BinaryHeap<Candidate> = (1..n - 1)
        .map(|i| Candidate { area: area_of(i, &prev, &next), index: i, version: 0 })
        .collect();
    let mut order = Vec::with_capacity(n.saturating_sub(2));
    let mut areas = Vec::with_capacity(n.saturating_sub(2));
    while let Some(c) = heap.pop() {
        if c.version != version[c.index] {
            continue;
        }
        let i = c.index;
        order.push(i);
        areas.push(c.area);
        version[i] = u32::MAX;
        let (p, q) = (prev[i], next[i]);
        next[p] = q;
        prev[q] = p;
        for j in [p, q] {
            if j != 0 && j != n - 1 {
                version[j] += 1;
                heap.push(Candidate { area: area_of(j, &prev, &next), index: j, version: version[j] });
            }
        }
    }
    Ok(PriorityList { n_frames: n, order, areas })
}

/// Binary keyframe indicator; both endpoints are always set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyframeMask {
    bits: Vec<bool>,
}

impl KeyframeMask {
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, KeyframeError> {
        let n = bits.len();
        if n < 2 {
            return Err(KeyframeError::TooFewFrames(n));
        }
        if !bits[0] || !bits[n - 1] {
            return Err(KeyframeError::InvalidMask("endpoints must be keyframes".into()));
        }
        Ok(Self { bits })
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self, KeyframeError> {
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(KeyframeError::InvalidMask(format!("index {i} ≥ {n}")));
            }
            bits[i] = true;
        }
        Self::from_bits(bits)
    }

    pub fn full(n: usize) -> Result<Self, KeyframeError> {
        Self::from_bits(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Keyframe count K.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_keyframe(&self, n: usize) -> bool {
        self.bits[n]
    }

    /// Sorted keyframe indices.
    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }
}

fn check_rate(rate: f64) -> Result<(), KeyframeError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(KeyframeError::BadRate(rate));
    }
    Ok(())
}

/// `max(2, round(N·(1 − rate)))`, never more than N.
pub fn keyframe_count(n: usize, rate: f64) -> usize {
    ((n as f64 * (1.0 - rate)).round() as usize).max(2).min(n)
}

/// Endpoints plus the interior frames removed last by VW.
pub fn select_from_priority(priority: &PriorityList, rate: f64) -> Result<KeyframeMask, KeyframeError> {
    check_rate(rate)?;
    let n = priority.n_frames;
    let k = keyframe_count(n, rate);
    let mut bits = vec![false; n];
    bits[0] = true;
    bits[n - 1] = true;
    for &i in &priority.order[priority.order.len() - (k - 2)..] {
        bits[i] = true;
    }
    KeyframeMask::from_bits(bits)
}

pub fn select_keyframes(features: &FrameFeatures, rate: f64) -> Result<KeyframeMask, KeyframeError> {
    check_rate(rate)?;
    select_from_priority(&vw_priority(features)?, rate)
}

/// Evenly spaced keyframes: `round(linspace(0, N−1, K))`, bumped upward on collision.
pub fn uniform_mask(n: usize, rate: f64) -> Result<KeyframeMask, KeyframeError> {
    if n < 2 {
        return Err(KeyframeError::TooFewFrames(n));
    }
    check_rate(rate)?;
    let k = keyframe_count(n, rate);
    let mut bits = vec![false; n];
    let mut floor = 0;
    for i in 0..k {
        let pos = ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize;
        let mut idx = pos.max(floor);
        while bits[idx] {
            idx += 1;
        }
        bits[idx] = true;
        floor = idx + 1;
    }
    KeyframeMask::from_bits(bits)
}

/// Largest value strictly below 1.
const RATE_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Training-time augmentation: jitter the reduction rate by `ε ~ U(−δ, δ)`.
pub fn perturb_mask(priority: &PriorityList, base_rate: f64, delta: f64, rng: &mut Rng) -> Result<KeyframeMask, KeyframeError> {
    if !(0.0..=0.2).contains(&delta) {
        return Err(KeyframeError::BadRate(delta));
    }
    let eps = if delta > 0.0 { rng.random_range(-delta..=delta) } else { 0.0 };
    let rate = (base_rate + eps).clamp(0.0, RATE_CEIL);
    select_from_priority(priority, rate)
}

/// Whether step `t` of `total` falls in the refinement regime `t ≤ γ·T`.
pub fn in_refinement(t: usize, total: usize, gamma: f64) -> bool {
    (t as f64) <= gamma * total as f64 + 1e-9
}

/// Sampling-time mask: uniform while `t > γ·T`, then VW on the current iterate.
pub fn dynamic_mask_update(
    x_t: &MotionSequence,
    t: usize,
    total: usize,
    gamma: f64,
    rate: f64,
) -> Result<KeyframeMask, KeyframeError> {
    if in_refinement(t, total, gamma) {
        select_keyframes(&build_frame_features(x_t), rate)
    } else {
        uniform_mask(x_t.n_frames(), rate)
    }
}
