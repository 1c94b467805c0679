use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule, Result};
use crate::keyframes::{dynamic_mask_update, KeyframeMask};
use crate::model::{denoise_cfg, DenoiserParams};
use crate::motion::MotionSequence;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Fraction of the steps (counted from t = 1) that use VW masks on the iterate.
    pub gamma: f64,
    pub reduction_rate: f64,
    pub guidance_scale: f64,
    /// Clamp x̂₀ to ±`clamp` in normalized units; `None` disables.
    pub clamp: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { gamma: 0.1, reduction_rate: 0.8, guidance_scale: 2.5, clamp: Some(3.0) }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x₀` in normalized units.
/// `on_mask(t, mask)` sees the keyframe mask chosen at every step.
#[allow(clippy::too_many_arguments)]
pub fn p_sample_loop(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    class: Option<usize>,
    n_frames: usize,
    config: &SamplerConfig,
    rng: &mut Rng,
    mut on_mask: impl FnMut(usize, &KeyframeMask),
) -> Result<Tensor> {
    let d = params.d_motion;
    let gauss = |rng: &mut Rng| -> Result<Tensor> {
        Ok(Tensor::new(&[n_frames, d], (0..n_frames * d).map(|_| StandardNormal.sample(rng)).collect())?)
    };
    let mut x = gauss(rng)?;
    let total = sched.steps();
    for t in (1..=total).rev() {
        let seq = MotionSequence::new(x, 1.0, 0).map_err(|_| DiffusionError::NonFinite(format!("iterate at t = {t}")))?;
        let mask = dynamic_mask_update(&seq, t, total, config.gamma, config.reduction_rate)?;
        on_mask(t, &mask);
        x = seq.into_frames();
        let mut x0_hat = denoise_cfg(params, &x, t, class, &mask, config.guidance_scale)?;
        if !x0_hat.is_finite() {
            return Err(DiffusionError::NonFinite(format!("prediction at t = {t}")));
        }
        if let Some(c) = config.clamp {
            x0_hat = x0_hat.map(|v| v.clamp(-c, c));
        }
        if t == 1 {
            return Ok(x0_hat);
        }
        let mean = sched.posterior_mean(&x0_hat, &x, t)?;
        let sigma = sched.posterior_variance(t).sqrt();
        let z = gauss(rng)?;
        x = mean.zip_map(&z, |m, z| m + sigma * z);
    }
    unreachable!("schedules have at least one step")
}
