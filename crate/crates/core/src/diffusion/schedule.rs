use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{DiffusionError, Result};
use crate::tensor::Tensor;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Per-step variances and their cumulative products. Arrays are indexed by
/// `t − 1` for `t ∈ 1..=T`; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(DiffusionError::NoSteps(steps));
    }
    let t_max = steps as f64;
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |t: f64| (((t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA)).collect()
        }
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_max;
            let (start, end) = (1e-4 * scale, (0.02 * scale).min(MAX_BETA));
            if steps == 1 {
                vec![end]
            } else {
                (0..steps).map(|i| start + (end - start) * i as f64 / (t_max - 1.0)).collect()
            }
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let posterior_vars = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
        })
        .collect();
    Ok(NoiseSchedule { kind, betas, alphas, alpha_bars, posterior_vars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn q_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let (a, b) = self.q_coefficients(t)?;
        if x0.shape() != noise.shape() {
            return Err(DiffusionError::NoiseShape { noise: noise.shape().to_vec(), sample: x0.shape().to_vec() });
        }
        Ok(x0.zip_map(noise, |x, e| a * x + b * e))
    }

    /// Mean of q(x_{t−1} | x_t, x̂₀).
    pub fn posterior_mean(&self, x0_hat: &Tensor, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t)?;
        let (ab, ab_prev, beta) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok(x0_hat.zip_map(x_t, |x0, xt| c0 * x0 + ct * xt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [ScheduleKind; 2] = [ScheduleKind::Cosine, ScheduleKind::Linear];

    #[test]
    fn rejects_zero_steps() {
        assert_eq!(make_schedule(0, ScheduleKind::Cosine), Err(DiffusionError::NoSteps(0)));
    }

    #[test]
    fn cosine_fifty_ends_near_pure_noise() {
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar(50) < 0.01);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn betas_strictly_increase_and_stay_in_unit_interval() {
        for kind in KINDS {
            for steps in [10, 50, 100, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                assert!(s.betas().windows(2).all(|w| w[0] < w[1]), "{kind:?} T={steps}");
                assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
                assert!(s.alpha_bar(steps) < 0.01, "{kind:?} T={steps}: {}", s.alpha_bar(steps));
            }
        }
    }

    #[test]
    fn closed_form_matches_sequential_accumulation() {
        for kind in KINDS {
            for steps in [10, 50, 100, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                let (mut scale, mut var) = (1.0f64, 0.0f64);
                for t in 1..=steps {
                    let b = s.beta(t);
                    scale *= (1.0 - b).sqrt();
                    var = (1.0 - b) * var + b;
                    let (a, sd) = s.q_coefficients(t).unwrap();
                    assert!((a - scale).abs() <= 1e-12);
                    assert!((sd * sd - var).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let xt = s.q_sample(&x0, 4, &zero).unwrap();
        let k = s.alpha_bar(4).sqrt();
        assert_eq!(xt, x0.map(|v| k * v));
        assert!(matches!(s.q_sample(&x0, 0, &zero), Err(DiffusionError::StepOutOfRange { t: 0, steps: 10 })));
        assert!(matches!(s.q_sample(&x0, 11, &zero), Err(DiffusionError::StepOutOfRange { .. })));
        assert!(matches!(s.q_sample(&x0, 1, &Tensor::zeros(&[2, 3])), Err(DiffusionError::NoiseShape { .. })));
    }

    #[test]
    fn first_step_posterior_returns_prediction() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x0 = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let xt = Tensor::new(&[1, 2], vec![5.0, 5.0]).unwrap();
        let mu = s.posterior_mean(&x0, &xt, 1).unwrap();
        for (m, e) in mu.data().iter().zip(x0.data()) {
            assert!((m - e).abs() < 1e-12);
        }
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn single_step_schedules() {
        for kind in KINDS {
            let s = make_schedule(1, kind).unwrap();
            assert_eq!(s.steps(), 1);
            assert!(s.beta(1) > 0.0 && s.beta(1) < 1.0);
        }
    }
}
