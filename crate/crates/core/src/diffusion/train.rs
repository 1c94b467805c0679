use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{optimizer_step, AdamState, DiffusionError, NoiseSchedule, Result};
use crate::keyframes::{build_frame_features, perturb_mask, vw_priority, KeyframeMask, PriorityList};
use crate::lipschitz::lipschitz_loss_vars;
use crate::model::{denoise_vars, DenoisePath, DenoiserParams, Dropout, IN_MLP, OUT_MLP};
use crate::motion::{Dataset, MotionSequence};
use crate::parallel::par_map;
use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Half-width δ of the reduction-rate jitter.
    pub mask_noise: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, lr: 2e-3, mask_noise: 0.05, checkpoint_every: 500 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DiffusionError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DiffusionError::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(0.0..=0.2).contains(&self.mask_noise) {
            return Err(DiffusionError::Config(format!("mask_noise = {} outside [0, 0.2]", self.mask_noise)));
        }
        Ok(())
    }
}

/// A normalized training sequence with its cached VW removal order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x0: Tensor,
    pub class: usize,
    pub priority: PriorityList,
}

/// Normalizes the train split and precomputes each sequence's VW priority.
pub fn prepare_examples(ds: &Dataset) -> Result<Vec<TrainingExample>> {
    ds.train()
        .map(|s| {
            let x0 = ds.stats.normalize(s.frames());
            let seq = MotionSequence::new(x0.clone(), s.fps, s.class_id)?;
            let priority = vw_priority(&build_frame_features(&seq))?;
            Ok(TrainingExample { x0, class: s.class_id, priority })
        })
        .collect()
}

/// Everything random about one sample of one step.
#[derive(Debug, Clone)]
pub struct StepDraw {
    pub t: usize,
    pub noise: Tensor,
    pub mask: KeyframeMask,
    /// `None` when the condition was dropped for guidance training.
    pub class: Option<usize>,
    pub dropout_rng: Rng,
}

/// Draws t, ε, the jittered mask and the condition drop for one example.
pub fn draw_for(
    example: &TrainingExample,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    mask_noise: f64,
    rng: &mut Rng,
    mask_rng: &mut Rng,
) -> Result<StepDraw> {
    let cfg = &params.config;
    let t = rng.random_range(1..=sched.steps());
    let shape = example.x0.shape();
    let noise = Tensor::new(shape, (0..example.x0.numel()).map(|_| StandardNormal.sample(rng)).collect())?;
    let mask = if cfg.reduction_rate > 0.0 {
        perturb_mask(&example.priority, cfg.reduction_rate, mask_noise, mask_rng)?
    } else {
        KeyframeMask::full(shape[0])?
    };
    let class = if rng.random::<f64>() < cfg.cfg_dropout { None } else { Some(example.class) };
    let dropout_rng = stream_rng(rng.random(), Stream::Train, 0);
    Ok(StepDraw { t, noise, mask, class, dropout_rng })
}

/// Mean squared error over all N·D elements.
pub fn reconstruction_loss<'t>(x0: &Tensor, x0_hat: Var<'t>) -> Result<Var<'t>> {
    let target = x0_hat.tape().constant(x0.clone());
    Ok(x0_hat.sub(target)?.square().mean())
}

/// Whether the loss runs through the keyframe path or the dense transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPath {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Tensor>,
    /// Keyframe count used by each sample.
    pub keyframes: Vec<usize>,
}

fn sample_grads(
    params: &DenoiserParams,
    example: &TrainingExample,
    draw: &StepDraw,
    sched: &NoiseSchedule,
    path: LossPath,
    weight: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = params.store.bind(&tape);
    let x_t = sched.q_sample(&example.x0, draw.t, &draw.noise)?;
    let mut rng = draw.dropout_rng.clone();
    let mut dropout = (params.config.dropout > 0.0).then(|| Dropout { p: params.config.dropout, rng: &mut rng });
    let path = match path {
        LossPath::Sparse => DenoisePath::Sparse(&draw.mask),
        LossPath::Dense => DenoisePath::Dense,
    };
    let x0_hat = denoise_vars(params, &bound, &x_t, draw.t, draw.class, path, &mut dropout)?;
    let loss = reconstruction_loss(&example.x0, x0_hat)?.scale(weight);
    let value = loss.item();
    if !value.is_finite() {
        return Err(DiffusionError::NonFinite("training loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Batch objective `mean_b MSE_b + λ·(L_in + L_out)` and its gradient.
/// Per-sample work fans out over `threads`; the reduction runs in sample
/// order, so the result does not depend on the thread count.
pub fn batch_loss(
    params: &DenoiserParams,
    examples: &[&TrainingExample],
    draws: &[StepDraw],
    sched: &NoiseSchedule,
    path: LossPath,
    threads: usize,
) -> Result<StepOutput> {
    if examples.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    assert_eq!(examples.len(), draws.len(), "one draw per example");
    let weight = 1.0 / examples.len() as f64;
    let pairs: Vec<(&TrainingExample, &StepDraw)> = examples.iter().copied().zip(draws).collect();
    let parts = par_map(&pairs, threads, |_, (ex, d)| sample_grads(params, ex, d, sched, path, weight));

    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = params.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }

    let lambda = params.config.lambda;
    if lambda > 0.0 {
        let tape = Tape::new();
        let bound = params.store.bind(&tape);
        let lin = lipschitz_loss_vars(&params.lipschitz_layers(&bound, IN_MLP)?)?;
        let lout = lipschitz_loss_vars(&params.lipschitz_layers(&bound, OUT_MLP)?)?;
        let reg = lin.add(lout)?.scale(lambda);
        loss += reg.item();
        let mut g = tape.backward(reg)?;
        for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.take(v).data()) {
                *a += b;
            }
        }
    }
    let keyframes = draws
        .iter()
        .map(|d| match path {
            LossPath::Sparse => d.mask.count(),
            LossPath::Dense => d.mask.len(),
        })
        .collect();
    Ok(StepOutput { loss, grads, keyframes })
}

/// Draws and evaluates one training step on `batch`. Sample `i` of step `s`
/// uses sub-stream `s·B + i` of the train and mask streams.
pub fn training_step(
    params: &DenoiserParams,
    batch: &[&TrainingExample],
    sched: &NoiseSchedule,
    mask_noise: f64,
    seed: u64,
    step: usize,
    threads: usize,
) -> Result<StepOutput> {
    let base = (step * batch.len()) as u64;
    let draws = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = stream_rng(seed, Stream::Train, base + i as u64);
            let mut mask_rng = stream_rng(seed, Stream::Mask, base + i as u64);
            draw_for(ex, params, sched, mask_noise, &mut rng, &mut mask_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_loss(params, batch, &draws, sched, LossPath::Sparse, threads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: usize,
    pub loss: f64,
    pub keyframes_mean: f64,
}

/// Owns the optimizer state and drives training one step at a time.
pub struct Trainer {
    pub params: DenoiserParams,
    pub adam: AdamState,
    examples: Vec<TrainingExample>,
    sched: NoiseSchedule,
    config: TrainConfig,
    seed: u64,
    step: usize,
    threads: usize,
}

const BATCH_STREAM: u64 = 1 << 47;

impl Trainer {
    pub fn new(
        params: DenoiserParams,
        examples: Vec<TrainingExample>,
        sched: NoiseSchedule,
        config: TrainConfig,
        seed: u64,
        threads: usize,
    ) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(DiffusionError::EmptyBatch);
        }
        let adam = AdamState::new(&params.store);
        Ok(Self { params, adam, examples, sched, config, seed, step: 0, threads })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let mut rng = stream_rng(self.seed, Stream::Train, BATCH_STREAM + self.step as u64);
        let batch: Vec<&TrainingExample> = (0..self.config.batch_size)
            .map(|_| &self.examples[rng.random_range(0..self.examples.len())])
            .collect();
        let out = training_step(&self.params, &batch, &self.sched, self.config.mask_noise, self.seed, self.step, self.threads)?;
        if out.grads.iter().any(|g| !g.is_finite()) {
            return Err(DiffusionError::NonFinite(format!("gradients at step {}", self.step + 1)));
        }
        optimizer_step(&mut self.params.store, &out.grads, &mut self.adam, self.config.lr);
        self.step += 1;
        let keyframes_mean = out.keyframes.iter().sum::<usize>() as f64 / out.keyframes.len() as f64;
        Ok(StepReport { step: self.step, loss: out.loss, keyframes_mean })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{make_schedule, ScheduleKind};
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::motion::{make_dataset, GenOptions, SkeletonLayout};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig { d_model: 16, n_layers: 1, n_heads: 2, ffn_dim: 16, fsq_levels: vec![], ..DenoiserConfig::default() }
    }

    fn tiny_examples() -> Vec<TrainingExample> {
        let ds = make_dataset(2, 16, &SkeletonLayout::default(), &GenOptions::default(), 5).unwrap();
        prepare_examples(&ds).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let tape = Tape::new();
        let x0 = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = reconstruction_loss(&x0, tape.constant(x0.clone())).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn zero_output_on_unit_gaussian_costs_about_one() {
        let mut rng = stream_rng(0, Stream::Eval, 0);
        let x0 = Tensor::new(&[100, 100], (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let tape = Tape::no_grad();
        let loss = reconstruction_loss(&x0, tape.constant(Tensor::zeros(&[100, 100]))).unwrap().item();
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
    }

    #[test]
    fn one_step_lowers_same_batch_loss() {
        let params = DenoiserParams::init(&tiny_config(), 10, 0).unwrap();
        let examples = tiny_examples();
        let batch: Vec<&TrainingExample> = examples.iter().take(4).collect();
        let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let draws: Vec<StepDraw> = batch
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut r = stream_rng(1, Stream::Train, i as u64);
                let mut m = stream_rng(1, Stream::Mask, i as u64);
                draw_for(ex, &params, &sched, 0.05, &mut r, &mut m).unwrap()
            })
            .collect();
        let before = batch_loss(&params, &batch, &draws, &sched, LossPath::Sparse, 1).unwrap();
        assert!(before.loss >= 0.0);
        let mut updated = params.clone();
        let mut adam = AdamState::new(&updated.store);
        optimizer_step(&mut updated.store, &before.grads, &mut adam, 1e-4);
        let after = batch_loss(&updated, &batch, &draws, &sched, LossPath::Sparse, 1).unwrap();
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
    }

    #[test]
    fn thread_count_does_not_change_step() {
        let params = DenoiserParams::init(&tiny_config(), 10, 0).unwrap();
        let examples = tiny_examples();
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let a = training_step(&params, &batch, &sched, 0.05, 3, 7, 1).unwrap();
        let b = training_step(&params, &batch, &sched, 0.05, 3, 7, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rate_trains_on_full_masks() {
        let cfg = DenoiserConfig { reduction_rate: 0.0, ..tiny_config() };
        let params = DenoiserParams::init(&cfg, 10, 0).unwrap();
        let examples = tiny_examples();
        let batch: Vec<&TrainingExample> = examples.iter().take(3).collect();
        let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let out = training_step(&params, &batch, &sched, 0.2, 0, 0, 1).unwrap();
        assert_eq!(out.keyframes, vec![16; 3]);
    }

    #[test]
    fn trainer_is_deterministic() {
        let run = || {
            let params = DenoiserParams::init(&tiny_config(), 10, 0).unwrap();
            let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
            let cfg = TrainConfig { batch_size: 2, ..TrainConfig::default() };
            let mut tr = Trainer::new(params, tiny_examples(), sched, cfg, 11, 1).unwrap();
            let losses: Vec<f64> = (0..3).map(|_| tr.step().unwrap().loss).collect();
            (losses, tr.params)
        };
        assert_eq!(run(), run());
    }
}
