//! Browser bindings. Each export takes plain numbers or strings and returns
//! a JSON document; the page in `www/` draws it on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use smdm::diffusion::{make_schedule, ScheduleKind};
use smdm::keyframes::{build_frame_features, select_from_priority, vw_priority};
use smdm::lipschitz::{empirical_lipschitz, lipschitz_loss, LipschitzMlp};
use smdm::motion::{gen_class_motion, GenOptions, MotionClass, MotionSequence, NormStats, SkeletonLayout};
use smdm::rng::{stream_rng, Stream};
use smdm::Tape;

#[derive(Serialize)]
pub struct KeyframeView {
    pub class: String,
    /// Normalized channels, one row per channel.
    pub channels: Vec<Vec<f64>>,
    /// The same channels rebuilt from keyframes alone.
    pub reconstruction: Vec<Vec<f64>>,
    pub keyframes: Vec<usize>,
    /// Removal order of interior frames, least important first.
    pub order: Vec<usize>,
    pub rmse: f64,
}

fn columns(t: &smdm::Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    (0..d).map(|c| (0..n).map(|i| t.get(i, c)).collect()).collect()
}

pub fn keyframe_view(class: &str, seed: u64, rate: f64, n_frames: usize) -> Result<KeyframeView, String> {
    let class = MotionClass::from_name(class).map_err(|e| e.to_string())?;
    let layout = SkeletonLayout::default();
    let mut rng = stream_rng(seed, Stream::Data, class.id() as u64);
    let motion = gen_class_motion(class, n_frames, &layout, &GenOptions::default(), &mut rng).map_err(|e| e.to_string())?;
    let stats = NormStats::fit([&motion]);
    let x = stats.normalize(motion.frames());
    let seq = MotionSequence::new(x.clone(), motion.fps, class.id()).map_err(|e| e.to_string())?;
    let priority = vw_priority(&build_frame_features(&seq)).map_err(|e| e.to_string())?;
    let mask = select_from_priority(&priority, rate).map_err(|e| e.to_string())?;
    let idx = mask.indices();
    let tape = Tape::no_grad();
    let rebuilt = tape
        .constant(x.clone())
        .gather_rows(&idx)
        .and_then(|v| v.interpolate_rows(&idx, n_frames))
        .map_err(|e| e.to_string())?
        .value();
    let sq: f64 = x.data().iter().zip(rebuilt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(KeyframeView {
        class: class.name().to_string(),
        channels: columns(&x),
        reconstruction: columns(&rebuilt),
        keyframes: idx,
        order: priority.order,
        rmse: (sq / x.numel() as f64).sqrt(),
    })
}

#[derive(Serialize)]
pub struct ScheduleView {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Signal-to-noise ratio ᾱ / (1 − ᾱ) per step.
    pub snr: Vec<f64>,
}

pub fn schedule_view(steps: usize, kind: &str) -> Result<ScheduleView, String> {
    let kind = match kind {
        "cosine" => ScheduleKind::Cosine,
        "linear" => ScheduleKind::Linear,
        other => return Err(format!("unknown schedule `{other}`")),
    };
    let s = make_schedule(steps, kind).map_err(|e| e.to_string())?;
    let alpha_bar = s.alpha_bars().to_vec();
    Ok(ScheduleView {
        beta: s.betas().to_vec(),
        snr: alpha_bar.iter().map(|a| a / (1.0 - a)).collect(),
        alpha_bar,
    })
}

#[derive(Serialize)]
pub struct LipschitzView {
    pub bound: f64,
    pub empirical: f64,
    pub penalty: f64,
}

/// `dims` is a comma-separated width list such as `"2,16,16,1"`.
pub fn lipschitz_view(dims: &str, omega0: f64, c: f64, seed: u64, trials: usize) -> Result<LipschitzView, String> {
    let dims: Vec<usize> = dims
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad width `{s}`")))
        .collect::<Result<_, _>>()?;
    if dims.len() < 2 || dims.contains(&0) || dims.iter().any(|&d| d > 256) {
        return Err("need at least two widths, each between 1 and 256".into());
    }
    if !(omega0 > 0.0 && omega0.is_finite() && c.is_finite()) {
        return Err("omega0 must be positive and c finite".into());
    }
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut mlp = LipschitzMlp::random(&dims, omega0, &mut rng);
    for layer in &mut mlp.layers {
        layer.c = c;
    }
    let empirical = empirical_lipschitz(&mlp, trials.max(1), &mut rng).map_err(|e| e.to_string())?;
    Ok(LipschitzView { bound: mlp.bound(), empirical, penalty: lipschitz_loss(&mlp) })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("view serializes")).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn keyframes(class: &str, seed: u64, rate: f64, n_frames: usize) -> Result<String, JsError> {
    to_js(keyframe_view(class, seed, rate, n_frames))
}

#[wasm_bindgen]
pub fn schedule(steps: usize, kind: &str) -> Result<String, JsError> {
    to_js(schedule_view(steps, kind))
}

#[wasm_bindgen]
pub fn lipschitz(dims: &str, omega0: f64, c: f64, seed: u64, trials: usize) -> Result<String, JsError> {
    to_js(lipschitz_view(dims, omega0, c, seed, trials))
}

#[wasm_bindgen]
pub fn class_names() -> String {
    serde_json::to_string(&MotionClass::names()).expect("names serialize")
}
