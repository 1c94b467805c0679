use rand::Rng as _;

use super::{BoundParams, DenoiserParams, Fsq, ModelError, Result, IN_MLP, OUT_MLP};
use crate::keyframes::KeyframeMask;
use crate::lipschitz::forward_vars;
use crate::rng::Rng;
use crate::tensor::{OpCategory, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Which frames enter the transformer stack.
#[derive(Debug, Clone, Copy)]
pub enum DenoisePath<'m> {
    /// Keyframe rows only, interpolated back to all frames after the stack.
    Sparse(&'m KeyframeMask),
    /// Every frame is a token; no gather and no interpolation.
    Dense,
}

/// Training-mode dropout.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut Rng,
}

fn apply_dropout<'t>(x: Var<'t>, dropout: &mut Option<Dropout<'_>>) -> Result<Var<'t>> {
    let Some(d) = dropout.as_mut() else { return Ok(x) };
    if d.p <= 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = 1.0 / (1.0 - d.p);
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if d.rng.random::<f64>() < d.p { 0.0 } else { keep }).collect();
    let m = x.tape().constant(Tensor::new(&shape, mask)?);
    Ok(x.mul(m)?)
}

fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Sinusoidal embedding of a diffusion step as a `1 × d` row.
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    Tensor::new(&[1, d], sinusoid(t as f64, d)).expect("shape")
}

/// Dense `n × d` positional-encoding table.
pub fn positional_table(n: usize, d: usize) -> Tensor {
    let data = (0..n).flat_map(|p| sinusoid(p as f64, d)).collect();
    Tensor::new(&[n, d], data).expect("shape")
}

fn layer_norm<'t>(x: Var<'t>, bound: &BoundParams<'t, '_>, prefix: &str) -> Result<Var<'t>> {
    Ok(x.layer_norm(LN_EPS)
        .mul_row(bound.get(&format!("{prefix}.g"))?)?
        .add_row(bound.get(&format!("{prefix}.b"))?)?)
}

fn linear<'t>(x: Var<'t>, bound: &BoundParams<'t, '_>, w: &str, b: &str) -> Result<Var<'t>> {
    Ok(x.matmul(bound.get(w)?)?.add_row(bound.get(b)?)?)
}

/// Condition token (timestep + class embedding) followed by one token per
/// selected frame: the input projection of that frame plus the positional
/// encoding of its original index. `indices = None` keeps every frame.
pub fn embed_tokens<'t>(
    params: &DenoiserParams,
    bound: &BoundParams<'t, '_>,
    x_t: &Tensor,
    indices: Option<&[usize]>,
    t: usize,
    class: Option<usize>,
) -> Result<Var<'t>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let tape = bound.tape();
    let n = x_t.shape()[0];
    let class_row = match class {
        Some(c) if c >= cfg.n_classes => return Err(ModelError::ClassOutOfRange { id: c, count: cfg.n_classes }),
        Some(c) => c,
        None => cfg.n_classes,
    };

    let temb = tape.constant(timestep_embedding(t, d));
    let temb = linear(temb, bound, "time.w1", "time.b1")?.gelu();
    let temb = linear(temb, bound, "time.w2", "time.b2")?;
    let cemb = bound.get("class_emb")?.gather_rows(&[class_row])?;
    let cond = temb.add(cemb)?;

    let x = tape.constant(x_t.clone());
    let in_layers = params.lipschitz_layers(bound, IN_MLP)?;
    let pe = positional_table(n, d);
    let frames = match indices {
        Some(idx) => {
            let rows = x.gather_rows(idx)?;
            let pe_rows: Vec<f64> = idx.iter().flat_map(|&i| pe.row(i).to_vec()).collect();
            forward_vars(&in_layers, rows)?.add(tape.constant(Tensor::new(&[idx.len(), d], pe_rows)?))?
        }
        None => forward_vars(&in_layers, x)?.add(tape.constant(pe))?,
    };
    Ok(Var::concat_rows(&[cond, frames])?)
}

/// Pre-norm self-attention + feed-forward block over the given tokens only.
pub fn sparse_attention_layer<'t>(
    params: &DenoiserParams,
    bound: &BoundParams<'t, '_>,
    layer: usize,
    tokens: Var<'t>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var<'t>> {
    let cfg = &params.config;
    let tape = tokens.tape();
    let p = |s: &str| format!("layer{layer}.{s}");
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let a = layer_norm(tokens, bound, &p("ln1"))?;
    let q = linear(a, bound, &p("wq"), &p("bq"))?;
    let mut k = linear(a, bound, &p("wk"), &p("bk"))?;
    let v = linear(a, bound, &p("wv"), &p("bv"))?;
    if !cfg.fsq_levels.is_empty() {
        let fsq = Fsq::new(&cfg.fsq_levels)?;
        let z = k.matmul(bound.get(&p("fsq_down"))?)?;
        k = fsq.quantize(z)?.matmul(bound.get(&p("fsq_up"))?)?;
    }
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?.transpose()?;
        let vh = v.slice_cols(h * dh, dh)?;
        let prev = tape.set_category(OpCategory::AttentionScore);
        let scores = qh.matmul(kh);
        tape.set_category(OpCategory::ValueMix);
        let probs = apply_dropout(scores?.scale(scale).softmax(), dropout)?;
        let mixed = probs.matmul(vh);
        tape.set_category(prev);
        heads.push(mixed?);
    }
    let attn = linear(Var::concat_cols(&heads)?, bound, &p("wo"), &p("bo"))?;
    let x = tokens.add(apply_dropout(attn, dropout)?)?;

    let f = layer_norm(x, bound, &p("ln2"))?;
    let prev = tape.set_category(OpCategory::FeedForward);
    let hidden = linear(f, bound, &p("w1"), &p("b1"));
    let hidden = hidden.map(|h| h.gelu());
    let hidden = hidden.and_then(|h| apply_dropout(h, dropout));
    let out = hidden.and_then(|h| linear(h, bound, &p("w2"), &p("b2")));
    tape.set_category(prev);
    Ok(x.add(out?)?)
}

/// Full denoiser on a tape: embed → transformer stack → drop the condition
/// token → interpolate to all frames → output projection. Returns `N × D`.
pub fn denoise_vars<'t>(
    params: &DenoiserParams,
    bound: &BoundParams<'t, '_>,
    x_t: &Tensor,
    t: usize,
    class: Option<usize>,
    path: DenoisePath<'_>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var<'t>> {
    let n = x_t.shape()[0];
    if x_t.cols() != params.d_motion {
        return Err(ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "denoise",
            lhs: x_t.shape().to_vec(),
            rhs: vec![n, params.d_motion],
        }));
    }
    let indices = match path {
        DenoisePath::Sparse(mask) => {
            if mask.len() != n {
                return Err(ModelError::MaskLength { mask: mask.len(), frames: n });
            }
            Some(mask.indices())
        }
        DenoisePath::Dense => None,
    };
    let mut h = embed_tokens(params, bound, x_t, indices.as_deref(), t, class)?;
    for l in 0..params.config.n_layers {
        h = sparse_attention_layer(params, bound, l, h, dropout)?;
    }
    let h = layer_norm(h, bound, "final")?;
    let rows = h.value().shape()[0];
    let mut feats = h.slice_rows(1, rows - 1)?;
    if let Some(idx) = &indices {
        feats = feats.interpolate_rows(idx, n)?;
    }
    let out_layers = params.lipschitz_layers(bound, OUT_MLP)?;
    Ok(forward_vars(&out_layers, feats)?)
}

/// Eval-mode x̂₀ prediction with a keyframe mask.
pub fn denoise(params: &DenoiserParams, x_t: &Tensor, t: usize, class: Option<usize>, mask: &KeyframeMask) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let bound = params.store.bind(&tape);
    let out = denoise_vars(params, &bound, x_t, t, class, DenoisePath::Sparse(mask), &mut None)?;
    Ok((*out.value()).clone())
}

/// Classifier-free guidance: `(1 − s)·uncond + s·cond`, which equals
/// `uncond + s·(cond − uncond)` and returns either branch exactly at s ∈ {0, 1}.
pub fn denoise_cfg(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    class: Option<usize>,
    mask: &KeyframeMask,
    scale: f64,
) -> Result<Tensor> {
    let uncond = denoise(params, x_t, t, None, mask)?;
    let Some(c) = class else { return Ok(uncond) };
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond = denoise(params, x_t, t, Some(c), mask)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    Ok(uncond.zip_map(&cond, |u, c| (1.0 - scale) * u + scale * c))
}
