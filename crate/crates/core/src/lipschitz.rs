//! Lipschitz-bounded MLP layers.
//!
//! Each layer clips its weight rows to ℓ₁ norm `softplus(c)`, so the layer's
//! ∞-operator norm is at most `softplus(c)`; a sine activation `sin(ω₀·z)`
//! contributes a further factor `ω₀`. The regularizer is the product of the
//! per-layer bounds.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub use crate::tensor::softplus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    Identity,
}

/// Where the per-layer bound comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSource {
    /// A trainable scalar `c` per layer.
    #[default]
    Trainable,
    /// `softplus(‖W‖∞)` recomputed from the weights.
    WeightNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzLayer {
    /// `out × in`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub c: f64,
    pub omega0: f64,
    pub activation: Activation,
}

impl LipschitzLayer {
    /// Uniform(±sqrt(6/in)/ω₀) weights, zero bias, `c` set to the matrix ∞-norm.
    pub fn random(inputs: usize, outputs: usize, omega0: f64, activation: Activation, rng: &mut Rng) -> Self {
        let lim = (6.0 / inputs as f64).sqrt() / omega0.max(1.0);
        let weight = Tensor::new(
            &[outputs, inputs],
            (0..inputs * outputs).map(|_| rng.random_range(-lim..lim)).collect(),
        )
        .expect("shape by construction");
        let c = inf_norm(&weight);
        Self { weight, bias: Tensor::zeros(&[outputs]), c, omega0, activation }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `softplus(c)`: the ℓ₁ cap on every weight row.
    pub fn row_bound(&self) -> f64 {
        softplus(self.c)
    }

    /// Lipschitz factor of this layer under ℓ∞.
    pub fn bound(&self) -> f64 {
        match self.activation {
            Activation::Sine => self.omega0 * self.row_bound(),
            Activation::Identity => self.row_bound(),
        }
    }
}

/// Largest row ℓ₁ norm.
pub fn inf_norm(w: &Tensor) -> f64 {
    (0..w.rows()).map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `Ŵ_k = W_k · min(1, softplus(c)/‖W_k‖₁)`; zero rows are unchanged.
pub fn normalize_rows(layer: &LipschitzLayer) -> Tensor {
    let s = layer.row_bound();
    let mut w = layer.weight.clone();
    for i in 0..w.rows() {
        let n: f64 = w.row(i).iter().map(|v| v.abs()).sum();
        if n > s {
            let k = s / n;
            w.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzMlp {
    pub layers: Vec<LipschitzLayer>,
}

impl LipschitzMlp {
    /// Sine layers between consecutive `dims`, identity on the last.
    pub fn random(dims: &[usize], omega0: f64, rng: &mut Rng) -> Self {
        let last = dims.len().saturating_sub(2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Sine };
                LipschitzLayer::random(w[0], w[1], omega0, act, rng)
            })
            .collect();
        Self { layers }
    }

    /// ∏ ω₀,ᵢ·softplus(cᵢ) (ω₀ = 1 for identity layers).
    pub fn bound(&self) -> f64 {
        self.layers.iter().map(LipschitzLayer::bound).product()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<LayerVars<'t>> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
                c: tape.leaf(Tensor::scalar(l.c)),
                omega0: l.omega0,
                activation: l.activation,
                source: BoundSource::Trainable,
            })
            .collect()
    }
}

/// A layer's parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
    pub c: Var<'t>,
    pub omega0: f64,
    pub activation: Activation,
    pub source: BoundSource,
}

impl<'t> LayerVars<'t> {
    fn row_bound(&self) -> Result<Var<'t>> {
        Ok(match self.source {
            BoundSource::Trainable => self.c.softplus(),
            BoundSource::WeightNorm => self.weight.max_row_l1()?.softplus(),
        })
    }

    /// `σ(Ŵx + b)` for row-major `x` (rows × in).
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let w_hat = self.weight.l1_row_clip(self.row_bound()?)?;
        let z = x.matmul(w_hat.transpose()?)?.add_row(self.bias)?;
        Ok(match self.activation {
            Activation::Sine => z.scale(self.omega0).sin(),
            Activation::Identity => z,
        })
    }
}

pub fn forward_vars<'t>(layers: &[LayerVars<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let first = layers.first().ok_or_else(|| TensorError::Invalid { op: "lip_forward", msg: "no layers".into() })?;
    let fin = first.weight.value().shape()[1];
    if x.value().cols() != fin {
        return Err(TensorError::ShapeMismatch { op: "lip_forward", lhs: x.shape(), rhs: first.weight.shape() });
    }
    layers.iter().try_fold(x, |h, l| l.forward(h))
}

/// ∏ softplus(cᵢ) as a differentiable scalar.
pub fn lipschitz_loss_vars<'t>(layers: &[LayerVars<'t>]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for l in layers {
        let b = l.row_bound()?;
        acc = Some(match acc {
            None => b,
            Some(a) => a.mul(b)?,
        });
    }
    acc.ok_or_else(|| TensorError::Invalid { op: "lipschitz_loss", msg: "no layers".into() })
}

pub fn lip_forward(mlp: &LipschitzMlp, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let vars = mlp.bind(&tape);
    let xv = tape.constant(x.clone());
    Ok((*forward_vars(&vars, xv)?.value()).clone())
}

pub fn lipschitz_loss(mlp: &LipschitzMlp) -> f64 {
    mlp.layers.iter().map(LipschitzLayer::row_bound).product()
}

/// Largest observed `‖g(y₁) − g(y₂)‖∞ / ‖y₁ − y₂‖∞` over random input pairs
/// drawn from U(−1, 1).
pub fn empirical_lipschitz(mlp: &LipschitzMlp, trials: usize, rng: &mut Rng) -> Result<f64> {
    let d = mlp.layers.first().map_or(0, LipschitzLayer::inputs);
    let mut pairs = Vec::with_capacity(2 * trials * d);
    for _ in 0..2 * trials * d {
        pairs.push(rng.random_range(-1.0..1.0));
    }
    // one batched forward: rows 2i and 2i+1 form pair i
    let x = Tensor::new(&[2 * trials, d], pairs)?;
    let y = lip_forward(mlp, &x)?;
    let mut best = 0.0f64;
    for i in 0..trials {
        let dx = x.row(2 * i).iter().zip(x.row(2 * i + 1)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dy = y.row(2 * i).iter().zip(y.row(2 * i + 1)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if dx > 0.0 {
            best = best.max(dy / dx);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::grad_check;

    fn layer(w: Tensor, c: f64, act: Activation) -> LipschitzLayer {
        let out = w.shape()[0];
        LipschitzLayer { weight: w, bias: Tensor::zeros(&[out]), c, omega0: 1.0, activation: act }
    }

    /// softplus⁻¹(y) = ln(eʸ − 1)
    fn inv_softplus(y: f64) -> f64 {
        y.exp_m1().ln()
    }

    #[test]
    fn normalize_examples() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let out = normalize_rows(&layer(w, inv_softplus(2.0), Activation::Identity));
        assert_eq!(out.row(0), &[1.0, 0.0]);
        assert!((out.get(1, 0) - 1.0).abs() < 1e-12 && (out.get(1, 1) - 1.0).abs() < 1e-12);
        assert_eq!(out.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mlp = LipschitzMlp { layers: vec![layer(Tensor::identity(3), 5.0, Activation::Identity)] };
        let x = Tensor::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap();
        assert_eq!(lip_forward(&mlp, &x).unwrap(), x);
        let mut rng = stream_rng(0, Stream::Init, 0);
        let e = empirical_lipschitz(&mlp, 200, &mut rng).unwrap();
        assert!((e - 1.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn sine_of_zero_preactivation_is_zero() {
        let mlp = LipschitzMlp { layers: vec![layer(Tensor::zeros(&[2, 2]), 0.0, Activation::Sine)] };
        let y = lip_forward(&mlp, &Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let mut rng = stream_rng(0, Stream::Init, 1);
        assert_eq!(empirical_lipschitz(&mlp, 50, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn loss_examples() {
        let zero = |n| LipschitzMlp { layers: (0..n).map(|_| layer(Tensor::identity(2), 0.0, Activation::Sine)).collect() };
        for l in 1..4 {
            assert!((lipschitz_loss(&zero(l)) - std::f64::consts::LN_2.powi(l as i32)).abs() < 1e-12);
        }
        let mut mlp = zero(2);
        mlp.layers[1].c = (std::f64::consts::E - 1.0).ln();
        assert!((lipschitz_loss(&mlp) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_strictly_increasing_in_each_c() {
        let mut rng = stream_rng(3, Stream::Init, 0);
        let mlp = LipschitzMlp::random(&[3, 4, 2], 1.0, &mut rng);
        for i in 0..mlp.layers.len() {
            let mut hi = mlp.clone();
            hi.layers[i].c += 1e-3;
            assert!(lipschitz_loss(&hi) > lipschitz_loss(&mlp));
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = stream_rng(4, Stream::Init, 0);
        let mut mlp = LipschitzMlp::random(&[5, 6], 1.0, &mut rng);
        mlp.layers[0].c = -1.0;
        let once = normalize_rows(&mlp.layers[0]);
        let mut again = mlp.layers[0].clone();
        again.weight = once.clone();
        let twice = normalize_rows(&again);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..once.rows() {
            assert!(once.row(i).iter().map(|v| v.abs()).sum::<f64>() <= mlp.layers[0].row_bound() + 1e-12);
        }
    }

    #[test]
    fn gradients_through_normalization_and_loss() {
        let mut rng = stream_rng(5, Stream::Init, 0);
        let mut mlp = LipschitzMlp::random(&[3, 5, 2], 2.0, &mut rng);
        // force clipping on the first layer
        mlp.layers[0].c = -0.5;
        mlp.layers[0].bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.05]);
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 0.2], vec![-0.1, 0.4, 0.9]]).unwrap();
        let mut point = vec![x];
        for l in &mlp.layers {
            point.extend([l.weight.clone(), l.bias.clone(), Tensor::scalar(l.c)]);
        }
        let acts: Vec<(f64, Activation)> = mlp.layers.iter().map(|l| (l.omega0, l.activation)).collect();
        let r = grad_check(
            |_, v| {
                let layers: Vec<LayerVars<'_>> = acts
                    .iter()
                    .enumerate()
                    .map(|(i, &(omega0, activation))| LayerVars {
                        weight: v[1 + 3 * i],
                        bias: v[2 + 3 * i],
                        c: v[3 + 3 * i],
                        omega0,
                        activation,
                        source: BoundSource::Trainable,
                    })
                    .collect();
                let y = forward_vars(&layers, v[0])?.square().sum();
                y.add(lipschitz_loss_vars(&layers)?.scale(0.3))
            },
            &point,
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = stream_rng(6, Stream::Init, 0);
        let mlp = LipschitzMlp::random(&[3, 2], 1.0, &mut rng);
        assert!(lip_forward(&mlp, &Tensor::zeros(&[1, 4])).is_err());
    }
}
