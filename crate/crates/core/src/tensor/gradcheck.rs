use super::tape::{SteMode, Tape, Var};
use super::{Result, Tensor, TensorError};

/// Denominator floor for the relative error, so that gradients that vanish
/// analytically are judged on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares tape gradients against central finite differences.
///
/// `coords` selects (input, element) pairs to probe; `None` probes every
/// element of every input. Straight-through rounding is frozen at the
/// residuals of the base point while differencing, so quantized paths are
/// checked against the straight-through definition.
pub fn grad_check<F>(
    f: F,
    point: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid { op: "grad_check", msg: format!("step h = {h} must be positive") });
    }
    let tape = Tape::new();
    tape.set_ste_mode(SteMode::Record(Vec::new()));
    let leaves: Vec<Var<'_>> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    if !out.value().is_finite() {
        return Err(TensorError::NonFinite("grad_check base evaluation".into()));
    }
    let residuals = match tape.take_ste_mode() {
        SteMode::Record(r) => r,
        _ => Vec::new(),
    };
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.get(l)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        tape.set_ste_mode(SteMode::Replay(residuals.clone(), 0));
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let v = f(&tape, &vars)?.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check perturbed evaluation".into()));
        }
        Ok(v)
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = point
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut inputs = point.to_vec();
    let mut worst = (0.0, (0, 0));
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].numel() {
            return Err(TensorError::IndexOutOfRange { op: "grad_check", index: j, extent: inputs.get(i).map_or(0, Tensor::numel) });
        }
        let orig = inputs[i].data()[j];
        inputs[i].data_mut()[j] = orig + h;
        let plus = eval(&inputs)?;
        inputs[i].data_mut()[j] = orig - h;
        let minus = eval(&inputs)?;
        inputs[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst.0 {
            worst = (rel, (i, j));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked: coords.len(),
        tolerance: tol,
        passed: worst.0 < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let r = grad_check(|_, v| Ok(v[0].square().sum()), &[x], None, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn layer_norm_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 5], &mut rng);
        let w = random(&[3, 5], &mut rng);
        let r = grad_check(
            |t, v| {
                let w = t.constant(w.clone());
                Ok(v[0].layer_norm(1e-5).mul(w)?.sum())
            },
            &[x],
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = vec![
            random(&[4, 3], &mut rng),
            random(&[3, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6, 5], &mut rng),
            random(&[5, 1], &mut rng),
        ];
        let r = grad_check(
            |_, v| {
                let h1 = v[0].matmul(v[1])?.add_row(v[2])?.tanh();
                let h2 = h1.matmul(v[3])?.softplus();
                Ok(h2.matmul(v[4])?.sin().sum())
            },
            &pts,
            None,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn straight_through_rounding_checks_against_identity_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[6], &mut rng).map(|v| v * 3.0);
        let r = grad_check(|_, v| Ok(v[0].tanh().scale(2.0).round_ste()?.square().sum()), &[x], None, 1e-5, 1e-6)
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::vector(vec![-1.0]);
        let err = grad_check(|_, v| Ok(v[0].sqrt().sum()), &[x], None, 1e-5, 1e-6).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }
}
