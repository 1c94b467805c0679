use crate::model::ParamStore;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn optimizer_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) {
    assert_eq!(grads.len(), store.len(), "one gradient per parameter");
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let p = store.tensor_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.push("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s);
        optimizer_step(&mut s, &[Tensor::scalar(0.0)], &mut st, 0.1);
        assert_eq!(s.tensor(0).item(), 1.5);
    }

    #[test]
    fn first_step_matches_hand_value() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + 1e-8)
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        optimizer_step(&mut s, &[Tensor::scalar(0.5)], &mut st, 0.01);
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((s.tensor(0).item() - expected).abs() < 1e-15);
        let mut s2 = scalar_store(1.0);
        let mut st2 = AdamState::new(&s2);
        optimizer_step(&mut s2, &[Tensor::scalar(0.5)], &mut st2, 0.01);
        assert_eq!(s, s2);
    }
}
