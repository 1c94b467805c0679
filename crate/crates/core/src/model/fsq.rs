use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Finite scalar quantization with per-dimension level counts.
///
/// Odd `L` maps `z ↦ round(h·tanh z)/h` with `h = ⌊L/2⌋`. Even `L` uses the
/// shifted bound `tanh(z + s)·(L−1)(1+ε)/2 − ½` before rounding so that
/// exactly `L` integer codes are reachable, then divides by `L/2`. Both give
/// at most `L` values in `[−1, 1]` and map `0 ↦ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fsq {
    levels: Vec<usize>,
    shift: Vec<f64>,
    half_range: Vec<f64>,
    offset: Vec<f64>,
    inv_half_width: Vec<f64>,
}

const EVEN_EPS: f64 = 1e-3;

impl Fsq {
    pub fn new(levels: &[usize]) -> Result<Self> {
        if let Some(&l) = levels.iter().find(|&&l| l < 2) {
            return Err(TensorError::Invalid { op: "fsq", msg: format!("level count {l} < 2") });
        }
        let mut q = Self {
            levels: levels.to_vec(),
            shift: Vec::new(),
            half_range: Vec::new(),
            offset: Vec::new(),
            inv_half_width: Vec::new(),
        };
        for &l in levels {
            let h = (l / 2) as f64;
            if l % 2 == 1 {
                q.shift.push(0.0);
                q.half_range.push(h);
                q.offset.push(0.0);
            } else {
                let half = (l - 1) as f64 * (1.0 + EVEN_EPS) / 2.0;
                q.shift.push((0.5 / half).atanh());
                q.half_range.push(half);
                q.offset.push(0.5);
            }
            q.inv_half_width.push(1.0 / h);
        }
        Ok(q)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    /// Quantizes the rows of `z` (… × dims) on a tape; gradients pass the
    /// rounding straight through.
    pub fn quantize<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let row = |v: &[f64]| tape.constant(Tensor::vector(v.to_vec()));
        let neg_offset: Vec<f64> = self.offset.iter().map(|o| -o).collect();
        z.add_row(row(&self.shift))?
            .tanh()
            .mul_row(row(&self.half_range))?
            .add_row(row(&neg_offset))?
            .round_ste()?
            .mul_row(row(&self.inv_half_width))
    }
}

pub fn fsq_quantize(keys: &Tensor, levels: &[usize]) -> Result<Tensor> {
    let fsq = Fsq::new(levels)?;
    let tape = Tape::no_grad();
    let z = tape.constant(keys.clone());
    Ok((*fsq.quantize(z)?.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::HashSet;

    #[test]
    fn zero_maps_to_zero() {
        let q = fsq_quantize(&Tensor::zeros(&[1, 4]), &[8, 5, 5, 5]).unwrap();
        assert_eq!(q.data(), &[0.0; 4]);
    }

    #[test]
    fn saturates_at_one() {
        // round(2·tanh 10)/2 with tanh 10 ≈ 0.99999997
        let q = fsq_quantize(&Tensor::from_rows(&[vec![10.0]]).unwrap(), &[5]).unwrap();
        assert_eq!(q.item(), 1.0);
    }

    #[test]
    fn distinct_codes_bounded_by_level_product() {
        let mut rng = stream_rng(0, Stream::Init, 9);
        let data: Vec<f64> = (0..4000 * 4).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 3.0 * z }).collect::<Vec<f64>>();
        let q = fsq_quantize(&Tensor::new(&[4000, 4], data).unwrap(), &[8, 5, 5, 5]).unwrap();
        let mut codes = HashSet::new();
        let mut per_dim: Vec<HashSet<i64>> = vec![HashSet::new(); 4];
        for i in 0..q.rows() {
            let row: Vec<i64> = q.row(i).iter().map(|v| (v * 1000.0).round() as i64).collect();
            for (s, v) in per_dim.iter_mut().zip(&row) {
                s.insert(*v);
            }
            codes.insert(row);
            assert!(q.row(i).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(codes.len() <= 1000);
        assert_eq!(per_dim.iter().map(HashSet::len).collect::<Vec<_>>(), vec![8, 5, 5, 5]);
    }

    #[test]
    fn backward_is_tanh_path() {
        let fsq = Fsq::new(&[5]).unwrap();
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.3]]).unwrap());
        let y = fsq.quantize(z).unwrap().sum();
        let g = tape.backward(y).unwrap().get(z).item();
        // d/dz [2·tanh(z)]/2 = 1 − tanh²(z)
        assert!((g - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
    }
}
