//! Dense row-major f64 tensors and the masked scaled-dot-product attention
//! kernel everything else builds on.
//!
//! No broadcasting: every operation takes explicit shapes so oracle
//! comparisons stay unambiguous. All public operations either return finite
//! values or an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite stand-in for negative infinity in additive masks. Keeps arithmetic
/// IEEE-clean while still underflowing to exactly 0 through softmax.
pub const NEG_SENTINEL: f64 = -1e30;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                reason: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `alpha * self + (1 - alpha) * other`. Shapes must match.
    pub fn lerp(&self, other: &Tensor, alpha: f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "lerp",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose2(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }
}

/// Additive causal mask over a sequence of length `len`: entry (i, j) is 0
/// for `j <= i` and [`NEG_SENTINEL`] for `j > i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        CausalMask { len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Additive mask value at (i, j).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.len && j < self.len);
        if j <= i {
            0.0
        } else {
            NEG_SENTINEL
        }
    }
}

/// Standard matrix product of 2-D tensors `[m x k] * [k x n] -> [m x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, n) = (a.shape()[0], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(p);
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "matmul" });
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction. A row whose entries are all at or
/// below the mask sentinel is an error rather than a silent uniform.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "softmax_rows",
            reason: format!("expected 2-D, got {:?}", x.shape()),
        });
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || max <= NEG_SENTINEL {
            return Err(Error::DegenerateRow { row: i });
        }
        let or = out.row_mut(i);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            or[j] = e;
            sum += e;
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Masked scaled-dot-product attention.
///
/// Returns the post-softmax weights `[L x L]` and the attention output
/// `[L x d_v]`. Weights above the diagonal are exactly zero: the mask
/// sentinel underflows through softmax, and this is asserted rather than
/// assumed.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &CausalMask,
) -> Result<(Tensor, Tensor)> {
    let l = mask.len();
    if l == 0 {
        return Err(Error::InvalidShape {
            op: "masked_attention",
            reason: "L = 0".into(),
        });
    }
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "masked_attention",
            reason: "q, k, v must be 2-D".into(),
        });
    }
    if q.shape() != k.shape() || q.shape()[0] != l || v.shape()[0] != l {
        return Err(Error::ShapeMismatch {
            op: "masked_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let d_k = q.shape()[1];
    let scale = 1.0 / (d_k as f64).sqrt();

    let mut logits = matmul(q, &k.transpose2())?;
    for i in 0..l {
        let row = logits.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * scale + mask.at(i, j);
        }
    }
    let weights = softmax_rows(&logits)?;
    for i in 0..l {
        for j in (i + 1)..l {
            assert_eq!(
                weights.get2(i, j),
                0.0,
                "masked entry ({i},{j}) did not underflow to zero"
            );
        }
    }
    let output = matmul(&weights, v)?;
    Ok((weights, output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_scalar() {
        let a = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get2(i, p) * b.get2(p, j);
                }
                assert!((c.get2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sentinel_underflows_to_zero() {
        let x = Tensor::from_vec(&[1, 2], vec![NEG_SENTINEL, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in s.data().iter().enumerate() {
            assert!((v - ((j as f64 + 1.0).exp() / z)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::from_vec(&[1, 2], vec![NEG_SENTINEL, NEG_SENTINEL]).unwrap();
        assert!(matches!(
            softmax_rows(&x),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn attention_single_token() {
        let q = Tensor::from_vec(&[1, 2], vec![0.3, -0.7]).unwrap();
        let v = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (w, o) = masked_attention(&q, &q, &v, &CausalMask::new(1)).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(o.data(), v.data());
    }

    #[test]
    fn attention_zero_logits_uniform_under_mask() {
        let q = Tensor::zeros(&[3, 2]);
        let v = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (w, _) = masked_attention(&q, &q, &v, &CausalMask::new(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                assert!((w.get2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_row_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 4;
        let q = rand_tensor(&mut rng, &[l, 2]);
        let k = rand_tensor(&mut rng, &[l, 2]);
        let v = rand_tensor(&mut rng, &[l, 3]);
        let (w, o) = masked_attention(&q, &k, &v, &CausalMask::new(l)).unwrap();
        let scale = 1.0 / (2.0f64).sqrt();
        for i in 0..l {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    scale * (q.get2(i, 0) * k.get2(j, 0) + q.get2(i, 1) * k.get2(j, 1))
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                assert!((w.get2(i, j) - e / z).abs() < 1e-10);
            }
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, e) in exps.iter().enumerate() {
                    acc += e / z * v.get2(j, c);
                }
                assert!((o.get2(i, c) - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_zero_length_errors() {
        let q = Tensor::zeros(&[0, 2]);
        assert!(masked_attention(&q, &q, &q, &CausalMask::new(0)).is_err());
    }

    #[test]
    fn scaling_follows_sqrt_dk() {
        // Zero-padding q and k to double d_k keeps the raw dot products but
        // halves the pre-softmax logits through the 1/sqrt(d_k) factor.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = 3;
        let q = rand_tensor(&mut rng, &[l, 2]);
        let k = rand_tensor(&mut rng, &[l, 2]);
        let v = rand_tensor(&mut rng, &[l, 2]);
        let pad = |t: &Tensor| {
            let mut data = Vec::new();
            for i in 0..l {
                data.extend_from_slice(t.row(i));
                data.extend_from_slice(&[0.0, 0.0]);
            }
            Tensor::from_vec(&[l, 4], data).unwrap()
        };
        let (w2, _) = masked_attention(&q, &k, &v, &CausalMask::new(l)).unwrap();
        let (w4, _) = masked_attention(&pad(&q), &pad(&k), &v, &CausalMask::new(l)).unwrap();
        // Direct recomputation with the adjusted scale.
        let scale4 = 1.0 / 2.0;
        for i in 0..l {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    scale4 * (q.get2(i, 0) * k.get2(j, 0) + q.get2(i, 1) * k.get2(j, 1))
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                assert!((w4.get2(i, j) - e / z).abs() < 1e-12);
            }
        }
        // And the two widths genuinely differ unless logits were symmetric.
        assert!(w2.max_abs_diff(&w4) > 0.0);
    }
}
