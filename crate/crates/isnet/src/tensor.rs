//! Dense row-major tensors and the elementary kernels every model equation
//! reduces to.
//!
//! Tensors are plain values: an op never mutates its inputs. All kernels are
//! generic over [`Scalar`] so the same code path runs in f32 (training) and
//! f64 (gradient checking and oracle tests).

use crate::error::{IsnetError, Result};
use num_traits::Float;

/// Element type bound for all tensor math.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(IsnetError::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                count,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(IsnetError::dim(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); count],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Single element of a rank-1, length-1 tensor.
    pub fn scalar_value(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(IsnetError::usage(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.data.len() {
            return Err(IsnetError::dim(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                count
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(IsnetError::dim(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place accumulate `other` (same shape).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(IsnetError::dim(format!(
                "accumulate on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    /// Lossless-ish precision conversion (f32<->f64 via f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
        }
    }
}

fn last_axis_slices<F: Scalar>(t: &Tensor<F>) -> (usize, usize) {
    let n = *t.shape().last().expect("rank >= 1");
    (t.len() / n, n)
}

/// `[m,k] x [k,n] -> [m,n]`, ikj loop order so the inner loop runs over
/// contiguous rows of both `b` and the output.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(IsnetError::dim(format!(
            "matmul expects rank-2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(IsnetError::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a^T x b`: `[k,m]^T x [k,n] -> [m,n]` without materializing the transpose.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(IsnetError::dim(format!(
            "matmul_tn inner extents differ: {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let a_row = &ad[p * m..(p + 1) * m];
        let b_row = &bd[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a x b^T`: `[m,k] x [n,k]^T -> [m,n]` without materializing the transpose.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(IsnetError::dim(format!(
            "matmul_nt inner extents differ: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let a_row = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &bd[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_last<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (rows, n) = last_axis_slices(x);
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = F::zero();
        let out_row = &mut out[r * n..(r + 1) * n];
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Max-subtracted log-softmax along the last axis.
pub fn log_softmax_last<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (rows, n) = last_axis_slices(x);
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = F::zero();
        for &v in row {
            sum = sum + (v - m).exp();
        }
        let log_z = m + sum.ln();
        let out_row = &mut out[r * n..(r + 1) * n];
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            *o = v - log_z;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Permute axes of a tensor; `perm[d]` names the source axis for output axis d.
pub fn permute<F: Scalar>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    if perm.len() != rank {
        return Err(IsnetError::dim(format!(
            "permutation {:?} does not match rank {}",
            perm, rank
        )));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(IsnetError::dim(format!("invalid permutation {:?}", perm)));
        }
        seen[p] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();

    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let mut out = vec![F::zero(); x.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *o = x.data()[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Inverse of a permutation vector.
pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap(), b);
    }

    #[test]
    fn matmul_annihilator() {
        let a = t64(&[2, 2], &[0.0; 4]);
        let b = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = matmul(&a, &b).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t64(&[2, 3], &[0.0; 6]);
        let b = t64(&[2, 2], &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    // Naive triple-loop oracle, independent of the kernel's loop order.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_vec(vec![m, n], out).unwrap()
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut s = 7u64;
        for &(m, k, n) in &[(5usize, 4usize, 3usize), (32, 32, 32), (1, 7, 9), (16, 3, 21)] {
            let a = Tensor::from_vec(vec![m, k], (0..m * k).map(|_| lcg(&mut s)).collect()).unwrap();
            let b = Tensor::from_vec(vec![k, n], (0..k * n).map(|_| lcg(&mut s)).collect()).unwrap();
            let c = matmul(&a, &b).unwrap();
            let e = matmul_oracle(&a, &b);
            for (x, y) in c.data().iter().zip(e.data().iter()) {
                let denom = y.abs().max(1e-12);
                assert!((x - y).abs() / denom <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_transposed_variants_match_plain() {
        let mut s = 3u64;
        let a = Tensor::from_vec(vec![4, 6], (0..24).map(|_| lcg(&mut s)).collect::<Vec<f64>>()).unwrap();
        let b = Tensor::from_vec(vec![4, 5], (0..20).map(|_| lcg(&mut s)).collect::<Vec<f64>>()).unwrap();
        // a^T x b
        let at = permute(&a, &[1, 0]).unwrap();
        let want = matmul(&at, &b).unwrap();
        let got = matmul_tn(&a, &b).unwrap();
        assert_eq!(want, got);
        // a x b^T
        let c = Tensor::from_vec(vec![7, 4], (0..28).map(|_| lcg(&mut s)).collect::<Vec<f64>>()).unwrap();
        let d = Tensor::from_vec(vec![5, 4], (0..20).map(|_| lcg(&mut s)).collect::<Vec<f64>>()).unwrap();
        let want = matmul(&c, &permute(&d, &[1, 0]).unwrap()).unwrap();
        let got = matmul_nt(&c, &d).unwrap();
        for (x, y) in got.data().iter().zip(want.data().iter()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = t64(&[4], &[0.0; 4]);
        let y = softmax_last(&x);
        for &v in y.data() {
            assert!((v - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t64(&[3], &[0.3, -1.2, 2.5]);
        let shifted = x.map(|v| v + 123.456);
        let a = softmax_last(&x);
        let b = softmax_last(&shifted);
        for (u, v) in a.data().iter().zip(b.data().iter()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // exp/sum evaluated without max subtraction; exact for small logits.
        let x = t64(&[3], &[1.0, 2.0, 3.0]);
        let y = softmax_last(&x);
        let z: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, &v) in y.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((v - want).abs() / want <= 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let x = t64(&[2], &[1000.0, 0.0]);
        let y = softmax_last(&x);
        assert!(!y.has_non_finite());
        assert!((y.data()[0] - 1.0).abs() <= 1e-12);
        let l = log_softmax_last(&x);
        assert!(!l.has_non_finite());
    }

    #[test]
    fn permute_round_trip_bit_exact() {
        let mut s = 11u64;
        let x = Tensor::from_vec(vec![3, 4, 5], (0..60).map(|_| lcg(&mut s)).collect::<Vec<f64>>()).unwrap();
        let p = permute(&x, &[2, 0, 1]).unwrap();
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(x, back);
    }

    #[test]
    fn permute_against_index_oracle() {
        // [2,2,2] with axes 0 and 2 swapped, checked by explicit index arithmetic.
        let x = t64(&[2, 2, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let y = permute(&x, &[2, 1, 0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let want = x.data()[k * 4 + j * 2 + i];
                    let got = y.data()[i * 4 + j * 2 + k];
                    assert_eq!(want, got);
                }
            }
        }
    }

    #[test]
    fn reshape_preserves_count() {
        let x = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(x.reshaped(&[3, 2]).is_ok());
        assert!(x.reshaped(&[4, 2]).is_err());
    }
}
