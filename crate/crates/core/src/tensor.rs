//! Dense row-major tensors and the three kernels everything else is built
//! from: matrix product, masked softmax and RMS normalization.
//!
//! Contracts enforced here:
//! * `product(shape) == data.len()` always;
//! * every kernel output is checked finite (NaN/Inf is a hard error);
//! * reductions accumulate left-to-right in a fixed order, so identical
//!   inputs give bit-identical outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor, checking the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::ShapeMismatch {
                op: "tensor::new",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor::new",
                detail: format!("shape {shape:?} product {n} != data len {}", data.len()),
            });
        }
        let t = Self { shape, data };
        t.check_finite("tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![S::ZERO; n],
        }
    }

    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::ShapeMismatch {
                    op: "tensor::from_rows",
                    detail: format!("ragged rows: {} vs {c}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn data(&self) -> &[S] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when the tensor is viewed as 2-D (leading extents
    /// collapsed); the last extent is the row width.
    pub fn rows_2d(&self) -> usize {
        self.data.len() / self.last_dim()
    }
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }
    pub fn row(&self, r: usize) -> &[S] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let w = self.last_dim();
        &mut self.data[r * w..(r + 1) * w]
    }
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.last_dim() + c]
    }

    /// Same data, new shape (product must match).
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor::reshape",
                detail: format!("target {shape:?} incompatible with len {}", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { op });
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a (m×k) · b (k×p)`, accumulated over `k` in ascending order.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![S::ZERO; m * p];
    // i-k-j order: per output element the sum still runs over k ascending,
    // identical to the textbook i-j-k order bit for bit.
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data()[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    let t = Tensor {
        shape: vec![m, p],
        data: out,
    };
    t.check_finite("matmul")?;
    Ok(t)
}

/// Row-wise softmax over unmasked entries only.
///
/// Masked entries are exactly zero in the output; every row must have at
/// least one unmasked entry. Computed with max-subtraction.
pub fn softmax_masked<S: Scalar>(logits: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.shape() != mask.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "softmax_masked",
            detail: format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape()),
        });
    }
    let w = logits.last_dim();
    let rows = logits.rows_2d();
    let mut out = vec![S::ZERO; logits.len()];
    for r in 0..rows {
        let lrow = logits.row(r);
        let mrow = mask.row(r);
        let mut mx: Option<S> = None;
        for (l, &m) in lrow.iter().zip(mrow.iter()) {
            if m != S::ZERO {
                mx = Some(match mx {
                    Some(cur) => cur.maxs(*l),
                    None => *l,
                });
            }
        }
        let mx = mx.ok_or(CoreError::FullyMaskedRow { row: r })?;
        let orow = &mut out[r * w..(r + 1) * w];
        let mut denom = S::ZERO;
        for ((o, l), &m) in orow.iter_mut().zip(lrow.iter()).zip(mrow.iter()) {
            if m != S::ZERO {
                let e = (*l - mx).exp();
                *o = e;
                denom += e;
            }
        }
        for (o, &m) in orow.iter_mut().zip(mrow.iter()) {
            if m != S::ZERO {
                *o = *o / denom;
            }
        }
    }
    let t = Tensor {
        shape: logits.shape().to_vec(),
        data: out,
    };
    t.check_finite("softmax_masked")?;
    Ok(t)
}

/// Row-wise softmax with every entry unmasked.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let ones = Tensor {
        shape: logits.shape().to_vec(),
        data: vec![S::ONE; logits.len()],
    };
    softmax_masked(logits, &ones)
}

/// `y = x / sqrt(mean(x^2) + eps)` along the last axis. No learnable gain.
pub fn rmsnorm<S: Scalar>(x: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let w = x.last_dim();
    let rows = x.rows_2d();
    let mut out = vec![S::ZERO; x.len()];
    let epss = S::from_f64(eps);
    let inv_w = S::from_f64(1.0 / w as f64);
    for r in 0..rows {
        let xr = x.row(r);
        let mut ms = S::ZERO;
        for &v in xr {
            ms += v * v;
        }
        ms = ms * inv_w + epss;
        let inv = S::ONE / ms.sqrt();
        for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(xr.iter()) {
            *o = v * inv;
        }
    }
    let t = Tensor {
        shape: x.shape().to_vec(),
        data: out,
    };
    t.check_finite("rmsnorm")?;
    Ok(t)
}

/// Backward of [`rmsnorm`] given the saved input.
///
/// With r = sqrt(mean(x^2)+eps): dy/dx = I/r - x x^T / (w r^3).
pub(crate) fn rmsnorm_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>, eps: f64) -> Tensor<S> {
    let w = x.last_dim();
    let rows = x.rows_2d();
    let mut out = vec![S::ZERO; x.len()];
    let epss = S::from_f64(eps);
    let inv_w = S::from_f64(1.0 / w as f64);
    for r in 0..rows {
        let xr = x.row(r);
        let gr = gout.row(r);
        let mut ms = S::ZERO;
        for &v in xr {
            ms += v * v;
        }
        let rad = (ms * inv_w + epss).sqrt();
        let mut dot = S::ZERO;
        for (&g, &v) in gr.iter().zip(xr.iter()) {
            dot += g * v;
        }
        let inv_r = S::ONE / rad;
        let coef = dot * inv_w / (rad * rad * rad);
        for ((o, &g), &v) in out[r * w..(r + 1) * w]
            .iter_mut()
            .zip(gr.iter())
            .zip(xr.iter())
        {
            *o = g * inv_r - v * coef;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Textbook i-j-k triple loop, kept independent of the production kernel.
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(vec![m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at(i, kk) * b.at(kk, j);
                }
                out.row_mut(i)[j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle_on_random_5x7_7x3() {
        let mut r = crate::rng::SplitMix64::new(42);
        let a = t(
            &[5, 7],
            &(0..35).map(|_| r.next_normal()).collect::<Vec<_>>(),
        );
        let b = t(
            &[7, 3],
            &(0..21).map(|_| r.next_normal()).collect::<Vec<_>>(),
        );
        let got = matmul(&a, &b).unwrap();
        let want = matmul_naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data().iter()) {
            assert_eq!(g, w, "kernel must equal the naive oracle exactly");
        }
    }

    #[test]
    fn matmul_matches_naive_oracle_on_all_shapes_up_to_16() {
        let mut r = crate::rng::SplitMix64::new(7);
        for &(m, k, p) in &[(1, 1, 1), (2, 3, 4), (16, 16, 16), (16, 5, 9), (3, 16, 2)] {
            let a = t(
                &[m, k],
                &(0..m * k).map(|_| r.next_normal()).collect::<Vec<_>>(),
            );
            let b = t(
                &[k, p],
                &(0..k * p).map(|_| r.next_normal()).collect::<Vec<_>>(),
            );
            assert_eq!(matmul(&a, &b).unwrap(), matmul_naive(&a, &b));
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            matmul(&a, &b),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_symmetric_pair() {
        let l = t(&[1, 2], &[0.0, 0.0]);
        let m = t(&[1, 2], &[1.0, 1.0]);
        let s = softmax_masked(&l, &m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let l = t(&[1, 2], &[5.0, -100.0]);
        let m = t(&[1, 2], &[1.0, 0.0]);
        let s = softmax_masked(&l, &m).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_hand_example() {
        let l = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let m = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let s = softmax_masked(&l, &m).unwrap();
        let want = [0.0900, 0.2447, 0.6652];
        for (got, w) in s.data().iter().zip(want.iter()) {
            assert!((got - w).abs() < 1e-4, "{got} vs {w}");
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let l = t(&[1, 2], &[1.0, 2.0]);
        let m = t(&[1, 2], &[0.0, 0.0]);
        assert!(matches!(
            softmax_masked(&l, &m),
            Err(CoreError::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn rmsnorm_zero_input() {
        let x = t(&[1, 2], &[0.0, 0.0]);
        let y = rmsnorm(&x, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rmsnorm_hand_example() {
        let x = t(&[1, 2], &[3.0, 4.0]);
        let y = rmsnorm(&x, 0.0).unwrap();
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rmsnorm_constant_vector_is_ones() {
        let x = t(&[1, 4], &[2.5; 4]);
        let y = rmsnorm(&x, 0.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_over_unmasked(vals in proptest::collection::vec(-30.0f64..30.0, 6), keep in 1usize..63) {
            let mask: Vec<f64> = (0..6).map(|i| if (keep >> i) & 1 == 1 { 1.0 } else { 0.0 }).collect();
            prop_assume!(mask.iter().any(|&m| m == 1.0));
            let s = softmax_masked(&t(&[1,6], &vals), &t(&[1,6], &mask)).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (v, m) in s.data().iter().zip(mask.iter()) {
                if *m == 0.0 {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }

        #[test]
        fn rmsnorm_output_rms_is_one(vals in proptest::collection::vec(-100.0f64..100.0, 8)) {
            prop_assume!(vals.iter().any(|&v| v != 0.0));
            let y = rmsnorm(&t(&[1, 8], &vals), 0.0).unwrap();
            let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            prop_assert!((rms - 1.0).abs() < 1e-9);
        }
    }
}
