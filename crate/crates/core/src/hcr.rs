//! Hyper-connected residuals: an n-stream replacement for the standard
//! residual connection with static plus input-dependent mixing coefficients.
//!
//! Per token the state is `H (n x d)`. A sub-layer update computes
//! `H_next = A_r^T H + B^T f((H^T A_m)^T)` where the three coefficient
//! groups are `static + s * tanh(rmsnorm(H) W)` perturbations. At init the
//! dynamic projections are zero and the statics are the Eq-style block
//! (one-hot read, identity residual, all-ones broadcast), which makes the
//! whole thing collapse to a standard pre-norm residual chain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tensor::{matmul, rmsnorm, Tensor};
use crate::Result;

/// Default init for the learnable scaling factors gating the dynamic terms.
pub const SCALE_INIT: f64 = 0.01;
/// Epsilon used by the coefficient RMS normalization.
pub const NORM_EPS: f64 = 1e-6;

/// Parameters of one HCR-wrapped sub-layer.
#[derive(Debug, Clone)]
pub struct HcrParams<S> {
    pub n: usize,
    pub d: usize,
    /// Static read coefficients, length n.
    pub a_m: Vec<S>,
    /// Static residual mixing, n x n.
    pub a_r: Tensor<S>,
    /// Static broadcast coefficients, length n.
    pub b: Vec<S>,
    /// Dynamic projections: d x 1, d x n, d x 1.
    pub w_m: Tensor<S>,
    pub w_r: Tensor<S>,
    pub w_beta: Tensor<S>,
    pub s_alpha: S,
    pub s_beta: S,
}

/// Total trainable scalars per sub-layer: statics (n + n^2 + n), dynamics
/// (d(n+2)) and the two scaling factors. For n = 2 this is 4d + 10.
pub fn params_per_sublayer(n: usize, d: usize) -> usize {
    n + n * n + n + d * (n + 2) + 2
}

impl<S: Scalar> HcrParams<S> {
    /// Identity-recovering initialization for the `s`-th sub-layer
    /// (s = 0 attention, s = 1 FFN; wraps modulo n).
    pub fn init(n: usize, s: usize, d: usize) -> Self {
        let mut a_m = vec![S::ZERO; n];
        a_m[s % n] = S::ONE;
        let mut a_r = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            a_r.row_mut(i)[i] = S::ONE;
        }
        HcrParams {
            n,
            d,
            a_m,
            a_r,
            b: vec![S::ONE; n],
            w_m: Tensor::zeros(vec![d, 1]),
            w_r: Tensor::zeros(vec![d, n]),
            w_beta: Tensor::zeros(vec![d, 1]),
            s_alpha: S::from_f64(SCALE_INIT),
            s_beta: S::from_f64(SCALE_INIT),
        }
    }
}

/// Input-dependent coefficients for a batch of T tokens.
#[derive(Debug, Clone)]
pub struct Coefficients<S> {
    /// T x n read coefficients.
    pub a_m: Tensor<S>,
    /// T x n x n residual mixing.
    pub a_r: Tensor<S>,
    /// T x n broadcast coefficients.
    pub b: Tensor<S>,
}

pub(crate) fn stream_dims<S: Scalar>(h: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match h.shape() {
        [t, n, d] => Ok((*t, *n, *d)),
        [n, d] => Ok((1, *n, *d)),
        other => Err(CoreError::ShapeMismatch {
            op: "hcr",
            detail: format!("expected (T,n,d) or (n,d) stream state, got {other:?}"),
        }),
    }
}

/// Coefficients from an already-normalized state `hbar` (T x n x d).
pub fn coefficients_from_normed<S: Scalar>(
    hbar: &Tensor<S>,
    params: &HcrParams<S>,
) -> Result<Coefficients<S>> {
    let (t, n, d) = stream_dims(hbar)?;
    if n != params.n || d != params.d {
        return Err(CoreError::ShapeMismatch {
            op: "hcr::coefficients",
            detail: format!("state ({n},{d}) vs params ({},{})", params.n, params.d),
        });
    }
    let flat = hbar.clone().reshaped(vec![t * n, d])?;
    let m_raw = matmul(&flat, &params.w_m)?;
    let r_raw = matmul(&flat, &params.w_r)?;
    let b_raw = matmul(&flat, &params.w_beta)?;

    let mut a_m = Tensor::zeros(vec![t, n]);
    let mut b_out = Tensor::zeros(vec![t, n]);
    for i in 0..t * n {
        let (ti, si) = (i / n, i % n);
        a_m.row_mut(ti)[si] = params.a_m[si] + params.s_alpha * m_raw.data()[i].tanh();
        b_out.row_mut(ti)[si] = params.b[si] + params.s_beta * b_raw.data()[i].tanh();
    }
    let mut a_r = Tensor::zeros(vec![t, n, n]);
    for ti in 0..t {
        for si in 0..n {
            for sj in 0..n {
                let raw = r_raw.at(ti * n + si, sj);
                a_r.data_mut()[ti * n * n + si * n + sj] =
                    params.a_r.at(si, sj) + params.s_alpha * raw.tanh();
            }
        }
    }
    Ok(Coefficients {
        a_m,
        a_r,
        b: b_out,
    })
}

/// Coefficients from the raw stream state (normalizes internally).
pub fn hcr_coefficients<S: Scalar>(
    h: &Tensor<S>,
    params: &HcrParams<S>,
) -> Result<Coefficients<S>> {
    coefficients_from_normed(&rmsnorm(h, NORM_EPS)?, params)
}

/// `x[t] = sum_s c[t,s] h[t,s,:]` — fuse streams into the sub-layer input.
pub fn stream_mix_down<S: Scalar>(h: &Tensor<S>, c: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, n, d) = stream_dims(h)?;
    let mut out = Tensor::zeros(vec![t, d]);
    for ti in 0..t {
        let orow = out.row_mut(ti);
        for si in 0..n {
            let coef = c.at(ti, si);
            let hrow = &h.data()[(ti * n + si) * d..(ti * n + si + 1) * d];
            for (o, &v) in orow.iter_mut().zip(hrow.iter()) {
                *o += coef * v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn stream_mix_down_backward<S: Scalar>(
    h: &Tensor<S>,
    c: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (t, n, d) = stream_dims(h).expect("checked in forward");
    let mut dh = Tensor::zeros(vec![t, n, d]);
    let mut dc = Tensor::zeros(vec![t, n]);
    for ti in 0..t {
        let grow = gout.row(ti);
        for si in 0..n {
            let coef = c.at(ti, si);
            let hrow = &h.data()[(ti * n + si) * d..(ti * n + si + 1) * d];
            let dhrow = &mut dh.data_mut()[(ti * n + si) * d..(ti * n + si + 1) * d];
            let mut acc = S::ZERO;
            for ((o, &g), &v) in dhrow.iter_mut().zip(grow.iter()).zip(hrow.iter()) {
                *o += coef * g;
                acc += g * v;
            }
            dc.row_mut(ti)[si] += acc;
        }
    }
    (dh, dc)
}

/// `out[t,r,:] = sum_s c[t,s,r] h[t,s,:]` — the `A_r^T H` residual mixing.
pub fn stream_residual_mix<S: Scalar>(h: &Tensor<S>, c: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, n, d) = stream_dims(h)?;
    let mut out = Tensor::zeros(vec![t, n, d]);
    for ti in 0..t {
        for r in 0..n {
            let orow = &mut out.data_mut()[(ti * n + r) * d..(ti * n + r + 1) * d];
            for si in 0..n {
                let coef = c.data()[ti * n * n + si * n + r];
                // Borrow juggling: h and out are distinct tensors.
                for (x, o) in (0..d).zip(orow.iter_mut()) {
                    *o += coef * h.data()[(ti * n + si) * d + x];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn stream_residual_mix_backward<S: Scalar>(
    h: &Tensor<S>,
    c: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (t, n, d) = stream_dims(h).expect("checked in forward");
    let mut dh = Tensor::zeros(vec![t, n, d]);
    let mut dc = Tensor::zeros(vec![t, n, n]);
    for ti in 0..t {
        for r in 0..n {
            let grow = &gout.data()[(ti * n + r) * d..(ti * n + r + 1) * d];
            for si in 0..n {
                let coef = c.data()[ti * n * n + si * n + r];
                let mut acc = S::ZERO;
                for x in 0..d {
                    let hv = h.data()[(ti * n + si) * d + x];
                    dh.data_mut()[(ti * n + si) * d + x] += coef * grow[x];
                    acc += grow[x] * hv;
                }
                dc.data_mut()[ti * n * n + si * n + r] += acc;
            }
        }
    }
    (dh, dc)
}

/// `out[t,r,:] = c[t,r] y[t,:]` — distribute the sub-layer output to streams.
pub fn stream_broadcast_up<S: Scalar>(y: &Tensor<S>, c: &Tensor<S>) -> Result<Tensor<S>> {
    let t = y.rows_2d();
    let d = y.last_dim();
    let n = c.last_dim();
    let mut out = Tensor::zeros(vec![t, n, d]);
    for ti in 0..t {
        let yrow = y.row(ti);
        for r in 0..n {
            let coef = c.at(ti, r);
            let orow = &mut out.data_mut()[(ti * n + r) * d..(ti * n + r + 1) * d];
            for (o, &v) in orow.iter_mut().zip(yrow.iter()) {
                *o = coef * v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn stream_broadcast_up_backward<S: Scalar>(
    y: &Tensor<S>,
    c: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let t = y.rows_2d();
    let d = y.last_dim();
    let n = c.last_dim();
    let mut dy = Tensor::zeros(vec![t, d]);
    let mut dc = Tensor::zeros(vec![t, n]);
    for ti in 0..t {
        for r in 0..n {
            let coef = c.at(ti, r);
            let grow = &gout.data()[(ti * n + r) * d..(ti * n + r + 1) * d];
            let mut acc = S::ZERO;
            for x in 0..d {
                dy.data_mut()[ti * d + x] += coef * grow[x];
                acc += grow[x] * y.data()[ti * d + x];
            }
            dc.row_mut(ti)[r] += acc;
        }
    }
    (dy, dc)
}

/// Replicate a single-stream state n times.
pub fn hcr_expand<S: Scalar>(h: &Tensor<S>, n: usize) -> Tensor<S> {
    let t = h.rows_2d();
    let d = h.last_dim();
    let mut out = Tensor::zeros(vec![t, n, d]);
    for ti in 0..t {
        for s in 0..n {
            out.data_mut()[(ti * n + s) * d..(ti * n + s + 1) * d].copy_from_slice(h.row(ti));
        }
    }
    out
}

/// Arithmetic mean of the n streams — the single-stream view used at block
/// boundaries. Exact inverse of [`hcr_expand`] on replicated states.
pub fn hcr_collapse<S: Scalar>(h: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, n, d) = stream_dims(h)?;
    let inv = S::ONE / S::from_f64(n as f64);
    let mut out = Tensor::zeros(vec![t, d]);
    for ti in 0..t {
        let orow = out.row_mut(ti);
        for s in 0..n {
            let hrow = &h.data()[(ti * n + s) * d..(ti * n + s + 1) * d];
            for (o, &v) in orow.iter_mut().zip(hrow.iter()) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Stream-sum collapse, kept behind a flag for comparison runs.
pub fn hcr_collapse_sum<S: Scalar>(h: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, n, d) = stream_dims(h)?;
    let mut out = Tensor::zeros(vec![t, d]);
    for ti in 0..t {
        let orow = out.row_mut(ti);
        for s in 0..n {
            let hrow = &h.data()[(ti * n + s) * d..(ti * n + s + 1) * d];
            for (o, &v) in orow.iter_mut().zip(hrow.iter()) {
                *o += v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn hcr_collapse_backward<S: Scalar>(gout: &Tensor<S>, n: usize) -> Tensor<S> {
    let t = gout.rows_2d();
    let d = gout.last_dim();
    let inv = S::ONE / S::from_f64(n as f64);
    let mut dh = Tensor::zeros(vec![t, n, d]);
    for ti in 0..t {
        let grow = gout.row(ti);
        for s in 0..n {
            let drow = &mut dh.data_mut()[(ti * n + s) * d..(ti * n + s + 1) * d];
            for (o, &g) in drow.iter_mut().zip(grow.iter()) {
                *o = g * inv;
            }
        }
    }
    dh
}

/// One full hyper-connected sub-layer update with a caller-supplied
/// sub-layer function operating on the fused `T x d` input.
pub fn hcr_apply<S: Scalar, F>(
    h: &Tensor<S>,
    params: &HcrParams<S>,
    sublayer: F,
) -> Result<Tensor<S>>
where
    F: FnOnce(&Tensor<S>) -> Result<Tensor<S>>,
{
    let coeffs = hcr_coefficients(h, params)?;
    let x = stream_mix_down(h, &coeffs.a_m)?;
    let y = sublayer(&x)?;
    if y.shape() != x.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "hcr_apply",
            detail: format!("sublayer changed {:?} to {:?}", x.shape(), y.shape()),
        });
    }
    let residual = stream_residual_mix(h, &coeffs.a_r)?;
    let contribution = stream_broadcast_up(&y, &coeffs.b)?;
    let mut out = residual;
    for (o, &c) in out.data_mut().iter_mut().zip(contribution.data().iter()) {
        *o += c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_block_matrix() {
        let p = HcrParams::<f64>::init(2, 0, 4);
        assert_eq!(p.a_m, vec![1.0, 0.0]);
        assert_eq!(p.a_r.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.b, vec![1.0, 1.0]);
        let p1 = HcrParams::<f64>::init(2, 1, 4);
        assert_eq!(p1.a_m, vec![0.0, 1.0]);
        let p2 = HcrParams::<f64>::init(2, 2, 4);
        assert_eq!(p2.a_m, vec![1.0, 0.0], "sub-layer index wraps modulo n");
    }

    #[test]
    fn zero_dynamics_reduce_to_statics() {
        let p = HcrParams::<f64>::init(2, 0, 3);
        let h = Tensor::new(vec![1, 2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap();
        let c = hcr_coefficients(&h, &p).unwrap();
        assert_eq!(c.a_m.data(), &[1.0, 0.0]);
        assert_eq!(c.a_r.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.b.data(), &[1.0, 1.0]);
    }

    #[test]
    fn closed_scale_gate_ignores_state() {
        let mut p = HcrParams::<f64>::init(2, 0, 3);
        p.w_m = Tensor::new(vec![3, 1], vec![0.7, -0.3, 0.2]).unwrap();
        p.s_alpha = 0.0;
        p.s_beta = 0.0;
        let h = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let c = hcr_coefficients(&h, &p).unwrap();
        assert_eq!(c.a_m.data(), &[1.0, 0.0]);
    }

    #[test]
    fn hand_computed_read_coefficient() {
        // Evaluate the coefficient rule directly on a given normalized state.
        let mut p = HcrParams::<f64>::init(2, 0, 2);
        p.w_m = Tensor::new(vec![2, 1], vec![0.5, 0.0]).unwrap();
        p.s_alpha = 1.0;
        let hbar = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = coefficients_from_normed(&hbar, &p).unwrap();
        assert!((c.a_m.at(0, 0) - 1.4621).abs() < 1e-4, "{}", c.a_m.at(0, 0));
        assert!(c.a_m.at(0, 1).abs() < 1e-12);
    }

    #[test]
    fn apply_identity_sublayer_at_init() {
        let p = HcrParams::<f64>::init(2, 0, 2);
        let h = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let out = hcr_apply(&h, &p, |x| Ok(x.clone())).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn apply_zero_sublayer_is_pure_residual() {
        let p = HcrParams::<f64>::init(2, 1, 2);
        let h = Tensor::new(vec![1, 2, 2], vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let out = hcr_apply(&h, &p, |x| Ok(Tensor::zeros(x.shape().to_vec()))).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn replicated_streams_reduce_to_standard_residual() {
        // With init params and all streams equal to h, every output stream is
        // h + f(h) for any f.
        let p = HcrParams::<f64>::init(2, 0, 3);
        let mut r = crate::rng::SplitMix64::new(9);
        for _ in 0..5 {
            let hrow: Vec<f64> = (0..3).map(|_| r.next_normal()).collect();
            let h = hcr_expand(&Tensor::new(vec![1, 3], hrow.clone()).unwrap(), 2);
            let f = |x: &Tensor<f64>| {
                Ok(x.map(|v| crate::scalar::Scalar::tanh(v * 1.3) + 0.2 * v * v))
            };
            let out = hcr_apply(&h, &p, f).unwrap();
            let fx = f(&Tensor::new(vec![1, 3], hrow.clone()).unwrap()).unwrap();
            for s in 0..2 {
                for x in 0..3 {
                    let want = hrow[x] + fx.data()[x];
                    let got = out.data()[s * 3 + x];
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
            }
            // Collapse of the result equals the standard pre-norm chain value.
            let collapsed = hcr_collapse(&out).unwrap();
            for x in 0..3 {
                assert!((collapsed.data()[x] - (hrow[x] + fx.data()[x])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expand_collapse_roundtrip() {
        let h = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.5, 0.0]).unwrap();
        let up = hcr_expand(&h, 4);
        let down = hcr_collapse(&up).unwrap();
        assert_eq!(down.data(), h.data());
        let pair = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hcr_collapse(&pair).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(params_per_sublayer(2, 64), 4 * 64 + 10);
        assert_eq!(params_per_sublayer(2, 32), 4 * 32 + 10);
    }
}
