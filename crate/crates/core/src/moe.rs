//! Sparse top-k mixture-of-experts: router, expert linear maps (attention
//! value/output projections share one router; FFN experts come in
//! down/up pairs), the load-balancing auxiliary loss and routing
//! diagnostics.
//!
//! Routing is discrete: the top-k index set is treated as a constant in the
//! backward pass, gradients flow through the renormalized gate weights and
//! through the full softmax probabilities (for the balancing term) only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tensor::{matmul, softmax_rows, Tensor};
use crate::Result;

/// Per-token routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<S> {
    /// Selected experts, strictly increasing, length k.
    pub indices: Vec<usize>,
    /// Gate weights renormalized over the selection; sum to 1. Aligned
    /// with `indices`.
    pub weights: Vec<S>,
    /// Full softmax probabilities over all E experts.
    pub probs: Vec<S>,
}

/// Top-k expert indices by probability, ties broken by the lower index.
/// Returned ascending.
pub fn topk_indices<S: Scalar>(probs: &[S], k: usize) -> Vec<usize> {
    let e = probs.len();
    let mut taken = vec![false; e];
    for _ in 0..k {
        let mut best = usize::MAX;
        let mut best_p = S::ZERO;
        for (i, &p) in probs.iter().enumerate() {
            if !taken[i] && (best == usize::MAX || p > best_p) {
                best = i;
                best_p = p;
            }
        }
        taken[best] = true;
    }
    (0..e).filter(|&i| taken[i]).collect()
}

/// Renormalize the selected probabilities so they sum to one.
pub(crate) fn renormalize_topk<S: Scalar>(probs: &[S], indices: &[usize]) -> Vec<S> {
    let mut denom = S::ZERO;
    for &i in indices {
        denom += probs[i];
    }
    indices.iter().map(|&i| probs[i] / denom).collect()
}

/// Route every token of `tokens (T x d)` through the gate matrix `gate
/// (d x E)` selecting `k` experts per token.
pub fn route<S: Scalar>(
    tokens: &Tensor<S>,
    gate: &Tensor<S>,
    k: usize,
) -> Result<Vec<RoutingDecision<S>>> {
    let e = gate.shape()[1];
    if k == 0 || k > e {
        return Err(CoreError::Contract(format!("top-k {k} out of range 1..={e}")));
    }
    let logits = matmul(tokens, gate)?;
    let probs = softmax_rows(&logits)?;
    let t = tokens.rows_2d();
    let mut out = Vec::with_capacity(t);
    for r in 0..t {
        let prow = probs.row(r);
        let indices = topk_indices(prow, k);
        let weights = renormalize_topk(prow, &indices);
        out.push(RoutingDecision {
            indices,
            weights,
            probs: prow.to_vec(),
        });
    }
    Ok(out)
}

/// Sparse expert linear map: `out_t = sum_{e in topk(t)} w_{t,e} (x_t W_e)`.
///
/// Also returns the per-token per-selected-expert projections (`T*k*d_out`)
/// saved for the backward pass.
pub(crate) fn moe_linear_forward<S: Scalar>(
    x: &Tensor<S>,
    indices: &[Vec<usize>],
    gates: &Tensor<S>,
    banks: &[&Tensor<S>],
) -> Result<(Tensor<S>, Vec<S>)> {
    let t = x.rows_2d();
    let din = x.last_dim();
    let dout = banks[0].shape()[1];
    let k = gates.last_dim();
    if indices.len() != t || gates.rows_2d() != t {
        return Err(CoreError::ShapeMismatch {
            op: "moe_linear",
            detail: format!("tokens {t}, indices {}, gates {}", indices.len(), gates.rows_2d()),
        });
    }
    let mut out = Tensor::zeros(vec![t, dout]);
    let mut saved = vec![S::ZERO; t * k * dout];
    for ti in 0..t {
        let xrow = x.row(ti);
        for (j, &ei) in indices[ti].iter().enumerate() {
            let w = banks[ei];
            debug_assert_eq!(w.shape(), &[din, dout]);
            let proj = &mut saved[(ti * k + j) * dout..(ti * k + j + 1) * dout];
            for (kk, &xv) in xrow.iter().enumerate() {
                let wrow = &w.data()[kk * dout..(kk + 1) * dout];
                for (p, &wv) in proj.iter_mut().zip(wrow.iter()) {
                    *p += xv * wv;
                }
            }
            let gatew = gates.at(ti, j);
            let orow = out.row_mut(ti);
            for (o, &p) in orow.iter_mut().zip(proj.iter()) {
                *o += gatew * p;
            }
        }
    }
    out.check_finite("moe_linear")?;
    Ok((out, saved))
}

/// Backward of [`moe_linear_forward`]; returns `(dx, dgates, dbanks)`.
pub(crate) fn moe_linear_backward<S: Scalar>(
    x: &Tensor<S>,
    indices: &[Vec<usize>],
    gates: &Tensor<S>,
    banks: &[&Tensor<S>],
    saved: &[S],
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Vec<Tensor<S>>) {
    let t = x.rows_2d();
    let din = x.last_dim();
    let dout = banks[0].shape()[1];
    let k = gates.last_dim();
    let mut dx = Tensor::zeros(vec![t, din]);
    let mut dgates = Tensor::zeros(vec![t, k]);
    let mut dbanks: Vec<Tensor<S>> = banks
        .iter()
        .map(|b| Tensor::zeros(b.shape().to_vec()))
        .collect();
    for ti in 0..t {
        let grow = gout.row(ti);
        let xrow = x.row(ti);
        for (j, &ei) in indices[ti].iter().enumerate() {
            let gatew = gates.at(ti, j);
            let proj = &saved[(ti * k + j) * dout..(ti * k + j + 1) * dout];
            // d gate = proj . gout
            let mut acc = S::ZERO;
            for (&p, &g) in proj.iter().zip(grow.iter()) {
                acc += p * g;
            }
            dgates.row_mut(ti)[j] += acc;
            // dW_e += g * x^T gout ; dx += g * gout W_e^T
            let dbank = &mut dbanks[ei];
            let wbank = banks[ei];
            let dxrow = dx.row_mut(ti);
            for kk in 0..din {
                let xv = xrow[kk] * gatew;
                let dwrow = &mut dbank.data_mut()[kk * dout..(kk + 1) * dout];
                let wrow = &wbank.data()[kk * dout..(kk + 1) * dout];
                let mut xacc = S::ZERO;
                for ((dw, &g), &wv) in dwrow.iter_mut().zip(grow.iter()).zip(wrow.iter()) {
                    *dw += xv * g;
                    xacc += g * wv;
                }
                dxrow[kk] += gatew * xacc;
            }
        }
    }
    (dx, dgates, dbanks)
}

#[inline]
pub(crate) fn silu<S: Scalar>(v: S) -> S {
    v * v.sigmoid()
}

#[inline]
pub(crate) fn silu_grad<S: Scalar>(v: S) -> S {
    let s = v.sigmoid();
    s + v * s * (S::ONE - s)
}

/// Sparse expert FFN: `out_t = sum_{e in topk(t)} w_{t,e} silu(x_t W1_e) W2_e`.
/// Saves the pre-activation hidden states (`T*k*d_ff`).
pub(crate) fn moe_ffn_forward<S: Scalar>(
    x: &Tensor<S>,
    indices: &[Vec<usize>],
    gates: &Tensor<S>,
    w1: &[&Tensor<S>],
    w2: &[&Tensor<S>],
) -> Result<(Tensor<S>, Vec<S>)> {
    let t = x.rows_2d();
    let d = x.last_dim();
    let dff = w1[0].shape()[1];
    let k = gates.last_dim();
    let mut out = Tensor::zeros(vec![t, d]);
    let mut saved = vec![S::ZERO; t * k * dff];
    for ti in 0..t {
        let xrow = x.row(ti);
        for (j, &ei) in indices[ti].iter().enumerate() {
            let h = &mut saved[(ti * k + j) * dff..(ti * k + j + 1) * dff];
            let w1e = w1[ei];
            for (kk, &xv) in xrow.iter().enumerate() {
                let wrow = &w1e.data()[kk * dff..(kk + 1) * dff];
                for (hv, &wv) in h.iter_mut().zip(wrow.iter()) {
                    *hv += xv * wv;
                }
            }
            let gatew = gates.at(ti, j);
            let w2e = w2[ei];
            let orow = out.row_mut(ti);
            for (kk, hv) in h.iter().enumerate() {
                let a = silu(*hv) * gatew;
                let wrow = &w2e.data()[kk * d..(kk + 1) * d];
                for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o += a * wv;
                }
            }
        }
    }
    out.check_finite("moe_ffn")?;
    Ok((out, saved))
}

/// Backward of [`moe_ffn_forward`]; returns `(dx, dgates, dw1, dw2)`.
pub(crate) fn moe_ffn_backward<S: Scalar>(
    x: &Tensor<S>,
    indices: &[Vec<usize>],
    gates: &Tensor<S>,
    w1: &[&Tensor<S>],
    w2: &[&Tensor<S>],
    saved: &[S],
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Vec<Tensor<S>>, Vec<Tensor<S>>) {
    let t = x.rows_2d();
    let d = x.last_dim();
    let dff = w1[0].shape()[1];
    let k = gates.last_dim();
    let mut dx = Tensor::zeros(vec![t, d]);
    let mut dgates = Tensor::zeros(vec![t, k]);
    let mut dw1: Vec<Tensor<S>> = w1.iter().map(|b| Tensor::zeros(b.shape().to_vec())).collect();
    let mut dw2: Vec<Tensor<S>> = w2.iter().map(|b| Tensor::zeros(b.shape().to_vec())).collect();
    let mut da = vec![S::ZERO; dff];
    for ti in 0..t {
        let grow = gout.row(ti);
        let xrow = x.row(ti);
        for (j, &ei) in indices[ti].iter().enumerate() {
            let gatew = gates.at(ti, j);
            let h = &saved[(ti * k + j) * dff..(ti * k + j + 1) * dff];
            let w2e = w2[ei];
            let dw2e = &mut dw2[ei];
            // da = W2_e gout ; dgate = silu(h) W2_e . gout
            let mut dgate = S::ZERO;
            for (kk, &hv) in h.iter().enumerate() {
                let a = silu(hv);
                let wrow = &w2e.data()[kk * d..(kk + 1) * d];
                let dwrow = &mut dw2e.data_mut()[kk * d..(kk + 1) * d];
                let mut acc = S::ZERO;
                for ((&g, &wv), dw) in grow.iter().zip(wrow.iter()).zip(dwrow.iter_mut()) {
                    acc += g * wv;
                    *dw += gatew * a * g;
                }
                dgate += a * acc;
                da[kk] = gatew * acc * silu_grad(hv);
            }
            dgates.row_mut(ti)[j] += dgate;
            // dW1_e += x^T da ; dx += da W1_e^T
            let w1e = w1[ei];
            let dw1e = &mut dw1[ei];
            let dxrow = dx.row_mut(ti);
            for kk in 0..d {
                let xv = xrow[kk];
                let wrow = &w1e.data()[kk * dff..(kk + 1) * dff];
                let dwrow = &mut dw1e.data_mut()[kk * dff..(kk + 1) * dff];
                let mut acc = S::ZERO;
                for ((&dav, &wv), dw) in da.iter().zip(wrow.iter()).zip(dwrow.iter_mut()) {
                    acc += dav * wv;
                    *dw += xv * dav;
                }
                dxrow[kk] += acc;
            }
        }
    }
    (dx, dgates, dw1, dw2)
}

/// Dispatch-normalized usage `f_e`: the fraction of all top-k assignments
/// sent to each expert. Sums to 1.
pub fn dispatch_usage<S: Scalar>(decisions: &[RoutingDecision<S>], n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n_experts];
    let mut total = 0u64;
    for d in decisions {
        for &i in &d.indices {
            counts[i] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Load-balancing auxiliary loss `E * sum_e f_e * p_e`.
///
/// `f_e` is the indicator-based dispatch fraction (non-differentiable),
/// `p_e` the mean router probability.
pub fn balance_loss<S: Scalar>(
    decisions: &[RoutingDecision<S>],
    n_experts: usize,
    k: usize,
) -> Result<S> {
    if decisions.is_empty() {
        return Err(CoreError::Contract("balance_loss needs at least one token".into()));
    }
    let n = decisions.len();
    let mut counts = vec![0u64; n_experts];
    let mut psum = vec![S::ZERO; n_experts];
    for d in decisions {
        for &i in &d.indices {
            counts[i] += 1;
        }
        for (acc, &p) in psum.iter_mut().zip(d.probs.iter()) {
            *acc += p;
        }
    }
    let inv_nk = S::from_f64(1.0 / (n as f64 * k as f64));
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut loss = S::ZERO;
    for e in 0..n_experts {
        let f = S::from_f64(counts[e] as f64) * inv_nk;
        let p = psum[e] * inv_n;
        loss += f * p;
    }
    Ok(loss * S::from_f64(n_experts as f64))
}
