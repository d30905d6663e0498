//! Masked multi-head scaled dot-product attention.
//!
//! The mask is represented as an explicit per-query list of allowed key
//! indices (ascending). Disallowed keys are never touched, which makes the
//! "sequential tokens cannot see global tokens" guarantee structural rather
//! than numerical, and keeps the instrumented multiply count equal to the
//! analytic one. A query row with no allowed keys produces a zero output
//! row (the model layers decide when that is legal).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Per-query allowed key indices, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Allowed {
    pub keys: Vec<Vec<u32>>,
}

impl Allowed {
    /// All queries may attend to every index in `0..n_keys` flagged valid.
    pub fn full(n_queries: usize, key_valid: &[bool]) -> Self {
        let keep: Vec<u32> = key_valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| i as u32)
            .collect();
        Allowed {
            keys: vec![keep; n_queries],
        }
    }

    /// Total number of (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.keys.iter().map(|k| k.len()).sum()
    }
}

/// Softmax weights saved by the forward pass for reuse in the backward pass.
/// Row `r` occupies `n_heads * keys[r].len()` values starting at `offsets[r]`,
/// head-major.
#[derive(Debug, Clone)]
pub struct AttnSaved<S> {
    pub weights: Vec<S>,
    pub offsets: Vec<usize>,
    pub n_heads: usize,
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

/// Forward pass. `q` is `Tq x d`, `k`/`v` are `Tk x d`, `d` divisible by
/// `n_heads`; scale is `1/sqrt(d / n_heads)`.
pub fn multihead_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    allowed: &Allowed,
    n_heads: usize,
) -> Result<(Tensor<S>, AttnSaved<S>)> {
    let d = q.last_dim();
    if k.last_dim() != d || v.last_dim() != d || d % n_heads != 0 {
        return Err(CoreError::ShapeMismatch {
            op: "attention",
            detail: format!(
                "q {:?} k {:?} v {:?} heads {n_heads}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        });
    }
    let tq = q.rows_2d();
    let tk = k.rows_2d();
    if allowed.keys.len() != tq {
        return Err(CoreError::ShapeMismatch {
            op: "attention",
            detail: format!("allowed rows {} != queries {tq}", allowed.keys.len()),
        });
    }
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let mut out = Tensor::zeros(vec![tq, d]);
    let mut weights = Vec::with_capacity(allowed.pairs() * n_heads);
    let mut offsets = Vec::with_capacity(tq);
    let mut logits: Vec<S> = Vec::new();

    for r in 0..tq {
        offsets.push(weights.len());
        let keys = &allowed.keys[r];
        if keys.is_empty() {
            continue;
        }
        let qrow = q.row(r);
        for h in 0..n_heads {
            let qh = &qrow[h * dh..(h + 1) * dh];
            logits.clear();
            let mut mx: Option<S> = None;
            for &j in keys {
                let j = j as usize;
                debug_assert!(j < tk);
                let l = dot(qh, &k.row(j)[h * dh..(h + 1) * dh]) * scale;
                mx = Some(match mx {
                    Some(cur) => cur.maxs(l),
                    None => l,
                });
                logits.push(l);
            }
            let mx = mx.expect("non-empty key set");
            let mut denom = S::ZERO;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                denom += *l;
            }
            let orow = &mut out.row_mut(r)[h * dh..(h + 1) * dh];
            for (&j, l) in keys.iter().zip(logits.iter()) {
                let w = *l / denom;
                weights.push(w);
                let vh = &v.row(j as usize)[h * dh..(h + 1) * dh];
                for (o, &vv) in orow.iter_mut().zip(vh.iter()) {
                    *o += w * vv;
                }
            }
        }
    }
    out.check_finite("attention")?;
    Ok((
        out,
        AttnSaved {
            weights,
            offsets,
            n_heads,
        },
    ))
}

/// Backward pass; returns `(dq, dk, dv)`.
pub fn multihead_attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    allowed: &Allowed,
    saved: &AttnSaved<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = q.last_dim();
    let n_heads = saved.n_heads;
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let tq = q.rows_2d();

    let mut dq = Tensor::zeros(vec![tq, d]);
    let mut dk = Tensor::zeros(vec![k.rows_2d(), d]);
    let mut dv = Tensor::zeros(vec![v.rows_2d(), d]);
    let mut dlogits: Vec<S> = Vec::new();

    for r in 0..tq {
        let keys = &allowed.keys[r];
        if keys.is_empty() {
            continue;
        }
        let base = saved.offsets[r];
        let grow = gout.row(r);
        let qrow = q.row(r);
        for h in 0..n_heads {
            let wrow = &saved.weights[base + h * keys.len()..base + (h + 1) * keys.len()];
            let gh = &grow[h * dh..(h + 1) * dh];
            let qh = &qrow[h * dh..(h + 1) * dh];

            dlogits.clear();
            let mut wg_sum = S::ZERO;
            for (&j, &w) in keys.iter().zip(wrow.iter()) {
                let j = j as usize;
                let vh = &v.row(j)[h * dh..(h + 1) * dh];
                let dw = dot(gh, vh);
                // dV accumulates w * g.
                let dvh = &mut dv.row_mut(j)[h * dh..(h + 1) * dh];
                for (o, &g) in dvh.iter_mut().zip(gh.iter()) {
                    *o += w * g;
                }
                wg_sum += w * dw;
                dlogits.push(dw);
            }
            for ((&j, &w), dl) in keys.iter().zip(wrow.iter()).zip(dlogits.iter_mut()) {
                let dlogit = w * (*dl - wg_sum) * scale;
                let j = j as usize;
                let kh = &k.row(j)[h * dh..(h + 1) * dh];
                let dqh = &mut dq.row_mut(r)[h * dh..(h + 1) * dh];
                for (o, &kv) in dqh.iter_mut().zip(kh.iter()) {
                    *o += dlogit * kv;
                }
                let dkh = &mut dk.row_mut(j)[h * dh..(h + 1) * dh];
                for (o, &qv) in dkh.iter_mut().zip(qh.iter()) {
                    *o += dlogit * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_tensor(r: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| r.next_normal() * 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_key_gets_weight_one() {
        let mut r = SplitMix64::new(1);
        let q = rand_tensor(&mut r, &[3, 4]);
        let k = rand_tensor(&mut r, &[1, 4]);
        let v = rand_tensor(&mut r, &[1, 4]);
        let allowed = Allowed {
            keys: vec![vec![0], vec![0], vec![0]],
        };
        let (out, saved) = multihead_attention(&q, &k, &v, &allowed, 2).unwrap();
        for &w in &saved.weights {
            assert_eq!(w, 1.0);
        }
        for row in 0..3 {
            assert_eq!(out.row(row), v.row(0));
        }
    }

    #[test]
    fn empty_row_yields_zero_output() {
        let mut r = SplitMix64::new(2);
        let q = rand_tensor(&mut r, &[2, 4]);
        let k = rand_tensor(&mut r, &[2, 4]);
        let v = rand_tensor(&mut r, &[2, 4]);
        let allowed = Allowed {
            keys: vec![vec![], vec![0, 1]],
        };
        let (out, _) = multihead_attention(&q, &k, &v, &allowed, 1).unwrap();
        assert!(out.row(0).iter().all(|&x| x == 0.0));
        assert!(out.row(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn disallowed_keys_never_influence_output() {
        let mut r = SplitMix64::new(3);
        let q = rand_tensor(&mut r, &[2, 6]);
        let k = rand_tensor(&mut r, &[4, 6]);
        let v = rand_tensor(&mut r, &[4, 6]);
        let allowed = Allowed {
            keys: vec![vec![0, 2], vec![1]],
        };
        let (out, _) = multihead_attention(&q, &k, &v, &allowed, 3).unwrap();
        // Perturb a disallowed key and compare bits.
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.row_mut(3)[0] += 100.0;
        v2.row_mut(3)[2] -= 55.0;
        let (out2, _) = multihead_attention(&q, &k2, &v2, &allowed, 3).unwrap();
        assert_eq!(out.data(), out2.data());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = SplitMix64::new(4);
        let tq = 3;
        let tk = 4;
        let d = 4;
        let heads = 2;
        let q0 = rand_tensor(&mut r, &[tq, d]);
        let k0 = rand_tensor(&mut r, &[tk, d]);
        let v0 = rand_tensor(&mut r, &[tk, d]);
        let allowed = Allowed {
            keys: vec![vec![0, 1, 2], vec![1, 3], vec![0, 1, 2, 3]],
        };
        // Scalar functional: weighted sum of outputs.
        let mut probe = Vec::new();
        for i in 0..tq * d {
            probe.push(0.1 + 0.03 * i as f64);
        }
        let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let (out, _) = multihead_attention(q, k, v, &allowed, heads).unwrap();
            out.data()
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, saved) = multihead_attention(&q0, &k0, &v0, &allowed, heads).unwrap();
        let gout = Tensor::new(vec![tq, d], probe.clone()).unwrap();
        let (dq, dk, dv) = multihead_attention_backward(&q0, &k0, &v0, &allowed, &saved, &gout);

        let step = 1e-6;
        let check = |analytic: &Tensor<f64>, which: usize| {
            for i in 0..analytic.len() {
                let (mut qp, mut kp, mut vp) = (q0.clone(), k0.clone(), v0.clone());
                let (mut qm, mut km, mut vm) = (q0.clone(), k0.clone(), v0.clone());
                let (tp, tm) = match which {
                    0 => (&mut qp, &mut qm),
                    1 => (&mut kp, &mut km),
                    _ => (&mut vp, &mut vm),
                };
                tp.data_mut()[i] += step;
                tm.data_mut()[i] -= step;
                let num = (loss(&qp, &kp, &vp) - loss(&qm, &km, &vm)) / (2.0 * step);
                let a = analytic.data()[i];
                let denom = 1.0f64.max(a.abs()).max(num.abs());
                assert!(
                    ((a - num) / denom).abs() < 1e-6,
                    "which={which} i={i}: analytic {a} vs numeric {num}"
                );
            }
        };
        check(&dq, 0);
        check(&dk, 1);
        check(&dv, 2);
    }
}
