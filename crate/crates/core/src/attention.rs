//! Causal attention kernels: quadratic (softmax) attention and kernelized
//! linear attention with pluggable feature maps.
//!
//! Both kernels take `q`, `k`, `v` of shape `[batch, heads, time, head_dim]`
//! and scale queries and keys by `head_dim^-1/2` internally. The linear
//! kernel runs as a left-to-right recurrence over a running state
//! `S_t = sum_{j<=t} phi(k_j) v_j^T` and normalizer `z_t = sum_{j<=t} phi(k_j)`,
//! so its cost is `O(time * d_phi * head_dim)` and no `time x time` matrix is
//! ever materialized; a quadratic-cost materialized variant exists purely as
//! a test oracle. The stabilizing epsilon appears in the denominator only.
//!
//! Both kernels carry hand-written backward passes registered as custom
//! autodiff nodes.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{emit_custom, softmax_row, CustomGrad};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{check_finite, Tensor};

/// Default stabilizing constant added to the linear-attention denominator.
pub const ATTENTION_EPS: f64 = 1e-6;

/// Elementwise feature map applied to scaled queries and keys in the linear
/// attention kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMapKind {
    /// `phi(x) = x`; can produce near-zero or negative attention mass.
    Identity,
    /// `phi(x) = max(x, 0)`.
    Relu,
    /// `phi(x) = max(x, 0)^2`.
    SquaredRelu,
    /// Degree-2 polynomial expansion
    /// `[1, x_1..x_d, x_1^2, x_1 x_2, .., x_1 x_d, x_2^2, .., x_d^2]`:
    /// the constant, the linear terms in ascending index order, then the
    /// pair products in row-major upper-triangular order.
    QuadraticPoly,
}

impl FeatureMapKind {
    pub const ALL: [FeatureMapKind; 4] = [
        FeatureMapKind::Identity,
        FeatureMapKind::Relu,
        FeatureMapKind::SquaredRelu,
        FeatureMapKind::QuadraticPoly,
    ];

    /// Dimension of the mapped vector for a `d`-dimensional input.
    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            FeatureMapKind::Identity | FeatureMapKind::Relu | FeatureMapKind::SquaredRelu => d,
            FeatureMapKind::QuadraticPoly => 1 + d + d * (d + 1) / 2,
        }
    }

    /// Applies the map to one row; `out` has length `output_dim(x.len())`.
    pub(crate) fn apply_row<T: Float>(&self, x: &[T], out: &mut [T]) {
        match self {
            FeatureMapKind::Identity => out.copy_from_slice(x),
            FeatureMapKind::Relu => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = if xi > T::zero() { xi } else { T::zero() };
                }
            }
            FeatureMapKind::SquaredRelu => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    let r = if xi > T::zero() { xi } else { T::zero() };
                    *o = r * r;
                }
            }
            FeatureMapKind::QuadraticPoly => {
                let d = x.len();
                out[0] = T::one();
                out[1..=d].copy_from_slice(x);
                let mut p = 1 + d;
                for i in 0..d {
                    for j in i..d {
                        out[p] = x[i] * x[j];
                        p += 1;
                    }
                }
            }
        }
    }

    /// Writes `J_phi(x)^T g_phi` into `gx` (overwriting).
    pub(crate) fn backprop_row<T: Float>(&self, x: &[T], gphi: &[T], gx: &mut [T]) {
        match self {
            FeatureMapKind::Identity => gx.copy_from_slice(gphi),
            FeatureMapKind::Relu => {
                for ((g, &xi), &gp) in gx.iter_mut().zip(x).zip(gphi) {
                    *g = if xi > T::zero() { gp } else { T::zero() };
                }
            }
            FeatureMapKind::SquaredRelu => {
                let two = T::cast(2.0);
                for ((g, &xi), &gp) in gx.iter_mut().zip(x).zip(gphi) {
                    let r = if xi > T::zero() { xi } else { T::zero() };
                    *g = two * r * gp;
                }
            }
            FeatureMapKind::QuadraticPoly => {
                let d = x.len();
                // Constant term contributes nothing; linear terms pass
                // through; the (i, j) product term feeds both slots (and the
                // diagonal case lands twice on the same slot, giving 2 x_i).
                gx.copy_from_slice(&gphi[1..=d]);
                let mut p = 1 + d;
                for i in 0..d {
                    for j in i..d {
                        let gp = gphi[p];
                        gx[i] = gp.mul_add(x[j], gx[i]);
                        gx[j] = gp.mul_add(x[i], gx[j]);
                        p += 1;
                    }
                }
            }
        }
    }
}

impl fmt::Display for FeatureMapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureMapKind::Identity => "identity",
            FeatureMapKind::Relu => "relu",
            FeatureMapKind::SquaredRelu => "squared-relu",
            FeatureMapKind::QuadraticPoly => "quadratic-poly",
        };
        f.write_str(s)
    }
}

impl FromStr for FeatureMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FeatureMapKind::Identity),
            "relu" => Ok(FeatureMapKind::Relu),
            "squared-relu" => Ok(FeatureMapKind::SquaredRelu),
            "quadratic-poly" => Ok(FeatureMapKind::QuadraticPoly),
            other => Err(Error::Config(format!("unknown feature map '{other}'"))),
        }
    }
}

/// Whether the linear kernel stores per-step recurrence states for backward
/// or reconstructs them by reverse subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatePolicy {
    /// Keep every `S_t`, `z_t` from the forward pass (more memory, exact).
    #[default]
    Store,
    /// Keep only the final state and peel it backwards with
    /// `S_{t-1} = S_t - phi(k_t) v_t^T` (less memory, mild extra rounding).
    Recompute,
}

/// Validates `[batch, heads, time, head_dim]` inputs and returns the dims.
fn attention_dims<T: Float>(
    op: &'static str,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let s = q.shape();
    if s.len() != 4 || k.shape() != s || v.shape() != s {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: if k.shape() != s {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Applies a feature map over the last axis: `[..., d] -> [..., output_dim(d)]`.
///
/// Differentiable; useful for testing the map and its Jacobian in isolation.
pub fn apply_feature_map<T: Float>(x: &Tensor<T>, kind: FeatureMapKind) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "apply_feature_map",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let d = x.shape()[x.rank() - 1];
    let dphi = kind.output_dim(d);
    let rows = x.len() / d;
    let mut out = vec![T::zero(); rows * dphi];
    for (row_in, row_out) in x.data().chunks(d).zip(out.chunks_mut(dphi)) {
        kind.apply_row(row_in, row_out);
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = dphi;
    if !x.is_attached() {
        check_finite(&out, "apply_feature_map")?;
        return Ok(Tensor::from_parts(out_shape, Rc::new(out), None));
    }
    let grad = FeatureMapBackward {
        input: x.data_rc(),
        kind,
        d,
        dphi,
    };
    emit_custom("apply_feature_map", out_shape, out, &[x], Box::new(grad))
}

struct FeatureMapBackward<T> {
    input: Rc<Vec<T>>,
    kind: FeatureMapKind,
    d: usize,
    dphi: usize,
}

impl<T: Float> CustomGrad<T> for FeatureMapBackward<T> {
    fn name(&self) -> &'static str {
        "apply_feature_map"
    }

    fn backward(&self, grad_out: &[T]) -> Vec<Vec<T>> {
        let mut gx = vec![T::zero(); self.input.len()];
        for (row, (x_row, g_row)) in self
            .input
            .chunks(self.d)
            .zip(grad_out.chunks(self.dphi))
            .enumerate()
        {
            self.kind
                .backprop_row(x_row, g_row, &mut gx[row * self.d..(row + 1) * self.d]);
        }
        vec![gx]
    }
}

/// Softmax attention with a strict causal mask.
///
/// `out_t = sum_{j<=t} softmax_j(q_t . k_j / sqrt(head_dim)) v_j`. Cost is
/// `O(time^2 * head_dim)` per head. Position `t` reads only rows `0..=t`, so
/// a `time = 1` input returns `v` exactly and perturbing a future position
/// cannot change an earlier output.
pub fn quadratic_causal_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, h, t, dh) = attention_dims("quadratic_causal_attention", q, k, v)?;
    let scale = T::cast(1.0 / (dh as f64).sqrt());
    let needs_grad = q.is_attached() || k.is_attached() || v.is_attached();

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![T::zero(); b * h * t * dh];
    // Softmax rows saved for backward: row `t` holds weights over 0..=t.
    let mut probs = if needs_grad {
        vec![T::zero(); b * h * t * t]
    } else {
        Vec::new()
    };
    let mut scores = vec![T::zero(); t];
    let mut prow = vec![T::zero(); t];

    for bh in 0..b * h {
        let base = bh * t * dh;
        let q_bh = &qd[base..base + t * dh];
        let k_bh = &kd[base..base + t * dh];
        let v_bh = &vd[base..base + t * dh];
        let out_bh = &mut out[base..base + t * dh];
        for ti in 0..t {
            let q_row = &q_bh[ti * dh..(ti + 1) * dh];
            for j in 0..=ti {
                let k_row = &k_bh[j * dh..(j + 1) * dh];
                let mut dot = T::zero();
                for d in 0..dh {
                    dot = q_row[d].mul_add(k_row[d], dot);
                }
                scores[j] = dot * scale;
            }
            softmax_row(&scores[..=ti], &mut prow[..=ti]);
            let out_row = &mut out_bh[ti * dh..(ti + 1) * dh];
            for j in 0..=ti {
                let p = prow[j];
                let v_row = &v_bh[j * dh..(j + 1) * dh];
                for d in 0..dh {
                    out_row[d] = p.mul_add(v_row[d], out_row[d]);
                }
            }
            if needs_grad {
                probs[bh * t * t + ti * t..bh * t * t + ti * t + ti + 1]
                    .copy_from_slice(&prow[..=ti]);
            }
        }
    }

    let shape = q.shape().to_vec();
    if !needs_grad {
        check_finite(&out, "quadratic_causal_attention")?;
        return Ok(Tensor::from_parts(shape, Rc::new(out), None));
    }
    let grad = QuadraticAttentionBackward {
        q: q.data_rc(),
        k: k.data_rc(),
        v: v.data_rc(),
        probs,
        b,
        h,
        t,
        dh,
    };
    emit_custom(
        "quadratic_causal_attention",
        shape,
        out,
        &[q, k, v],
        Box::new(grad),
    )
}

struct QuadraticAttentionBackward<T> {
    q: Rc<Vec<T>>,
    k: Rc<Vec<T>>,
    v: Rc<Vec<T>>,
    probs: Vec<T>,
    b: usize,
    h: usize,
    t: usize,
    dh: usize,
}

impl<T: Float> CustomGrad<T> for QuadraticAttentionBackward<T> {
    fn name(&self) -> &'static str {
        "quadratic_causal_attention"
    }

    fn backward(&self, grad_out: &[T]) -> Vec<Vec<T>> {
        let (t, dh) = (self.t, self.dh);
        let scale = T::cast(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); self.q.len()];
        let mut dk = vec![T::zero(); self.k.len()];
        let mut dv = vec![T::zero(); self.v.len()];
        let mut grad_p = vec![T::zero(); t];

        for bh in 0..self.b * self.h {
            let base = bh * t * dh;
            let q_bh = &self.q[base..base + t * dh];
            let k_bh = &self.k[base..base + t * dh];
            let v_bh = &self.v[base..base + t * dh];
            let g_bh = &grad_out[base..base + t * dh];
            let p_bh = &self.probs[bh * t * t..(bh + 1) * t * t];
            for ti in 0..t {
                let g_row = &g_bh[ti * dh..(ti + 1) * dh];
                let p_row = &p_bh[ti * t..ti * t + ti + 1];
                // dL/dp_j = g . v_j; softmax pullback:
                // de_j = p_j (dp_j - sum_i dp_i p_i).
                let mut dot = T::zero();
                for j in 0..=ti {
                    let v_row = &v_bh[j * dh..(j + 1) * dh];
                    let mut gp = T::zero();
                    for d in 0..dh {
                        gp = g_row[d].mul_add(v_row[d], gp);
                    }
                    grad_p[j] = gp;
                    dot = gp.mul_add(p_row[j], dot);
                }
                let q_row = &q_bh[ti * dh..(ti + 1) * dh];
                let dq_row = &mut dq[base + ti * dh..base + (ti + 1) * dh];
                for j in 0..=ti {
                    let de = p_row[j] * (grad_p[j] - dot) * scale;
                    let k_row = &k_bh[j * dh..(j + 1) * dh];
                    let dk_row = &mut dk[base + j * dh..base + (j + 1) * dh];
                    for d in 0..dh {
                        dq_row[d] = de.mul_add(k_row[d], dq_row[d]);
                        dk_row[d] = de.mul_add(q_row[d], dk_row[d]);
                    }
                    let p = p_row[j];
                    let dv_row = &mut dv[base + j * dh..base + (j + 1) * dh];
                    for d in 0..dh {
                        dv_row[d] = p.mul_add(g_row[d], dv_row[d]);
                    }
                }
            }
        }
        vec![dq, dk, dv]
    }
}

/// Kernelized linear attention computed as a causal recurrence.
///
/// With `q'_t = phi(q_t / sqrt(head_dim))` and `k'_t = phi(k_t / sqrt(head_dim))`:
///
/// ```text
/// S_t = S_{t-1} + k'_t v_t^T      z_t = z_{t-1} + k'_t
/// out_t = (q'_t^T S_t) / (q'_t . z_t + eps)
/// ```
///
/// Cost is `O(time * d_phi * head_dim)` per head; no `time x time` matrix is
/// formed. `eps` appears only in the denominator.
pub fn linear_causal_attention_recurrent<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    kind: FeatureMapKind,
    eps: f64,
    policy: StatePolicy,
) -> Result<Tensor<T>> {
    let (b, h, t, dh) = attention_dims("linear_causal_attention", q, k, v)?;
    let dphi = kind.output_dim(dh);
    let scale = T::cast(1.0 / (dh as f64).sqrt());
    let eps_t = T::cast(eps);
    let needs_grad = q.is_attached() || k.is_attached() || v.is_attached();
    let store_states = needs_grad && policy == StatePolicy::Store;

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![T::zero(); b * h * t * dh];
    let mut qp = vec![T::zero(); b * h * t * dphi];
    let mut kp = vec![T::zero(); b * h * t * dphi];
    let mut den = vec![T::zero(); b * h * t];
    let mut states = if store_states {
        vec![T::zero(); b * h * t * dphi * dh]
    } else {
        Vec::new()
    };
    let mut zsums = if store_states {
        vec![T::zero(); b * h * t * dphi]
    } else {
        Vec::new()
    };

    let mut scaled = vec![T::zero(); dh];
    let mut state = vec![T::zero(); dphi * dh];
    let mut zsum = vec![T::zero(); dphi];

    for bh in 0..b * h {
        let base = bh * t * dh;
        state.iter_mut().for_each(|s| *s = T::zero());
        zsum.iter_mut().for_each(|z| *z = T::zero());
        for ti in 0..t {
            let row = base + ti * dh;
            let fbase = (bh * t + ti) * dphi;
            for d in 0..dh {
                scaled[d] = qd[row + d] * scale;
            }
            kind.apply_row(&scaled, &mut qp[fbase..fbase + dphi]);
            for d in 0..dh {
                scaled[d] = kd[row + d] * scale;
            }
            kind.apply_row(&scaled, &mut kp[fbase..fbase + dphi]);

            // S_t += k'_t v_t^T; z_t += k'_t.
            let v_row = &vd[row..row + dh];
            for i in 0..dphi {
                let kpi = kp[fbase + i];
                zsum[i] += kpi;
                let s_row = &mut state[i * dh..(i + 1) * dh];
                for d in 0..dh {
                    s_row[d] = kpi.mul_add(v_row[d], s_row[d]);
                }
            }

            // out_t = (q'_t^T S_t) / (q'_t . z_t + eps).
            let qp_row = &qp[fbase..fbase + dphi];
            let mut d_t = eps_t;
            let out_row = &mut out[row..row + dh];
            for i in 0..dphi {
                let qpi = qp_row[i];
                d_t = qpi.mul_add(zsum[i], d_t);
                let s_row = &state[i * dh..(i + 1) * dh];
                for d in 0..dh {
                    out_row[d] = qpi.mul_add(s_row[d], out_row[d]);
                }
            }
            let inv = T::one() / d_t;
            for o in out_row.iter_mut() {
                *o = *o * inv;
            }
            den[bh * t + ti] = d_t;

            if store_states {
                let sbase = (bh * t + ti) * dphi * dh;
                states[sbase..sbase + dphi * dh].copy_from_slice(&state);
                zsums[fbase..fbase + dphi].copy_from_slice(&zsum);
            }
        }
    }

    let shape = q.shape().to_vec();
    if !needs_grad {
        check_finite(&out, "linear_causal_attention")?;
        return Ok(Tensor::from_parts(shape, Rc::new(out), None));
    }
    let out_rc = Rc::new(out);
    let grad = LinearAttentionBackward {
        q: q.data_rc(),
        k: k.data_rc(),
        v: v.data_rc(),
        out: Rc::clone(&out_rc),
        qp,
        kp,
        den,
        states: if store_states { Some(states) } else { None },
        zsums: if store_states { Some(zsums) } else { None },
        kind,
        b,
        h,
        t,
        dh,
        dphi,
    };
    // emit_custom re-checks finiteness on the shared buffer.
    crate::autodiff::emit_custom_shared(
        "linear_causal_attention",
        shape,
        out_rc,
        &[q, k, v],
        Box::new(grad),
    )
}

struct LinearAttentionBackward<T> {
    q: Rc<Vec<T>>,
    k: Rc<Vec<T>>,
    v: Rc<Vec<T>>,
    out: Rc<Vec<T>>,
    qp: Vec<T>,
    kp: Vec<T>,
    den: Vec<T>,
    states: Option<Vec<T>>,
    zsums: Option<Vec<T>>,
    kind: FeatureMapKind,
    b: usize,
    h: usize,
    t: usize,
    dh: usize,
    dphi: usize,
}

impl<T: Float> CustomGrad<T> for LinearAttentionBackward<T> {
    fn name(&self) -> &'static str {
        "linear_causal_attention"
    }

    fn backward(&self, grad_out: &[T]) -> Vec<Vec<T>> {
        let (t, dh, dphi) = (self.t, self.dh, self.dphi);
        let scale = T::cast(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); self.q.len()];
        let mut dk = vec![T::zero(); self.k.len()];
        let mut dv = vec![T::zero(); self.v.len()];

        // Suffix accumulators over tau >= t:
        //   big_g[i][j] = sum q'_tau[i] a_tau[j]   (a_tau = g_tau / den_tau)
        //   u[i]       = sum c_tau q'_tau[i]       (c_tau = -(g_tau . out_tau) / den_tau)
        let mut big_g = vec![T::zero(); dphi * dh];
        let mut u = vec![T::zero(); dphi];
        let mut a = vec![T::zero(); dh];
        let mut dqp = vec![T::zero(); dphi];
        let mut dkp = vec![T::zero(); dphi];
        let mut scaled = vec![T::zero(); dh];
        let mut grow = vec![T::zero(); dh];

        // Recompute policy: rebuild the final state once, then peel it
        // backwards with S_{t-1} = S_t - k'_t v_t^T.
        let mut peel_state = Vec::new();
        let mut peel_zsum = Vec::new();
        if self.states.is_none() {
            peel_state = vec![T::zero(); dphi * dh];
            peel_zsum = vec![T::zero(); dphi];
        }

        for bh in 0..self.b * self.h {
            let base = bh * t * dh;
            big_g.iter_mut().for_each(|x| *x = T::zero());
            u.iter_mut().for_each(|x| *x = T::zero());

            if self.states.is_none() {
                peel_state.iter_mut().for_each(|x| *x = T::zero());
                peel_zsum.iter_mut().for_each(|x| *x = T::zero());
                for ti in 0..t {
                    let fbase = (bh * t + ti) * dphi;
                    let v_row = &self.v[base + ti * dh..base + (ti + 1) * dh];
                    for i in 0..dphi {
                        let kpi = self.kp[fbase + i];
                        peel_zsum[i] += kpi;
                        let s_row = &mut peel_state[i * dh..(i + 1) * dh];
                        for d in 0..dh {
                            s_row[d] = kpi.mul_add(v_row[d], s_row[d]);
                        }
                    }
                }
            }

            for ti in (0..t).rev() {
                let row = base + ti * dh;
                let fbase = (bh * t + ti) * dphi;
                let g_row = &grad_out[row..row + dh];
                let o_row = &self.out[row..row + dh];
                let qp_row = &self.qp[fbase..fbase + dphi];
                let kp_row = &self.kp[fbase..fbase + dphi];
                let v_row = &self.v[row..row + dh];
                let inv_den = T::one() / self.den[bh * t + ti];

                let mut go = T::zero();
                for d in 0..dh {
                    a[d] = g_row[d] * inv_den;
                    go = g_row[d].mul_add(o_row[d], go);
                }
                let c = -go * inv_den;

                // dq'_t = S_t a_t + c_t z_t.
                {
                    let (s_t, z_t): (&[T], &[T]) = match (&self.states, &self.zsums) {
                        (Some(states), Some(zsums)) => {
                            let sbase = (bh * t + ti) * dphi * dh;
                            (&states[sbase..sbase + dphi * dh], &zsums[fbase..fbase + dphi])
                        }
                        _ => (&peel_state, &peel_zsum),
                    };
                    for i in 0..dphi {
                        let s_row = &s_t[i * dh..(i + 1) * dh];
                        let mut acc = c * z_t[i];
                        for d in 0..dh {
                            acc = s_row[d].mul_add(a[d], acc);
                        }
                        dqp[i] = acc;
                    }
                }

                // Fold tau = t into the suffix accumulators before using them.
                for i in 0..dphi {
                    let qpi = qp_row[i];
                    u[i] = c.mul_add(qpi, u[i]);
                    let g_row_i = &mut big_g[i * dh..(i + 1) * dh];
                    for d in 0..dh {
                        g_row_i[d] = qpi.mul_add(a[d], g_row_i[d]);
                    }
                }

                // dk'_t = G v_t + u; dv_t = G^T k'_t.
                for d in 0..dh {
                    grow[d] = T::zero();
                }
                for i in 0..dphi {
                    let g_row_i = &big_g[i * dh..(i + 1) * dh];
                    let mut acc = u[i];
                    for d in 0..dh {
                        acc = g_row_i[d].mul_add(v_row[d], acc);
                    }
                    dkp[i] = acc;
                    let kpi = kp_row[i];
                    for d in 0..dh {
                        grow[d] = kpi.mul_add(g_row_i[d], grow[d]);
                    }
                }
                dv[row..row + dh].copy_from_slice(&grow);

                // Pull back through the feature map and the 1/sqrt(dh)
                // scaling of the raw query/key.
                for d in 0..dh {
                    scaled[d] = self.q[row + d] * scale;
                }
                let dq_row = &mut dq[row..row + dh];
                self.kind.backprop_row(&scaled, &dqp, dq_row);
                for d in 0..dh {
                    dq_row[d] = dq_row[d] * scale;
                }
                for d in 0..dh {
                    scaled[d] = self.k[row + d] * scale;
                }
                let dk_row = &mut dk[row..row + dh];
                self.kind.backprop_row(&scaled, &dkp, dk_row);
                for d in 0..dh {
                    dk_row[d] = dk_row[d] * scale;
                }

                // Peel the state back to S_{t-1}, z_{t-1}.
                if self.states.is_none() && ti > 0 {
                    for i in 0..dphi {
                        let kpi = self.kp[fbase + i];
                        peel_zsum[i] -= kpi;
                        let s_row = &mut peel_state[i * dh..(i + 1) * dh];
                        for d in 0..dh {
                            s_row[d] = (-kpi).mul_add(v_row[d], s_row[d]);
                        }
                    }
                }
            }
        }
        vec![dq, dk, dv]
    }
}

/// Quadratic-cost oracle for the linear kernel: materializes the full
/// `time x time` weight matrix `A[t, j] = q'_t . k'_j` (zero for `j > t`)
/// and normalizes each row by `sum_j A[t, j] + eps`.
///
/// Mathematically identical to
/// [`linear_causal_attention_recurrent`]; exists to cross-check it in tests.
/// Not differentiable: the output is always detached.
pub fn linear_causal_attention_materialized<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    kind: FeatureMapKind,
    eps: f64,
) -> Result<Tensor<T>> {
    let (b, h, t, dh) = attention_dims("linear_causal_attention_materialized", q, k, v)?;
    let dphi = kind.output_dim(dh);
    let scale = T::cast(1.0 / (dh as f64).sqrt());
    let eps_t = T::cast(eps);

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![T::zero(); b * h * t * dh];
    let mut qp = vec![T::zero(); t * dphi];
    let mut kp = vec![T::zero(); t * dphi];
    let mut scaled = vec![T::zero(); dh];

    for bh in 0..b * h {
        let base = bh * t * dh;
        for ti in 0..t {
            for d in 0..dh {
                scaled[d] = qd[base + ti * dh + d] * scale;
            }
            kind.apply_row(&scaled, &mut qp[ti * dphi..(ti + 1) * dphi]);
            for d in 0..dh {
                scaled[d] = kd[base + ti * dh + d] * scale;
            }
            kind.apply_row(&scaled, &mut kp[ti * dphi..(ti + 1) * dphi]);
        }
        for ti in 0..t {
            let qp_row = &qp[ti * dphi..(ti + 1) * dphi];
            let mut d_t = eps_t;
            let out_row = &mut out[base + ti * dh..base + (ti + 1) * dh];
            for j in 0..=ti {
                let kp_row = &kp[j * dphi..(j + 1) * dphi];
                let mut w = T::zero();
                for i in 0..dphi {
                    w = qp_row[i].mul_add(kp_row[i], w);
                }
                d_t += w;
                let v_row = &vd[base + j * dh..base + (j + 1) * dh];
                for d in 0..dh {
                    out_row[d] = w.mul_add(v_row[d], out_row[d]);
                }
            }
            let inv = T::one() / d_t;
            for o in out_row.iter_mut() {
                *o = *o * inv;
            }
        }
    }

    check_finite(&out, "linear_causal_attention_materialized")?;
    Ok(Tensor::from_parts(
        q.shape().to_vec(),
        Rc::new(out),
        None,
    ))
}
