//! Additive attention over a fixed key set and the span-state update.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::encoder::softmax;
use super::params::AttnParams;

/// One attention evaluation for a given query.
#[derive(Debug, Clone)]
pub struct AttnStep {
    /// `tanh(key·wk + query·wq)` per key row.
    pub act: Array2<f64>,
    pub probs: Array1<f64>,
}

/// Projects keys once per example: `keys · wk`.
pub fn project_keys(a: &AttnParams, keys: &Array2<f64>) -> Array2<f64> {
    keys.dot(&a.wk)
}

pub fn attend(a: &AttnParams, projected: &Array2<f64>, query: ArrayView1<f64>) -> AttnStep {
    let q = query.dot(&a.wq);
    let act = (projected + &q).mapv(f64::tanh);
    let probs = softmax(&act.dot(&a.v));
    AttnStep { act, probs }
}

/// Backward of [`attend`] given the gradient on the logits. Accumulates into
/// `g` and the projected-key gradient, and returns the query gradient.
pub fn attend_backward(
    a: &AttnParams,
    step: &AttnStep,
    query: ArrayView1<f64>,
    dz: &Array1<f64>,
    g: &mut AttnParams,
    d_projected: &mut Array2<f64>,
) -> Array1<f64> {
    g.v += &step.act.t().dot(dz);
    let mut da = step.act.mapv(|t| 1.0 - t * t);
    for (mut row, &z) in da.rows_mut().into_iter().zip(dz.iter()) {
        row *= z;
        row *= &a.v;
    }
    *d_projected += &da;
    let dq = da.sum_axis(Axis(0));
    outer_add(&mut g.wq, query, dq.view());
    a.wq.dot(&dq)
}

/// `m += x ⊗ y`.
pub fn outer_add(m: &mut Array2<f64>, x: ArrayView1<f64>, y: ArrayView1<f64>) {
    for (mut row, &xi) in m.rows_mut().into_iter().zip(x.iter()) {
        row.scaled_add(xi, &y);
    }
}

/// Gradient of `-log p[c]` scaled by `w`, w.r.t. softmax logits.
pub fn xent_logit_grad(p: &Array1<f64>, c: usize, w: f64) -> Array1<f64> {
    let mut g = p * w;
    g[c] -= w;
    g
}

/// Backward through `p = softmax(z)` for an upstream gradient on `p`.
pub fn softmax_backward(p: &Array1<f64>, dp: &Array1<f64>) -> Array1<f64> {
    let dot = p.dot(dp);
    p * &(dp - dot)
}

pub fn concat(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.len() + b.len());
    out.slice_mut(ndarray::s![..a.len()]).assign(&a);
    out.slice_mut(ndarray::s![a.len()..]).assign(&b);
    out
}
