//! Token + position + segment embeddings, a window-3 token mixing step,
//! residual single-head self-attention / feed-forward layers and a final
//! `tanh`.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{LayerParams, Params};

#[derive(Debug, Clone)]
struct LayerCache {
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    h1: Array2<f64>,
    z1: Array2<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncCache {
    ids: Vec<usize>,
    segs: Vec<usize>,
    /// Embedding sums before mixing.
    emb: Array2<f64>,
    layers: Vec<LayerCache>,
    /// Final `tanh` outputs, one row per input token.
    pub out: Array2<f64>,
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(crate) fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e / sum
}

fn layer_forward(l: &LayerParams, h: Array2<f64>) -> (LayerCache, Array2<f64>) {
    let d = h.ncols() as f64;
    let q = h.dot(&l.wq);
    let k = h.dot(&l.wk);
    let v = h.dot(&l.wv);
    let mut p = q.dot(&k.t()) / d.sqrt();
    softmax_rows(&mut p);
    let h1 = &h + &p.dot(&v);
    let z1 = h1.dot(&l.w1) + &l.b1;
    let r = z1.mapv(|x| x.max(0.0));
    let h2 = &h1 + &(r.dot(&l.w2) + &l.b2);
    (
        LayerCache {
            h,
            q,
            k,
            v,
            p,
            h1,
            z1,
        },
        h2,
    )
}

fn layer_backward(l: &LayerParams, c: &LayerCache, dh2: Array2<f64>, g: &mut LayerParams) -> Array2<f64> {
    let d = c.h.ncols() as f64;
    let scale = 1.0 / d.sqrt();
    // Feed-forward block.
    let r = c.z1.mapv(|x| x.max(0.0));
    g.w2 += &r.t().dot(&dh2);
    g.b2 += &dh2.sum_axis(Axis(0));
    let mut dz1 = dh2.dot(&l.w2.t());
    dz1.zip_mut_with(&c.z1, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    g.w1 += &c.h1.t().dot(&dz1);
    g.b1 += &dz1.sum_axis(Axis(0));
    let dh1 = dh2 + dz1.dot(&l.w1.t());
    // Attention block.
    let dp = dh1.dot(&c.v.t());
    let dv = c.p.t().dot(&dh1);
    let mut ds = &dp * &c.p;
    let rowdot = ds.sum_axis(Axis(1));
    for (mut row, (&rd, prow)) in ds.rows_mut().into_iter().zip(rowdot.iter().zip(c.p.rows())) {
        row.scaled_add(-rd, &prow);
    }
    ds *= scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    g.wq += &c.h.t().dot(&dq);
    g.wk += &c.h.t().dot(&dk);
    g.wv += &c.h.t().dot(&dv);
    dh1 + dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t())
}

/// Row `t` of the result is row `t - 1` of `x` (zeros first).
fn shift_down(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let n = x.nrows();
    if n > 1 {
        out.slice_mut(s![1.., ..]).assign(&x.slice(s![..n - 1, ..]));
    }
    out
}

/// Row `t` of the result is row `t + 1` of `x` (zeros last).
fn shift_up(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let n = x.nrows();
    if n > 1 {
        out.slice_mut(s![..n - 1, ..]).assign(&x.slice(s![1.., ..]));
    }
    out
}

pub fn encode(p: &Params, ids: &[usize], segs: &[usize]) -> EncCache {
    debug_assert_eq!(ids.len(), segs.len());
    let d = p.tok.ncols();
    let max_pos = p.pos.nrows();
    let mut h = Array2::zeros((ids.len(), d));
    for (t, mut row) in h.rows_mut().into_iter().enumerate() {
        row += &p.tok.row(ids[t]);
        row += &p.pos.row(t.min(max_pos - 1));
        row += &p.seg.row(segs[t]);
    }
    let emb = h;
    let mut h = &emb + &shift_down(&emb).dot(&p.mix_prev) + &shift_up(&emb).dot(&p.mix_next);
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (cache, next) = layer_forward(l, h);
        layers.push(cache);
        h = next;
    }
    EncCache {
        ids: ids.to_vec(),
        segs: segs.to_vec(),
        emb,
        layers,
        out: h.mapv(f64::tanh),
    }
}

/// Accumulates parameter gradients for upstream gradient `d_out`.
pub fn encode_backward(p: &Params, c: &EncCache, d_out: &Array2<f64>, g: &mut Params) {
    let mut dh = d_out * &c.out.mapv(|y| 1.0 - y * y);
    for (i, (l, lc)) in p.layers.iter().zip(&c.layers).enumerate().rev() {
        dh = layer_backward(l, lc, dh, &mut g.layers[i]);
    }
    g.mix_prev += &shift_down(&c.emb).t().dot(&dh);
    g.mix_next += &shift_up(&c.emb).t().dot(&dh);
    let dh = &dh + &shift_up(&dh.dot(&p.mix_prev.t())) + &shift_down(&dh.dot(&p.mix_next.t()));
    let max_pos = p.pos.nrows();
    for (t, row) in dh.rows().into_iter().enumerate() {
        let mut tr = g.tok.row_mut(c.ids[t]);
        tr += &row;
        let mut pr = g.pos.row_mut(t.min(max_pos - 1));
        pr += &row;
        let mut sr = g.seg.row_mut(c.segs[t]);
        sr += &row;
    }
}

/// Rows `[lo, hi)` of the encoder output.
pub(crate) fn rows(c: &EncCache, lo: usize, hi: usize) -> Array2<f64> {
    c.out.slice(s![lo..hi, ..]).to_owned()
}
