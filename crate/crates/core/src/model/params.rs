use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Mode, ModelConfig};

/// Number of segment embeddings: context, source, rule.
pub(crate) const SEGMENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Additive attention `v · tanh(key · wk + query · wq)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wk: Array2<f64>,
    pub wq: Array2<f64>,
    pub v: Array1<f64>,
}

/// All trainable tensors. Matrices act on row vectors: `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub seg: Array2<f64>,
    /// Mixing weights for the previous and next token, `d × d`.
    pub mix_prev: Array2<f64>,
    pub mix_next: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// Action head, `d × 2`.
    pub w_a: Array2<f64>,
    /// Rule head, `d × p` (HCT only).
    pub w_r: Option<Array2<f64>>,
    /// Rule-biased query projection, `2d × d` (HCT only).
    pub w_c: Option<Array2<f64>>,
    /// Span-state update, `2d × d`.
    pub w_u: Array2<f64>,
    pub start: AttnParams,
    pub end: AttnParams,
    /// Key of the stop entry (MST only).
    pub stop: Option<Array1<f64>>,
}

fn normal2<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn normal1<R: Rng>(rng: &mut R, n: usize, std: f64) -> Array1<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_simple_fn(n, || dist.sample(rng))
}

impl Params {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let h = cfg.ffn;
        let sd = 1.0 / (d as f64).sqrt();
        let emb = cfg.init_scale;
        let hct = cfg.mode == Mode::Hct;
        let tok = normal2(rng, cfg.vocab_size, d, emb);
        let pos = normal2(rng, cfg.max_positions, d, emb);
        let seg = normal2(rng, SEGMENTS, d, emb);
        let mix_prev = normal2(rng, d, d, sd);
        let mix_next = normal2(rng, d, d, sd);
        let layers = (0..cfg.depth)
            .map(|_| LayerParams {
                wq: normal2(rng, d, d, sd),
                wk: normal2(rng, d, d, sd),
                wv: normal2(rng, d, d, sd),
                w1: normal2(rng, d, h, sd),
                b1: Array1::zeros(h),
                w2: normal2(rng, h, d, 1.0 / (h as f64).sqrt()),
                b2: Array1::zeros(d),
            })
            .collect();
        let w_a = normal2(rng, d, 2, sd);
        let w_r = hct.then(|| normal2(rng, d, cfg.rules, sd));
        let w_c = hct.then(|| normal2(rng, 2 * d, d, sd));
        let w_u = normal2(rng, 2 * d, d, sd);
        let attn = |rng: &mut R| AttnParams {
            wk: normal2(rng, d, d, sd),
            wq: normal2(rng, d, d, sd),
            v: normal1(rng, d, sd),
        };
        let start = attn(rng);
        let end = attn(rng);
        let stop = (!hct).then(|| normal1(rng, d, emb));
        Self {
            tok,
            pos,
            seg,
            mix_prev,
            mix_next,
            layers,
            w_a,
            w_r,
            w_c,
            w_u,
            start,
            end,
            stop,
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, mut t| t.fill(0.0));
        z
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("tok".into(), self.tok.view().into_dyn()),
            ("pos".into(), self.pos.view().into_dyn()),
            ("seg".into(), self.seg.view().into_dyn()),
            ("mix.prev".into(), self.mix_prev.view().into_dyn()),
            ("mix.next".into(), self.mix_next.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.view().into_dyn()));
            out.push((format!("layer{i}.wk"), l.wk.view().into_dyn()));
            out.push((format!("layer{i}.wv"), l.wv.view().into_dyn()));
            out.push((format!("layer{i}.w1"), l.w1.view().into_dyn()));
            out.push((format!("layer{i}.b1"), l.b1.view().into_dyn()));
            out.push((format!("layer{i}.w2"), l.w2.view().into_dyn()));
            out.push((format!("layer{i}.b2"), l.b2.view().into_dyn()));
        }
        out.push(("w_a".into(), self.w_a.view().into_dyn()));
        if let Some(w) = &self.w_r {
            out.push(("w_r".into(), w.view().into_dyn()));
        }
        if let Some(w) = &self.w_c {
            out.push(("w_c".into(), w.view().into_dyn()));
        }
        out.push(("w_u".into(), self.w_u.view().into_dyn()));
        for (name, a) in [("start", &self.start), ("end", &self.end)] {
            out.push((format!("{name}.wk"), a.wk.view().into_dyn()));
            out.push((format!("{name}.wq"), a.wq.view().into_dyn()));
            out.push((format!("{name}.v"), a.v.view().into_dyn()));
        }
        if let Some(s) = &self.stop {
            out.push(("stop".into(), s.view().into_dyn()));
        }
        out
    }

    /// Mutable counterpart of [`Params::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
            ("tok".into(), self.tok.view_mut().into_dyn()),
            ("pos".into(), self.pos.view_mut().into_dyn()),
            ("seg".into(), self.seg.view_mut().into_dyn()),
            ("mix.prev".into(), self.mix_prev.view_mut().into_dyn()),
            ("mix.next".into(), self.mix_next.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.view_mut().into_dyn()));
            out.push((format!("layer{i}.wk"), l.wk.view_mut().into_dyn()));
            out.push((format!("layer{i}.wv"), l.wv.view_mut().into_dyn()));
            out.push((format!("layer{i}.w1"), l.w1.view_mut().into_dyn()));
            out.push((format!("layer{i}.b1"), l.b1.view_mut().into_dyn()));
            out.push((format!("layer{i}.w2"), l.w2.view_mut().into_dyn()));
            out.push((format!("layer{i}.b2"), l.b2.view_mut().into_dyn()));
        }
        out.push(("w_a".into(), self.w_a.view_mut().into_dyn()));
        if let Some(w) = &mut self.w_r {
            out.push(("w_r".into(), w.view_mut().into_dyn()));
        }
        if let Some(w) = &mut self.w_c {
            out.push(("w_c".into(), w.view_mut().into_dyn()));
        }
        out.push(("w_u".into(), self.w_u.view_mut().into_dyn()));
        for (name, a) in [("start", &mut self.start), ("end", &mut self.end)] {
            out.push((format!("{name}.wk"), a.wk.view_mut().into_dyn()));
            out.push((format!("{name}.wq"), a.wq.view_mut().into_dyn()));
            out.push((format!("{name}.v"), a.v.view_mut().into_dyn()));
        }
        if let Some(s) = &mut self.stop {
            out.push(("stop".into(), s.view_mut().into_dyn()));
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (name, t) in self.named_mut() {
            f(&name, t);
        }
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
