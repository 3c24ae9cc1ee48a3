//! Forward pass driven by a decoding policy, its cached trace, and the
//! matching backward pass.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::attention::{
    attend, attend_backward, concat, outer_add, project_keys, softmax_backward, xent_logit_grad, AttnStep,
};
use super::encoder::{self, softmax, EncCache};
use super::params::Params;
use super::{span_from, Mode, Model, TagsWithFlags};
use crate::error::{Error, Result};
use crate::tags::{Action, ContextSequence, DialogueExample, SlottedRule, TagAssignment};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// One span-emission step in distribution-index space.
///
/// `start` indexes the start distribution: in MST mode 0 is the stop symbol
/// and `k` is context position `k`; in HCT mode `k` is position `k + 1`.
/// `end` always indexes position `end + 1`. A stop step has `end = None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanStep {
    pub start: usize,
    pub end: Option<usize>,
}

/// Every discrete choice of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decisions {
    pub actions: Vec<usize>,
    /// Rule ids per position (HCT only).
    pub rules: Vec<usize>,
    pub spans: Vec<Vec<SpanStep>>,
}

impl Decisions {
    /// Gold decisions for teacher forcing. `rule_ids` gives the vocabulary id
    /// of every rule in `tags` (HCT only). In MST mode only the first
    /// `max_spans` spans per position are kept and a stop step is appended
    /// when fewer than `max_spans` remain.
    pub fn from_tags(tags: &TagAssignment, rule_ids: Option<&[usize]>, mode: Mode, max_spans: usize) -> Result<Self> {
        let actions = tags.actions.iter().map(|a| a.index()).collect();
        let mut spans = Vec::with_capacity(tags.spans.len());
        for (pos, (rule, list)) in tags.rules.iter().zip(&tags.spans).enumerate() {
            let steps: Vec<SpanStep> = match mode {
                Mode::Hct => {
                    if rule.slot_count() != list.len() {
                        return Err(Error::SlotCountMismatch {
                            pos: pos + 1,
                            expected: rule.slot_count(),
                            found: list.len(),
                        });
                    }
                    list.iter()
                        .map(|sp| SpanStep {
                            start: sp.start - 1,
                            end: Some(sp.end - 1),
                        })
                        .collect()
                }
                Mode::Mst => {
                    let mut v: Vec<SpanStep> = list
                        .iter()
                        .take(max_spans)
                        .map(|sp| SpanStep {
                            start: sp.start,
                            end: Some(sp.end - 1),
                        })
                        .collect();
                    if v.len() < max_spans {
                        v.push(SpanStep { start: 0, end: None });
                    }
                    v
                }
            };
            spans.push(steps);
        }
        let rules = match mode {
            Mode::Hct => rule_ids.ok_or(Error::WrongMode("hct"))?.to_vec(),
            Mode::Mst => Vec::new(),
        };
        Ok(Self {
            actions,
            rules,
            spans,
        })
    }
}

/// Chooses each discrete outcome given its distribution.
pub trait Policy {
    fn action(&mut self, i: usize, probs: &Array1<f64>) -> usize;
    fn rule(&mut self, i: usize, probs: &Array1<f64>) -> usize;
    fn start(&mut self, i: usize, j: usize, probs: &Array1<f64>) -> usize;
    fn end(&mut self, i: usize, j: usize, probs: &Array1<f64>) -> usize;
}

fn argmax(p: &Array1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Most probable outcome at every step (ties to the lowest index).
#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

impl Policy for Greedy {
    fn action(&mut self, _: usize, p: &Array1<f64>) -> usize {
        argmax(p)
    }
    fn rule(&mut self, _: usize, p: &Array1<f64>) -> usize {
        argmax(p)
    }
    fn start(&mut self, _: usize, _: usize, p: &Array1<f64>) -> usize {
        argmax(p)
    }
    fn end(&mut self, _: usize, _: usize, p: &Array1<f64>) -> usize {
        argmax(p)
    }
}

/// Ancestral sampling.
pub struct Sample<'a, R: Rng>(pub &'a mut R);

impl<R: Rng> Sample<'_, R> {
    fn draw(&mut self, p: &Array1<f64>) -> usize {
        let u: f64 = self.0.gen();
        let mut acc = 0.0;
        for (k, &v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                return k;
            }
        }
        p.len() - 1
    }
}

impl<R: Rng> Policy for Sample<'_, R> {
    fn action(&mut self, _: usize, p: &Array1<f64>) -> usize {
        self.draw(p)
    }
    fn rule(&mut self, _: usize, p: &Array1<f64>) -> usize {
        self.draw(p)
    }
    fn start(&mut self, _: usize, _: usize, p: &Array1<f64>) -> usize {
        self.draw(p)
    }
    fn end(&mut self, _: usize, _: usize, p: &Array1<f64>) -> usize {
        self.draw(p)
    }
}

/// Replays recorded decisions (teacher forcing, or a frozen sample).
pub struct Replay<'a>(pub &'a Decisions);

impl Policy for Replay<'_> {
    fn action(&mut self, i: usize, _: &Array1<f64>) -> usize {
        self.0.actions[i]
    }
    fn rule(&mut self, i: usize, _: &Array1<f64>) -> usize {
        self.0.rules[i]
    }
    fn start(&mut self, i: usize, j: usize, _: &Array1<f64>) -> usize {
        self.0.spans[i].get(j).map_or(0, |s| s.start)
    }
    fn end(&mut self, i: usize, j: usize, _: &Array1<f64>) -> usize {
        self.0.spans[i].get(j).and_then(|s| s.end).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct QueryTrace {
    rule: usize,
    input: Array1<f64>,
    pre: Array1<f64>,
}

/// Cached state of one span step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub(crate) alpha: Array1<f64>,
    pub(crate) input: Array1<f64>,
    pre: Array1<f64>,
    pub start: AttnStep,
    pub start_choice: usize,
    pub end: Option<(AttnStep, usize)>,
}

#[derive(Debug, Clone, Default)]
struct PositionTrace {
    query: Option<QueryTrace>,
    steps: Vec<StepTrace>,
}

/// Everything the backward pass needs, plus the distributions themselves.
#[derive(Debug, Clone)]
pub struct Trace {
    pub mode: Mode,
    m: usize,
    n: usize,
    enc: EncCache,
    rule_enc: BTreeMap<usize, EncCache>,
    keys_start: Array2<f64>,
    proj_start: Array2<f64>,
    proj_end: Array2<f64>,
    /// `(probs, choice)` per source token.
    pub actions: Vec<(Array1<f64>, usize)>,
    /// `(probs, choice)` per insertion position (HCT only).
    pub rules: Vec<(Array1<f64>, usize)>,
    positions: Vec<PositionTrace>,
}

impl Trace {
    pub fn source_len(&self) -> usize {
        self.n
    }

    /// Span steps at 0-based insertion position `i`.
    pub fn steps(&self, i: usize) -> &[StepTrace] {
        &self.positions[i].steps
    }

    pub fn decisions(&self) -> Decisions {
        Decisions {
            actions: self.actions.iter().map(|(_, c)| *c).collect(),
            rules: self.rules.iter().map(|(_, c)| *c).collect(),
            spans: self
                .positions
                .iter()
                .map(|p| {
                    p.steps
                        .iter()
                        .map(|s| SpanStep {
                            start: s.start_choice,
                            end: s.end.as_ref().map(|(_, c)| *c),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Every distribution produced, in forward order.
    pub fn distributions(&self) -> Vec<&Array1<f64>> {
        let mut out: Vec<&Array1<f64>> = self.actions.iter().map(|(p, _)| p).collect();
        out.extend(self.rules.iter().map(|(p, _)| p));
        for pos in &self.positions {
            for st in &pos.steps {
                out.push(&st.start.probs);
                if let Some((e, _)) = &st.end {
                    out.push(&e.probs);
                }
            }
        }
        out
    }

    /// Log-likelihood of the recorded decisions and how many probabilities
    /// hit [`PROB_FLOOR`].
    pub fn log_likelihood(&self) -> (f64, usize) {
        let mut total = 0.0;
        let mut floored = 0;
        let mut add = |p: f64| {
            if p < PROB_FLOOR {
                floored += 1;
            }
            total += p.max(PROB_FLOOR).ln();
        };
        for (p, c) in self.actions.iter().chain(&self.rules) {
            add(p[*c]);
        }
        for pos in &self.positions {
            for st in &pos.steps {
                add(st.start.probs[st.start_choice]);
                if let Some((e, c)) = &st.end {
                    add(e.probs[*c]);
                }
            }
        }
        (total, floored)
    }
}

impl Model {
    fn rule_encoding(&self, id: usize) -> Result<EncCache> {
        let rule = self.rules.get(id).ok_or(Error::UnknownRuleId(id))?;
        let ids = self.rule_ids(rule)?;
        let segs = vec![2; ids.len()];
        Ok(encoder::encode(&self.params, &ids, &segs))
    }

    /// Runs the tagger on one example, letting `policy` make every choice.
    pub fn forward(&self, example: &DialogueExample, ctx: &ContextSequence, policy: &mut dyn Policy) -> Result<Trace> {
        if example.source.is_empty() {
            return Err(Error::EmptySource);
        }
        let p = &self.params;
        let cfg = &self.config;
        let (m, n) = (ctx.len(), example.source.len());
        let (ids, segs) = self.input_ids(ctx, &example.source);
        let enc = encoder::encode(p, &ids, &segs);
        let e_c = enc.out.slice(s![..m, ..]);
        let e_x = enc.out.slice(s![m.., ..]);

        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let probs = softmax(&e_x.row(i).dot(&p.w_a));
            let c = policy.action(i, &probs);
            actions.push((probs, c));
        }
        let mut rules = Vec::new();
        if let Some(w_r) = &p.w_r {
            for i in 0..=n {
                let probs = softmax(&e_x.row(i).dot(w_r));
                let c = policy.rule(i, &probs);
                if c >= self.rules.len() {
                    return Err(Error::UnknownRuleId(c));
                }
                rules.push((probs, c));
            }
        }

        let keys_start = match &p.stop {
            Some(stop) => {
                let mut k = Array2::zeros((m + 1, cfg.d));
                k.row_mut(0).assign(stop);
                k.slice_mut(s![1.., ..]).assign(&e_c);
                k
            }
            None => e_c.to_owned(),
        };
        let proj_start = project_keys(&p.start, &keys_start);
        let proj_end = project_keys(&p.end, &e_c.to_owned());
        let uniform = Array1::from_elem(m, 1.0 / m as f64);

        let mut rule_enc = BTreeMap::new();
        let mut positions = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let e = e_x.row(i);
            let (query, u0, max_steps) = match cfg.mode {
                Mode::Hct => {
                    let rid = rules[i].1;
                    let k = self.rules[rid].slot_count();
                    if k == 0 {
                        positions.push(PositionTrace::default());
                        continue;
                    }
                    if let std::collections::btree_map::Entry::Vacant(v) = rule_enc.entry(rid) {
                        v.insert(self.rule_encoding(rid)?);
                    }
                    let r = rule_enc[&rid].out.row(0);
                    let input = concat(e, r);
                    let w_c = p.w_c.as_ref().ok_or(Error::WrongMode("hct"))?;
                    let pre = input.dot(w_c);
                    let u0 = pre.mapv(|x| x.max(0.0));
                    (Some(QueryTrace { rule: rid, input, pre }), u0, k)
                }
                Mode::Mst => (None, e.to_owned(), cfg.max_spans),
            };
            let mut alpha = uniform.clone();
            let mut u_prev = u0;
            let mut steps = Vec::with_capacity(max_steps);
            for j in 0..max_steps {
                let hat = alpha.dot(&e_c);
                let input = concat(hat.view(), u_prev.view());
                let pre = input.dot(&p.w_u);
                let u = pre.mapv(|x| x.max(0.0));
                let start = attend(&p.start, &proj_start, u.view());
                let start_choice = policy.start(i, j, &start.probs);
                if cfg.mode == Mode::Mst && start_choice == 0 {
                    steps.push(StepTrace {
                        alpha,
                        input,
                        pre,
                        start,
                        start_choice,
                        end: None,
                    });
                    break;
                }
                let end = attend(&p.end, &proj_end, u.view());
                let end_choice = policy.end(i, j, &end.probs);
                let next_alpha = end.probs.clone();
                steps.push(StepTrace {
                    alpha,
                    input,
                    pre,
                    start,
                    start_choice,
                    end: Some((end, end_choice)),
                });
                alpha = next_alpha;
                u_prev = u;
            }
            positions.push(PositionTrace { query, steps });
        }
        Ok(Trace {
            mode: cfg.mode,
            m,
            n,
            enc,
            rule_enc,
            keys_start,
            proj_start,
            proj_end,
            actions,
            rules,
            positions,
        })
    }

    /// Adds `weight · ∇(−log-likelihood of the trace's decisions)` to `g`.
    pub fn backward(&self, trace: &Trace, weight: f64, g: &mut Params) {
        let p = &self.params;
        let d = self.config.d;
        let m = trace.m;
        let mut d_enc = Array2::<f64>::zeros(trace.enc.out.dim());
        let e_c = trace.enc.out.slice(s![..m, ..]);

        for (i, (probs, c)) in trace.actions.iter().enumerate() {
            let dz = xent_logit_grad(probs, *c, weight);
            let e = trace.enc.out.row(m + i);
            outer_add(&mut g.w_a, e, dz.view());
            let mut row = d_enc.row_mut(m + i);
            row += &p.w_a.dot(&dz);
        }
        if let (Some(w_r), Some(gw_r)) = (&p.w_r, &mut g.w_r) {
            for (i, (probs, c)) in trace.rules.iter().enumerate() {
                let dz = xent_logit_grad(probs, *c, weight);
                let e = trace.enc.out.row(m + i);
                outer_add(gw_r, e, dz.view());
                let mut row = d_enc.row_mut(m + i);
                row += &w_r.dot(&dz);
            }
        }

        let mut d_proj_start = Array2::<f64>::zeros(trace.proj_start.dim());
        let mut d_proj_end = Array2::<f64>::zeros(trace.proj_end.dim());
        let mut d_rule: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
        for (i, pos) in trace.positions.iter().enumerate() {
            if pos.steps.is_empty() {
                continue;
            }
            let mut d_alpha_next: Option<Array1<f64>> = None;
            let mut d_u_next = Array1::<f64>::zeros(d);
            for st in pos.steps.iter().rev() {
                let u = st.pre.mapv(|x| x.max(0.0));
                let mut du = d_u_next.clone();
                if let Some((end, c)) = &st.end {
                    let mut dz = xent_logit_grad(&end.probs, *c, weight);
                    if let Some(da) = &d_alpha_next {
                        dz += &softmax_backward(&end.probs, da);
                    }
                    du += &attend_backward(&p.end, end, u.view(), &dz, &mut g.end, &mut d_proj_end);
                }
                let dz = xent_logit_grad(&st.start.probs, st.start_choice, weight);
                du += &attend_backward(&p.start, &st.start, u.view(), &dz, &mut g.start, &mut d_proj_start);
                let mut dpre = du;
                dpre.zip_mut_with(&st.pre, |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
                outer_add(&mut g.w_u, st.input.view(), dpre.view());
                let dx = p.w_u.dot(&dpre);
                let dhat = dx.slice(s![..d]);
                for (k, mut row) in d_enc.slice_mut(s![..m, ..]).rows_mut().into_iter().enumerate() {
                    row.scaled_add(st.alpha[k], &dhat);
                }
                d_alpha_next = Some(e_c.dot(&dhat));
                d_u_next = dx.slice(s![d..]).to_owned();
            }
            match &pos.query {
                None => {
                    let mut row = d_enc.row_mut(m + i);
                    row += &d_u_next;
                }
                Some(q) => {
                    let w_c = p.w_c.as_ref().expect("HCT params");
                    let mut dpre = d_u_next;
                    dpre.zip_mut_with(&q.pre, |g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    outer_add(g.w_c.as_mut().expect("HCT grads"), q.input.view(), dpre.view());
                    let dx = w_c.dot(&dpre);
                    let mut row = d_enc.row_mut(m + i);
                    row += &dx.slice(s![..d]);
                    *d_rule.entry(q.rule).or_insert_with(|| Array1::zeros(d)) += &dx.slice(s![d..]);
                }
            }
        }

        g.start.wk += &trace.keys_start.t().dot(&d_proj_start);
        let d_keys = d_proj_start.dot(&p.start.wk.t());
        match &mut g.stop {
            Some(gs) => {
                *gs += &d_keys.row(0);
                let mut dc = d_enc.slice_mut(s![..m, ..]);
                dc += &d_keys.slice(s![1.., ..]);
            }
            None => {
                let mut dc = d_enc.slice_mut(s![..m, ..]);
                dc += &d_keys;
            }
        }
        g.end.wk += &e_c.t().dot(&d_proj_end);
        {
            let mut dc = d_enc.slice_mut(s![..m, ..]);
            dc += &d_proj_end.dot(&p.end.wk.t());
        }
        encoder::encode_backward(p, &trace.enc, &d_enc, g);
        for (rid, dr) in d_rule {
            let c = &trace.rule_enc[&rid];
            let mut d_out = Array2::zeros(c.out.dim());
            d_out.row_mut(0).assign(&dr);
            encoder::encode_backward(p, c, &d_out, g);
        }
    }

    /// Turns a trace's decisions into tags over `ctx`. Ends decoded before
    /// their start are clamped to the start and counted.
    pub fn decode(&self, trace: &Trace, ctx: &ContextSequence) -> Result<TagsWithFlags> {
        let actions = trace.actions.iter().map(|(_, c)| Action::from_index(*c)).collect();
        let mut rules = Vec::with_capacity(trace.n + 1);
        let mut spans = Vec::with_capacity(trace.n + 1);
        let mut clamped_ends = 0;
        for (i, pos) in trace.positions.iter().enumerate() {
            let mut list = Vec::new();
            for st in &pos.steps {
                let Some((_, end)) = &st.end else { break };
                let start = match trace.mode {
                    Mode::Mst => st.start_choice,
                    Mode::Hct => st.start_choice + 1,
                };
                let (span, clamped) = span_from(start, end + 1);
                clamped_ends += usize::from(clamped);
                debug_assert!(ctx.contains(span));
                list.push(span);
            }
            let rule = match trace.mode {
                Mode::Hct => self.rules[trace.rules[i].1].clone(),
                Mode::Mst if list.is_empty() => SlottedRule::null(),
                Mode::Mst => SlottedRule::glue(list.len()),
            };
            rules.push(rule);
            spans.push(list);
        }
        Ok(TagsWithFlags {
            tags: TagAssignment {
                actions,
                rules,
                spans,
            },
            clamped_ends,
        })
    }
}
