//! Joint cross-entropy + REINFORCE training with Adam and early stopping.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{bleu_n, corpus_bleu, exact_match};
use crate::model::{Decisions, Greedy, Mode, Model, Params, Replay, Sample, Trace};
use crate::par::{self, Execution};
use crate::tags::{apply_tags, ContextSequence, DialogueExample, TagAssignment};

/// What min-max scaling is applied to before weighting the sampled
/// log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScaling {
    /// Scale the advantage `Δ(sample) − Δ(greedy)`.
    #[default]
    Advantage,
    /// Scale the raw sampled reward `Δ(sample)`.
    Reward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the RL loss in `[0, 1]`.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping is never triggered before this epoch.
    pub min_epochs: usize,
    /// Non-improving epochs (dev BLEU-4) tolerated after `min_epochs`.
    pub patience: usize,
    pub seed: u64,
    pub reward_scaling: RewardScaling,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            max_epochs: 50,
            min_epochs: 15,
            patience: 3,
            seed: 0,
            reward_scaling: RewardScaling::Advantage,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// An example prepared for training: gold decisions in model index space.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub example: DialogueExample,
    pub ctx: ContextSequence,
    pub target: Vec<String>,
    pub gold: Decisions,
}

impl TrainingExample {
    /// `tags` must use rules from the model's vocabulary (HCT); in MST mode
    /// only the spans are used.
    pub fn new(model: &Model, example: DialogueExample, tags: &TagAssignment) -> Result<Self> {
        example.validate()?;
        let ctx = example.context_sequence()?;
        let target = example
            .target
            .clone()
            .ok_or_else(|| Error::EmptyTarget(example.id.clone()))?;
        let ids = match model.mode() {
            Mode::Hct => {
                let index: HashMap<_, _> = model.rules.iter().enumerate().map(|(i, r)| (r, i)).collect();
                Some(
                    tags.rules
                        .iter()
                        .map(|r| index.get(r).copied().ok_or_else(|| Error::UnknownRule(r.to_string())))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Mode::Mst => None,
        };
        if let Err(v) = crate::tags::validate_tags(&ctx, tags, example.source.len()) {
            return Err(Error::TagLength {
                n: example.source.len(),
                detail: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            });
        }
        let gold = Decisions::from_tags(tags, ids.as_deref(), model.mode(), model.config.max_spans)?;
        Ok(Self {
            example,
            ctx,
            target,
            gold,
        })
    }
}

/// `(1 − λ)·xent + λ·rl`.
pub fn total_loss(xent: f64, rl: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * xent + lambda * rl
}

/// Min-max scaling to `[0, 1]`; all zeros when the batch is degenerate.
pub fn min_max_scale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Rewards for one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBatch {
    pub sampled: Vec<f64>,
    pub greedy: Vec<f64>,
    /// `sampled − greedy`.
    pub advantage: Vec<f64>,
    pub scaled: Vec<f64>,
}

impl RewardBatch {
    pub fn new(sampled: Vec<f64>, greedy: Vec<f64>, scaling: RewardScaling) -> Self {
        let advantage: Vec<f64> = sampled.iter().zip(&greedy).map(|(s, g)| s - g).collect();
        let scaled = match scaling {
            RewardScaling::Advantage => min_max_scale(&advantage),
            RewardScaling::Reward => min_max_scale(&sampled),
        };
        Self {
            sampled,
            greedy,
            advantage,
            scaled,
        }
    }
}

/// Rewrite produced by a trace, or `None` when the tags cannot be applied.
pub fn realize(model: &Model, ex: &TrainingExample, trace: &Trace) -> Option<Vec<String>> {
    let tags = model.decode(trace, &ex.ctx).ok()?;
    apply_tags(&ex.example, &ex.ctx, &tags.tags).ok()
}

fn sentence_reward(model: &Model, ex: &TrainingExample, trace: &Trace) -> f64 {
    realize(model, ex, trace).map_or(0.0, |h| bleu_n(&h, &ex.target, 4))
}

/// Mean teacher-forced negative log-likelihood over `batch` and its gradient.
pub fn xent_objective(model: &Model, batch: &[TrainingExample], exec: Execution) -> Result<(f64, Params)> {
    let per = par::map_with(exec, batch, |ex| -> Result<(f64, Params)> {
        let trace = model.forward(&ex.example, &ex.ctx, &mut Replay(&ex.gold))?;
        let (ll, floored) = trace.log_likelihood();
        if floored > 0 {
            log::debug!("{}: {floored} gold probabilities clamped", ex.example.id);
        }
        let mut g = model.params.zeros_like();
        model.backward(&trace, 1.0 / batch.len() as f64, &mut g);
        Ok((-ll, g))
    });
    reduce(model, per, batch.len())
}

/// Mean of `weights[b] · (−log p(samples[b]))` and its gradient, with the
/// samples held fixed.
pub fn reinforce_objective(
    model: &Model,
    batch: &[TrainingExample],
    samples: &[Decisions],
    weights: &[f64],
    exec: Execution,
) -> Result<(f64, Params)> {
    let items: Vec<usize> = (0..batch.len()).collect();
    let per = par::map_with(exec, &items, |&b| -> Result<(f64, Params)> {
        let ex = &batch[b];
        let trace = model.forward(&ex.example, &ex.ctx, &mut Replay(&samples[b]))?;
        let mut g = model.params.zeros_like();
        if weights[b] != 0.0 {
            model.backward(&trace, weights[b] / batch.len() as f64, &mut g);
        }
        Ok((-weights[b] * trace.log_likelihood().0, g))
    });
    reduce(model, per, batch.len())
}

/// Sums per-example results in input order.
fn reduce(model: &Model, per: Vec<Result<(f64, Params)>>, n: usize) -> Result<(f64, Params)> {
    let mut total = 0.0;
    let mut grad = model.params.zeros_like();
    for r in per {
        let (l, g) = r?;
        total += l;
        grad.add_scaled(&g, 1.0);
    }
    Ok((total / n.max(1) as f64, grad))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over a simple combination.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-example RNG derived from `(seed, epoch, index)`.
pub fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64 + 1, index as u64))
}

/// Draws one sample per example and computes rewards against the greedy
/// baseline.
pub fn sample_batch(
    model: &Model,
    batch: &[TrainingExample],
    seed: u64,
    epoch: usize,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(Vec<Decisions>, RewardBatch)> {
    let items: Vec<usize> = (0..batch.len()).collect();
    let per = par::map_with(cfg.execution, &items, |&b| -> Result<(Decisions, f64, f64)> {
        let ex = &batch[b];
        let mut rng = example_rng(seed, epoch, indices[b]);
        let sampled = model.forward(&ex.example, &ex.ctx, &mut Sample(&mut rng))?;
        let greedy = model.forward(&ex.example, &ex.ctx, &mut Greedy)?;
        Ok((
            sampled.decisions(),
            sentence_reward(model, ex, &sampled),
            sentence_reward(model, ex, &greedy),
        ))
    });
    let mut samples = Vec::with_capacity(batch.len());
    let (mut s, mut g) = (Vec::new(), Vec::new());
    for r in per {
        let (d, rs, rg) = r?;
        samples.push(d);
        s.push(rs);
        g.push(rg);
    }
    Ok((samples, RewardBatch::new(s, g, cfg.reward_scaling)))
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, grad: &Params) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = self.lr;
        let eps = self.eps;
        let blocks = params
            .named_mut()
            .into_iter()
            .zip(grad.named())
            .zip(self.m.named_mut().into_iter().zip(self.v.named_mut()));
        for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in blocks {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_bleu4: f64,
    pub dev_em: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,dev_bleu4,dev_em,lr,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.6},{:.4},{:.4},{},{:.3}",
            self.epoch, self.train_loss, self.dev_bleu4, self.dev_em, self.lr, self.seconds
        );
        s
    }
}

/// Corpus BLEU-4 and EM (both ×100) of greedy rewrites.
pub fn evaluate_greedy(model: &Model, data: &[TrainingExample], exec: Execution) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let hyps = par::map_with(exec, data, |ex| -> Result<Vec<String>> {
        let trace = model.forward(&ex.example, &ex.ctx, &mut Greedy)?;
        Ok(realize(model, ex, &trace).unwrap_or_default())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&[String], &[String])> = hyps.iter().zip(data).map(|(h, ex)| (&h[..], &ex.target[..])).collect();
    let em = pairs.iter().map(|(h, r)| exact_match(h, r)).sum::<f64>() / pairs.len() as f64;
    Ok((100.0 * corpus_bleu(&pairs, 4), 100.0 * em))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev_bleu4: f64,
    pub log: Vec<EpochLog>,
}

/// Trains `model` and returns the best-dev checkpoint. `on_epoch` sees every
/// log row as it is produced.
pub fn train(
    mut model: Model,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut adam = Adam::new(&model.params, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX)));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (xent, mut grad) = xent_objective(&model, &batch, cfg.execution)?;
            grad.for_each_mut(|_, mut t| t *= 1.0 - cfg.lambda);
            let mut rl = 0.0;
            if cfg.lambda > 0.0 {
                let (samples, rewards) = sample_batch(&model, &batch, cfg.seed, epoch, chunk, cfg)?;
                let (l, g) = reinforce_objective(&model, &batch, &samples, &rewards.scaled, cfg.execution)?;
                rl = l;
                grad.add_scaled(&g, cfg.lambda);
            }
            let loss = total_loss(xent, rl, cfg.lambda);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(&mut model.params, &grad);
            loss_sum += loss;
            batches += 1;
        }
        let eval_set = if dev_set.is_empty() { train_set } else { dev_set };
        let (dev_bleu4, dev_em) = evaluate_greedy(&model, eval_set, cfg.execution)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_bleu4,
            dev_em,
            lr: adam.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.csv_row());
        on_epoch(&row);
        log.push(row);
        let improved = best.as_ref().is_none_or(|(b, _, _)| dev_bleu4 > *b);
        if improved {
            best = Some((dev_bleu4, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if epoch >= cfg.min_epochs && stale >= cfg.patience {
            break;
        }
    }
    let (best_dev_bleu4, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainReport {
        model,
        best_epoch,
        best_dev_bleu4,
        log,
    })
}
