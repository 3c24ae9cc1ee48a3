//! The two-level tagger: shared encoder, action and rule heads, and the
//! semi-autoregressive span predictor.

mod attention;
mod checkpoint;
mod encoder;
mod params;
mod tagger;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tags::{ContextSequence, DialogueExample, RuleElement, SlottedRule, Span, SEP};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::EncCache;
pub use params::{AttnParams, LayerParams, Params};
pub use tagger::{Decisions, Greedy, Policy, Replay, Sample, SpanStep, StepTrace, Trace};

/// Span-emission regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Up to `l` spans per position, terminated by the stop symbol.
    Mst,
    /// A rule per position; exactly one span per rule slot.
    Hct,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mst => "mst",
            Mode::Hct => "hct",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mst" => Ok(Mode::Mst),
            "hct" => Ok(Mode::Hct),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected mst or hct)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Embedding width.
    pub d: usize,
    /// Encoder layers.
    pub depth: usize,
    /// Feed-forward width inside each encoder layer.
    pub ffn: usize,
    pub max_positions: usize,
    /// Maximum spans per position in MST mode.
    pub max_spans: usize,
    /// Number of slot tokens; the largest slot count a rule may have.
    pub max_slots: usize,
    /// Rule vocabulary size (HCT only; 0 in MST mode).
    pub rules: usize,
    pub vocab_size: usize,
    /// Standard deviation of embedding initialization.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hct,
            d: 32,
            depth: 2,
            ffn: 64,
            max_positions: 128,
            max_spans: 3,
            max_slots: 3,
            rules: 1,
            vocab_size: 0,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if self.depth == 0 || self.ffn == 0 || self.max_positions == 0 {
            return bad("depth, ffn and max_positions must be positive");
        }
        if self.max_spans == 0 {
            return bad("max_spans (l) must be at least 1");
        }
        if self.mode == Mode::Hct && self.rules == 0 {
            return bad("HCT mode needs at least one rule");
        }
        if self.vocab_size < TokenVocab::FIRST_WORD {
            return bad("token vocabulary is missing special tokens");
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad("init_scale must be positive");
        }
        Ok(())
    }
}

/// Token ↔ id table. Ids below [`TokenVocab::FIRST_WORD`] are special tokens;
/// slot tokens `[SL0]..` follow them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_slots: usize,
}

impl TokenVocab {
    pub const UNK: usize = 0;
    pub const SEP: usize = 1;
    pub const EOS: usize = 2;
    pub const CLS: usize = 3;
    pub const FIRST_WORD: usize = 4;

    /// Specials, `max_slots` slot tokens, then the sorted distinct `words`.
    pub fn new<I, S>(words: I, max_slots: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = ["[UNK]", SEP, "[EOS]", "[CLS]"].map(String::from).to_vec();
        tokens.extend((0..max_slots).map(|j| format!("[SL{j}]")));
        let specials: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_owned())
            .filter(|w| !specials.contains(w))
            .collect();
        tokens.extend(words);
        Self::from_tokens(tokens, max_slots)
    }

    /// Every context, source and rule-literal token of `examples` and `rules`.
    pub fn from_corpus<'a>(
        examples: impl IntoIterator<Item = &'a DialogueExample>,
        rules: impl IntoIterator<Item = &'a SlottedRule>,
        max_slots: usize,
    ) -> Self {
        let mut words: Vec<&str> = Vec::new();
        for ex in examples {
            words.extend(ex.context.iter().flatten().map(String::as_str));
            words.extend(ex.source.iter().map(String::as_str));
        }
        for r in rules {
            words.extend(r.elements().iter().filter_map(|e| match e {
                RuleElement::Literal(t) => Some(t.as_str()),
                RuleElement::Slot => None,
            }));
        }
        Self::new(words, max_slots)
    }

    pub(crate) fn from_tokens(tokens: Vec<String>, max_slots: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            max_slots,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn max_slots(&self) -> usize {
        self.max_slots
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(Self::UNK)
    }

    pub fn slot(&self, j: usize) -> Result<usize> {
        if j >= self.max_slots {
            return Err(Error::TooManySlots {
                slots: j + 1,
                max: self.max_slots,
            });
        }
        Ok(Self::FIRST_WORD + j)
    }
}

/// Encoder output split into context rows and source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    /// `m × d`, one row per context token.
    pub context: Array2<f64>,
    /// `(n + 1) × d`: source rows plus the end-of-sentence boundary row.
    pub source: Array2<f64>,
}

/// A configured tagger with its vocabularies and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokens: TokenVocab,
    /// Rule inventory indexed by rule id (HCT); empty in MST mode.
    pub rules: Vec<SlottedRule>,
    pub params: Params,
}

impl Model {
    pub fn new(mut config: ModelConfig, tokens: TokenVocab, rules: Vec<SlottedRule>, seed: u64) -> Result<Self> {
        config.vocab_size = tokens.len();
        config.max_slots = tokens.max_slots();
        if config.mode == Mode::Mst {
            config.rules = 0;
        } else {
            config.rules = rules.len();
            if rules.first().is_none_or(|r| !r.is_null()) {
                return Err(Error::Config("rule 0 must be the null rule".into()));
            }
            if let Some(r) = rules.iter().find(|r| r.slot_count() > config.max_slots) {
                return Err(Error::TooManySlots {
                    slots: r.slot_count(),
                    max: config.max_slots,
                });
            }
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        let rules = if config.mode == Mode::Hct { rules } else { Vec::new() };
        Ok(Self {
            config,
            tokens,
            rules,
            params,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Token ids and segment ids of `context ; source ; [EOS]`.
    pub(crate) fn input_ids(&self, ctx: &ContextSequence, source: &[String]) -> (Vec<usize>, Vec<usize>) {
        let mut ids: Vec<usize> = ctx.tokens().iter().map(|t| self.tokens.id(t)).collect();
        let mut segs = vec![0; ids.len()];
        ids.extend(source.iter().map(|t| self.tokens.id(t)));
        ids.push(TokenVocab::EOS);
        segs.resize(ids.len(), 1);
        (ids, segs)
    }

    pub(crate) fn rule_ids(&self, rule: &SlottedRule) -> Result<Vec<usize>> {
        let mut ids = vec![TokenVocab::CLS];
        let mut j = 0;
        for el in rule.elements() {
            match el {
                RuleElement::Literal(t) => ids.push(self.tokens.id(t)),
                RuleElement::Slot => {
                    ids.push(self.tokens.slot(j)?);
                    j += 1;
                }
            }
        }
        Ok(ids)
    }

    pub fn encode(&self, ctx: &ContextSequence, source: &[String]) -> Result<EncodedPair> {
        if source.is_empty() {
            return Err(Error::EmptySource);
        }
        let (ids, segs) = self.input_ids(ctx, source);
        let c = encoder::encode(&self.params, &ids, &segs);
        let m = ctx.len();
        Ok(EncodedPair {
            context: encoder::rows(&c, 0, m),
            source: encoder::rows(&c, m, ids.len()),
        })
    }

    /// `n × 2` KEEP/DELETE distributions from the first `n` source rows.
    pub fn action_probs(&self, enc: &EncodedPair) -> Array2<f64> {
        let n = enc.source.nrows() - 1;
        let mut z = enc.source.slice(ndarray::s![..n, ..]).dot(&self.params.w_a);
        encoder::softmax_rows(&mut z);
        z
    }

    /// `(n + 1) × p` rule distributions (HCT only).
    pub fn rule_probs(&self, enc: &EncodedPair) -> Result<Array2<f64>> {
        let w = self.params.w_r.as_ref().ok_or(Error::WrongMode("hct"))?;
        let mut z = enc.source.dot(w);
        encoder::softmax_rows(&mut z);
        Ok(z)
    }

    /// `[CLS]` row of the encoder run on `[CLS]` + rule tokens.
    pub fn embed_rule(&self, rule: &SlottedRule) -> Result<Array1<f64>> {
        let ids = self.rule_ids(rule)?;
        let segs = vec![2; ids.len()];
        Ok(encoder::encode(&self.params, &ids, &segs).out.row(0).to_owned())
    }

    /// Greedy tags for `example`.
    pub fn predict_tags(&self, example: &DialogueExample) -> Result<(TagsWithFlags, Trace)> {
        let ctx = example.context_sequence()?;
        let trace = self.forward(example, &ctx, &mut Greedy)?;
        let tags = self.decode(&trace, &ctx)?;
        Ok((tags, trace))
    }
}

/// Decoded tags plus the number of spans whose end had to be clamped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagsWithFlags {
    pub tags: crate::tags::TagAssignment,
    pub clamped_ends: usize,
}

/// Converts a decoded start/end index pair into a context span.
pub(crate) fn span_from(start: usize, end: usize) -> (Span, bool) {
    if end < start {
        (Span::new(start, start), true)
    } else {
        (Span::new(start, end), false)
    }
}
