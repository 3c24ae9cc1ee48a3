//! End-to-end stages: annotate, build rules, predict, evaluate.

pub mod annotate;
pub mod corpus;
pub mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityConfig;
use crate::error::{Error, Result};
use crate::metrics::{ExampleScores, ScoreReport};
use crate::model::{Mode, Model, ModelConfig, TokenVocab};
use crate::par::{self, Execution};
use crate::rules::{cluster_rules, count_rules, filter_clusters, ExtractedRule, RuleVocabulary, TagRecord};
use crate::tags::{apply_tags, Action, DialogueExample, Span, TagAssignment};
use crate::train::TrainingExample;

pub use annotate::{annotate, annotate_example, AlignMethod, AnnotatedPhrase, Annotation, AnnotationStats, Sidecars};
pub use corpus::{read_corpus, read_jsonl, split_dev, write_jsonl};
pub use synth::{generate_synthetic, ExampleKind, RuleKind, SyntheticExample, SyntheticSpec};

/// Default share below which a rule cluster is folded into glue.
pub const DEFAULT_RULE_THRESHOLD: f64 = 0.005;

/// Threshold grid for vocabulary-size sweeps.
pub const SWEEP_THRESHOLDS: [f64; 4] = [0.00225, 0.005, 0.0075, 0.011];

#[derive(Debug, Clone, PartialEq)]
pub struct RuleBuildConfig {
    pub threshold: f64,
    /// Glue rules exist for at least `1..=min_glue` slots.
    pub min_glue: usize,
    pub affinity: AffinityConfig,
}

impl Default for RuleBuildConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_RULE_THRESHOLD,
            min_glue: 1,
            affinity: AffinityConfig::default(),
        }
    }
}

/// Raw rule counts over every aligned phrase.
pub fn extracted_rules(annotations: &[Annotation]) -> Vec<ExtractedRule> {
    count_rules(
        annotations
            .iter()
            .flat_map(|a| &a.phrases)
            .filter(|p| p.method != AlignMethod::Unaligned)
            .map(|p| &p.rule),
    )
}

#[derive(Debug, Clone)]
pub struct RuleBuild {
    pub vocab: RuleVocabulary,
    /// Final tags per example, in annotation order.
    pub records: Vec<TagRecord>,
    pub extracted: Vec<ExtractedRule>,
}

/// Extract, cluster, filter and remap.
pub fn build_rules(annotations: &[Annotation], cfg: &RuleBuildConfig) -> Result<RuleBuild> {
    let extracted = extracted_rules(annotations);
    let clusters = cluster_rules(&extracted, &cfg.affinity);
    let vocab = filter_clusters(&clusters, &extracted, cfg.threshold, cfg.min_glue);
    let records = annotations
        .iter()
        .map(|a| vocab.encode_tags(&a.id, &vocab.remap_tags(&a.tags())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(RuleBuild {
        vocab,
        records,
        extracted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub rules: usize,
    /// Rules other than null and glue.
    pub literal_rules: usize,
}

/// Vocabulary size at each threshold; clustering runs once.
pub fn sweep_thresholds(annotations: &[Annotation], thresholds: &[f64], cfg: &RuleBuildConfig) -> Vec<SweepPoint> {
    let extracted = extracted_rules(annotations);
    let clusters = cluster_rules(&extracted, &cfg.affinity);
    thresholds
        .iter()
        .map(|&threshold| {
            let v = filter_clusters(&clusters, &extracted, threshold, cfg.min_glue);
            SweepPoint {
                threshold,
                rules: v.len(),
                literal_rules: v.rules().filter(|r| r.literal_count() > 0).count(),
            }
        })
        .collect()
}

/// Pairs examples with their tag records and converts them for training.
pub fn training_examples(
    model: &Model,
    corpus: &[DialogueExample],
    records: &[TagRecord],
    vocab: &RuleVocabulary,
) -> Result<Vec<TrainingExample>> {
    let by_id: HashMap<&str, &TagRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    corpus
        .iter()
        .map(|ex| {
            let rec = by_id
                .get(ex.id.as_str())
                .ok_or_else(|| Error::MissingPredictions(vec![ex.id.clone()]))?;
            TrainingExample::new(model, ex.clone(), &vocab.decode_tags(rec)?)
        })
        .collect()
}

/// A fresh model whose token table covers `train` and the vocabulary.
pub fn new_model(config: ModelConfig, train: &[DialogueExample], vocab: &RuleVocabulary, seed: u64) -> Result<Model> {
    let max_slots = vocab.max_slots().max(1);
    let tokens = TokenVocab::from_corpus(train, vocab.rules(), max_slots);
    Model::new(config, tokens, vocab.rules().cloned().collect(), seed)
}

/// Checks that `vocab` is the inventory `model` was trained with.
pub fn check_compatible(model: &Model, vocab: &RuleVocabulary) -> Result<()> {
    if model.mode() == Mode::Hct && !model.rules.iter().eq(vocab.rules()) {
        return Err(Error::VocabMismatch {
            vocab: vocab.len(),
            model: model.rules.len(),
        });
    }
    Ok(())
}

/// Tags as written in prediction files, with rules spelled out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagsJson {
    pub actions: Vec<Action>,
    pub rules: Vec<String>,
    pub spans: Vec<Vec<Span>>,
}

impl From<&TagAssignment> for TagsJson {
    fn from(t: &TagAssignment) -> Self {
        Self {
            actions: t.actions.clone(),
            rules: t.rules.iter().map(ToString::to_string).collect(),
            spans: t.spans.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub rewrite: Vec<String>,
    pub tags: TagsJson,
}

/// Greedy rewrites in input order. Fails before inference on a vocabulary
/// mismatch.
pub fn predict(
    corpus: &[DialogueExample],
    model: &Model,
    vocab: Option<&RuleVocabulary>,
    exec: Execution,
) -> Result<Vec<Prediction>> {
    match (model.mode(), vocab) {
        (_, Some(v)) => check_compatible(model, v)?,
        (Mode::Hct, None) => return Err(Error::Config("HCT prediction needs the rule vocabulary".into())),
        (Mode::Mst, None) => {}
    }
    par::map_with(exec, corpus, |ex| {
        let (tags, _) = model.predict_tags(ex)?;
        let ctx = ex.context_sequence()?;
        Ok(Prediction {
            id: ex.id.clone(),
            rewrite: apply_tags(ex, &ctx, &tags.tags)?,
            tags: TagsJson::from(&tags.tags),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    #[serde(flatten)]
    pub scores: ExampleScores,
}

/// Scores predictions against corpus targets, in corpus order.
pub fn evaluate(predictions: &[Prediction], corpus: &[DialogueExample]) -> Result<(ScoreReport, Vec<ScoredExample>)> {
    corpus::check_unique_ids(predictions.iter().map(|p| p.id.as_str()))?;
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing: Vec<String> = corpus
        .iter()
        .filter(|ex| !by_id.contains_key(ex.id.as_str()))
        .map(|ex| ex.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let pairs = corpus
        .iter()
        .map(|ex| {
            let target = ex.target.as_deref().ok_or_else(|| Error::EmptyTarget(ex.id.clone()))?;
            Ok((by_id[ex.id.as_str()].rewrite.as_slice(), target))
        })
        .collect::<Result<Vec<_>>>()?;
    let (report, per) = ScoreReport::compute(&pairs);
    let scored = corpus
        .iter()
        .zip(per)
        .map(|(ex, scores)| ScoredExample {
            id: ex.id.clone(),
            scores,
        })
        .collect();
    Ok((report, scored))
}
