//! Synthetic dialogues with planted rules and known gold tags.
//!
//! Context turns never contain a rule literal, so every planted literal is
//! out-of-context and every slot filler is a single first mention.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotate::TreeRecord;
use crate::align::resolve_single_span;
use crate::error::{Error, Result};
use crate::par;
use crate::tags::{apply_tags, Action, DialogueExample, RuleElement, SlottedRule, Span, TagAssignment};

/// Planted rule families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// `besides <SL>` after a question about other injuries.
    Besides,
    /// `<SL> 's` replacing a possessive pronoun.
    Possessive,
    /// `other than <SL>` after a question about other titles.
    OtherThan,
    /// `in addition to <SL>` after a question about other sports.
    InAdditionTo,
    /// `<SL> and <SL>` replacing "them".
    And,
}

impl RuleKind {
    pub const ALL: [RuleKind; 5] = [
        RuleKind::Besides,
        RuleKind::Possessive,
        RuleKind::OtherThan,
        RuleKind::InAdditionTo,
        RuleKind::And,
    ];

    pub fn planted(self) -> SlottedRule {
        parse(match self {
            RuleKind::Besides => "besides <SL>",
            RuleKind::Possessive => "<SL> 's",
            RuleKind::OtherThan => "other than <SL>",
            RuleKind::InAdditionTo => "in addition to <SL>",
            RuleKind::And => "<SL> and <SL>",
        })
    }

    /// Near-duplicates with the same slot count.
    pub fn variants(self) -> [SlottedRule; 2] {
        let [a, b] = match self {
            RuleKind::Besides => ["also besides <SL>", "besides merely <SL>"],
            RuleKind::Possessive => ["<SL> 's own", "only <SL> 's"],
            RuleKind::OtherThan => ["anything other than <SL>", "other than just <SL>"],
            RuleKind::InAdditionTo => ["in addition <SL>", "in addition to all <SL>"],
            RuleKind::And => ["<SL> and also <SL>", "both <SL> and <SL>"],
        };
        [parse(a), parse(b)]
    }
}

fn parse(s: &str) -> SlottedRule {
    SlottedRule::parse(s).expect("static rule")
}

/// Which template family produced an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Rule(RuleKind),
    /// A pronoun replaced by a single span.
    Glue,
    /// Source already self-contained.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub size: usize,
    pub seed: u64,
    /// Relative weight of each planted rule family.
    pub rules: Vec<(RuleKind, f64)>,
    pub glue_weight: f64,
    pub identity_weight: f64,
    /// Per-family instance indices realized with a variant rule instead of
    /// the planted one (the j-th entry uses variant j).
    pub variant_instances: Vec<usize>,
    /// Up to this many filler turns are prepended to each context.
    pub max_filler_turns: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 1000,
            seed: 0,
            rules: vec![
                (RuleKind::Besides, 0.21),
                (RuleKind::Possessive, 0.20),
                (RuleKind::OtherThan, 0.01),
                (RuleKind::InAdditionTo, 0.18),
                (RuleKind::And, 0.17),
            ],
            glue_weight: 0.14,
            identity_weight: 0.09,
            variant_instances: vec![3, 7],
            max_filler_turns: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let weights = self.weights();
        if weights.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("generator weights must be finite and non-negative".into()));
        }
        if weights.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
            return Err(Error::Config("generator weights sum to zero".into()));
        }
        if self.variant_instances.len() > 2 {
            return Err(Error::Config("each family has two variants".into()));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<(ExampleKind, f64)> {
        let mut w: Vec<(ExampleKind, f64)> = self.rules.iter().map(|&(k, w)| (ExampleKind::Rule(k), w)).collect();
        w.push((ExampleKind::Glue, self.glue_weight));
        w.push((ExampleKind::Identity, self.identity_weight));
        w
    }

    /// Exact per-kind counts by largest remainder, ties broken by listing order.
    pub fn counts(&self) -> Vec<(ExampleKind, usize)> {
        let weights = self.weights();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let quotas: Vec<f64> = weights.iter().map(|(_, w)| w / total * self.size as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = self.size - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        weights.iter().map(|(k, _)| *k).zip(counts).collect()
    }
}

/// One generated example with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExample {
    pub example: DialogueExample,
    pub kind: ExampleKind,
    /// The rule actually realized (planted or variant), null for identity.
    pub rule: SlottedRule,
    pub variant: bool,
    pub tags: TagAssignment,
    /// Bracketed parse of the target.
    pub tree: String,
}

/// Serializable gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub kind: ExampleKind,
    pub variant: bool,
    pub actions: Vec<Action>,
    pub rules: Vec<String>,
    pub spans: Vec<Vec<Span>>,
}

impl SyntheticExample {
    pub fn gold_record(&self) -> GoldRecord {
        GoldRecord {
            id: self.example.id.clone(),
            kind: self.kind,
            variant: self.variant,
            actions: self.tags.actions.clone(),
            rules: self.tags.rules.iter().map(ToString::to_string).collect(),
            spans: self.tags.spans.clone(),
        }
    }

    pub fn tree_record(&self) -> TreeRecord {
        TreeRecord {
            id: self.example.id.clone(),
            tree: self.tree.clone(),
        }
    }
}

struct Person {
    name: &'static str,
    subj: &'static str,
    poss: &'static str,
}

const fn he(name: &'static str) -> Person {
    Person { name, subj: "he", poss: "his" }
}

const fn she(name: &'static str) -> Person {
    Person { name, subj: "she", poss: "her" }
}

const PERSONS: [Person; 12] = [
    he("federer"),
    he("nadal"),
    he("djokovic"),
    he("murray"),
    she("serena williams"),
    she("maria sharapova"),
    he("pete sampras"),
    he("agassi"),
    he("becker"),
    she("steffi graf"),
    he("borg"),
    she("martina hingis"),
];

const BODY_PARTS: [&str; 10] = [
    "knee", "ankle", "wrist", "shoulder", "elbow", "hip", "lower back", "left foot", "right hand", "neck",
];

const EVENTS: [&str; 8] = [
    "wimbledon",
    "us open",
    "french open",
    "davis cup",
    "olympics",
    "masters cup",
    "australian open",
    "laver cup",
];

const SPORTS: [&str; 8] = [
    "golf", "chess", "soccer", "cricket", "table tennis", "skiing", "poker", "basketball",
];

const FILLERS: [&str; 5] = ["tell me more .", "that is interesting .", "okay .", "sure , go on .", "i see ."];

/// Every literal any planted rule or variant can insert.
pub fn literal_words() -> Vec<String> {
    let mut words: Vec<String> = RuleKind::ALL
        .iter()
        .flat_map(|k| std::iter::once(k.planted()).chain(k.variants()))
        .flat_map(|r| {
            r.elements()
                .iter()
                .filter_map(|e| match e {
                    RuleElement::Literal(t) => Some(t.clone()),
                    RuleElement::Slot => None,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    words.sort();
    words.dedup();
    words
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// A template filled in: context, source, where the phrase goes, what fills
/// each slot, and whether the source token at `position` is replaced.
struct Draft {
    context: Vec<String>,
    source: String,
    /// 0-based index into the source tokens (`n` = end of sentence).
    position: usize,
    replaces: bool,
    fillers: Vec<&'static str>,
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty pool")
}

fn draft<R: Rng>(kind: ExampleKind, rng: &mut R) -> Draft {
    let p = pick(rng, &PERSONS);
    let e = *pick(rng, &EVENTS);
    // Insert before the final "?".
    let before_end = |source: String, context: Vec<String>, fillers| {
        let position = source.split_whitespace().count() - 1;
        Draft {
            context,
            source,
            position,
            replaces: false,
            fillers,
        }
    };
    // Replace the token equal to `word`.
    let replace = |source: String, word: &str, context: Vec<String>, fillers| {
        let position = source
            .split_whitespace()
            .position(|t| t == word)
            .expect("template mentions the replaced word");
        Draft {
            context,
            source,
            position,
            replaces: true,
            fillers,
        }
    };
    match kind {
        ExampleKind::Rule(RuleKind::Besides) => {
            let b = *pick(rng, &BODY_PARTS);
            let context = vec![
                format!("why did {} miss the {} ?", p.name, e),
                format!("{} hurt {} {} during practice .", p.subj, p.poss, b),
            ];
            let source = match rng.gen_range(0..2) {
                0 => format!("did {} have any other injuries ?", p.subj),
                _ => format!("was {} hurt anywhere else ?", p.subj),
            };
            before_end(source, context, vec![b])
        }
        ExampleKind::Rule(RuleKind::Possessive) => {
            let context = vec![format!("who won the {} this year ?", e), format!("{} did , after a long match .", p.name)];
            let source = match rng.gen_range(0..2) {
                0 => format!("what is {} ranking now ?", p.poss),
                _ => format!("who was {} coach then ?", p.poss),
            };
            replace(source, p.poss, context, vec![p.name])
        }
        ExampleKind::Rule(RuleKind::OtherThan) => {
            let context = vec![
                format!("what did {} do last year ?", p.name),
                format!("{} won the {} for the first time .", p.subj, e),
            ];
            let source = match rng.gen_range(0..2) {
                0 => format!("what else did {} win ?", p.subj),
                _ => format!("did {} win more titles ?", p.subj),
            };
            before_end(source, context, vec![e])
        }
        ExampleKind::Rule(RuleKind::InAdditionTo) => {
            let s = *pick(rng, &SPORTS);
            let context = vec![format!("does {} have hobbies ?", p.name), format!("{} loves {} .", p.subj, s)];
            let source = match rng.gen_range(0..2) {
                0 => format!("which sports does {} play ?", p.subj),
                _ => format!("what games does {} enjoy ?", p.subj),
            };
            before_end(source, context, vec![s])
        }
        ExampleKind::Rule(RuleKind::And) => {
            let q = loop {
                let q = pick(rng, &PERSONS);
                if q.name != p.name {
                    break q;
                }
            };
            let context = vec![format!("who played the {} final ?", e), format!("{} faced {} .", p.name, q.name)];
            let source = match rng.gen_range(0..2) {
                0 => "who coached them ?".to_owned(),
                _ => "when did fans first see them ?".to_owned(),
            };
            replace(source, "them", context, vec![p.name, q.name])
        }
        ExampleKind::Glue => {
            let context = vec![
                format!("tell me about {} .", p.name),
                format!("{} is a tennis player from europe .", p.subj),
            ];
            let source = match rng.gen_range(0..2) {
                0 => format!("how old is {} ?", p.subj),
                _ => format!("where does {} live ?", p.subj),
            };
            replace(source, p.subj, context, vec![p.name])
        }
        ExampleKind::Identity => {
            let context = vec![format!("{} is playing today .", p.name), "me too .".to_owned()];
            let source = match rng.gen_range(0..2) {
                0 => "what time is the match ?".to_owned(),
                _ => "where is the stadium ?".to_owned(),
            };
            Draft {
                position: 0,
                replaces: false,
                fillers: Vec::new(),
                context,
                source,
            }
        }
    }
}

/// Bracketed tree of `target`: one preterminal per token outside the phrase
/// and a `PP` (rules) or `NP` (glue) constituent for the phrase.
fn target_tree(target: &[String], phrase_at: usize, rule: &SlottedRule, fillers: &[Vec<String>]) -> String {
    let leaf = |label: &str, t: &str| format!("({label} {t})");
    let np = |toks: &[String]| {
        let inner: Vec<String> = toks.iter().map(|t| leaf("N", t)).collect();
        format!("(NP {})", inner.join(" "))
    };
    let phrase_len = rule.literal_count() + fillers.iter().map(Vec::len).sum::<usize>();
    let phrase = if rule.is_glue() {
        np(&fillers.concat())
    } else {
        let mut j = 0;
        let parts: Vec<String> = rule
            .elements()
            .iter()
            .map(|e| match e {
                RuleElement::Literal(t) => leaf("L", t),
                RuleElement::Slot => {
                    j += 1;
                    np(&fillers[j - 1])
                }
            })
            .collect();
        format!("(PP {})", parts.join(" "))
    };
    let mut parts: Vec<String> = target[..phrase_at].iter().map(|t| leaf("X", t)).collect();
    if phrase_len > 0 {
        parts.push(phrase);
    }
    parts.extend(target[phrase_at + phrase_len..].iter().map(|t| leaf("X", t)));
    format!("(S {})", parts.join(" "))
}

fn generate_one(spec: &SyntheticSpec, index: usize, kind: ExampleKind, instance: usize) -> Result<SyntheticExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let d = draft(kind, &mut rng);
    let fillers = rng.gen_range(0..=spec.max_filler_turns);
    let mut turns: Vec<Vec<String>> = (0..fillers).map(|_| toks(pick(&mut rng, &FILLERS))).collect();
    turns.extend(d.context.iter().map(|t| toks(t)));
    let source = toks(&d.source);
    let mut example = DialogueExample {
        id: format!("syn-{index:05}"),
        context: turns,
        source,
        target: None,
    };
    let ctx = example.context_sequence()?;
    let n = example.source.len();

    let variant_slot = spec.variant_instances.iter().position(|&v| v == instance);
    let (rule, variant) = match kind {
        ExampleKind::Rule(k) => match variant_slot {
            Some(j) => (k.variants()[j].clone(), true),
            None => (k.planted(), false),
        },
        ExampleKind::Glue => (SlottedRule::glue(1), false),
        ExampleKind::Identity => (SlottedRule::null(), false),
    };
    let mut tags = TagAssignment::identity(n);
    let filler_toks: Vec<Vec<String>> = d.fillers.iter().map(|f| toks(f)).collect();
    if !rule.is_null() {
        let spans = filler_toks
            .iter()
            .map(|f| resolve_single_span(f, &ctx).expect("filler is mentioned in the context"))
            .collect();
        if d.replaces {
            tags.actions[d.position] = Action::Delete;
        }
        tags.rules[d.position] = rule.clone();
        tags.spans[d.position] = spans;
    }
    let target = apply_tags(&example, &ctx, &tags)?;
    // Source tokens before the insertion point are all kept, so the phrase
    // starts at the same index in the target.
    let tree = target_tree(&target, d.position, &rule, &filler_toks);
    example.target = Some(target);
    Ok(SyntheticExample {
        example,
        kind,
        rule,
        variant,
        tags,
        tree,
    })
}

/// Generates `spec.size` examples. Output depends only on `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticExample>> {
    spec.validate()?;
    let mut schedule: Vec<ExampleKind> = spec
        .counts()
        .into_iter()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c))
        .collect();
    schedule.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut seen = std::collections::HashMap::new();
    let jobs: Vec<(usize, ExampleKind, usize)> = schedule
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let c = seen.entry(k).or_insert(0usize);
            *c += 1;
            (i, k, *c - 1)
        })
        .collect();
    par::map(&jobs, |&(i, k, inst)| generate_one(spec, i, k, inst))
        .into_iter()
        .collect()
}
