//! Gold tag extraction: LCS first, syntax-guided alignment for the rest.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{check_unique_ids, read_jsonl};
use crate::align::annotate_lcs;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rules::{extract_rule, rule_strings};
use crate::syntax::{LemmaTable, MultiSpanAlignment, Segment, SyntaxAligner};
use crate::tags::{Action, ContextSequence, DialogueExample, SlottedRule, Span, TagAssignment};
use crate::tree::ConstituencyTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    /// One exact contiguous context match.
    Lcs,
    /// Constituent-wise alignment against the target's parse tree.
    Syntax,
    /// No alignment; the phrase is dropped from the tags.
    Unaligned,
}

/// One inserted target phrase and the raw rule that realizes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPhrase {
    /// 1-based source position (`n + 1` = end of sentence).
    pub position: usize,
    pub tokens: Vec<String>,
    pub method: AlignMethod,
    #[serde(with = "rule_strings")]
    pub rule: SlottedRule,
    pub spans: Vec<Span>,
    /// Applying `rule` with `spans` reproduces `tokens` exactly.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub actions: Vec<Action>,
    pub phrases: Vec<AnnotatedPhrase>,
    pub fully_covered: bool,
}

impl Annotation {
    /// Raw (pre-vocabulary) tags.
    pub fn tags(&self) -> TagAssignment {
        let mut tags = TagAssignment::identity(self.actions.len());
        tags.actions = self.actions.clone();
        for p in &self.phrases {
            tags.rules[p.position - 1] = p.rule.clone();
            tags.spans[p.position - 1] = p.spans.clone();
        }
        tags
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub examples: usize,
    pub fully_covered: usize,
    /// `fully_covered / examples`.
    pub coverage: f64,
    pub phrases: usize,
    pub phrases_per_example: f64,
    /// Examples whose phrases each need at most one span, as a fraction.
    pub single_span_fraction: f64,
    /// Number of phrases by spans per phrase.
    pub span_histogram: BTreeMap<usize, usize>,
    pub by_method: BTreeMap<AlignMethod, usize>,
}

impl AnnotationStats {
    pub fn compute(annotations: &[Annotation]) -> Self {
        let examples = annotations.len();
        let fully_covered = annotations.iter().filter(|a| a.fully_covered).count();
        let phrases: usize = annotations.iter().map(|a| a.phrases.len()).sum();
        let single = annotations
            .iter()
            .filter(|a| a.phrases.iter().all(|p| p.spans.len() <= 1))
            .count();
        let mut span_histogram = BTreeMap::new();
        let mut by_method = BTreeMap::new();
        for p in annotations.iter().flat_map(|a| &a.phrases) {
            *span_histogram.entry(p.spans.len()).or_insert(0) += 1;
            *by_method.entry(p.method).or_insert(0) += 1;
        }
        let frac = |x: usize| if examples == 0 { 0.0 } else { x as f64 / examples as f64 };
        Self {
            examples,
            fully_covered,
            coverage: frac(fully_covered),
            phrases,
            phrases_per_example: frac(phrases),
            single_span_fraction: frac(single),
            span_histogram,
            by_method,
        }
    }
}

/// Optional per-example parse trees (of the target) and lemma tables.
#[derive(Debug, Clone, Default)]
pub struct Sidecars {
    pub trees: HashMap<String, ConstituencyTree>,
    pub lemmas: HashMap<String, LemmaTable>,
}

/// `{"id": .., "tree": "(S ...)"}` per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub id: String,
    pub tree: String,
}

/// `{"id": .., "lemmas": {"token": "lemma", ..}}` per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaRecord {
    pub id: String,
    pub lemmas: BTreeMap<String, String>,
}

impl Sidecars {
    pub fn from_records(trees: &[TreeRecord], lemmas: &[LemmaRecord]) -> Result<Self> {
        check_unique_ids(trees.iter().map(|r| r.id.as_str()))?;
        check_unique_ids(lemmas.iter().map(|r| r.id.as_str()))?;
        let trees = trees
            .iter()
            .map(|r| Ok((r.id.clone(), ConstituencyTree::parse(&r.tree)?)))
            .collect::<Result<_>>()?;
        let lemmas = lemmas
            .iter()
            .map(|r| {
                let mut t = LemmaTable::new();
                for (k, v) in &r.lemmas {
                    t.insert(k.clone(), v.clone());
                }
                (r.id.clone(), t)
            })
            .collect();
        Ok(Self { trees, lemmas })
    }

    pub fn load(trees: Option<&Path>, lemmas: Option<&Path>) -> Result<Self> {
        let t: Vec<TreeRecord> = trees.map(read_jsonl).transpose()?.unwrap_or_default();
        let l: Vec<LemmaRecord> = lemmas.map(read_jsonl).transpose()?.unwrap_or_default();
        Self::from_records(&t, &l)
    }
}

/// Whether every covered piece copies exactly the target tokens it stands for.
fn surface_matches(a: &MultiSpanAlignment, phrase: &[String], ctx: &ContextSequence) -> bool {
    let mut at = 0;
    for seg in &a.segments {
        match seg {
            Segment::Covered { span, len } => {
                if ctx.slice(*span) != phrase.get(at..at + len) {
                    return false;
                }
                at += len;
            }
            Segment::Literal(_) => at += 1,
        }
    }
    at == phrase.len()
}

/// Annotates one example. `tree`, when given, must be a parse of the target.
pub fn annotate_example(
    ex: &DialogueExample,
    tree: Option<&ConstituencyTree>,
    lemmas: &LemmaTable,
) -> Result<Annotation> {
    ex.validate()?;
    let target = ex.target.as_ref().ok_or_else(|| Error::EmptyTarget(ex.id.clone()))?;
    let ctx = ex.context_sequence()?;
    let tree = tree.filter(|t| {
        let ok = t.leaves().iter().copied().eq(target.iter().map(String::as_str));
        if !ok {
            log::warn!("{}: tree leaves do not match the target; ignoring tree", ex.id);
        }
        ok
    });
    let aligner = tree.map(|_| SyntaxAligner::new(target, &ctx, lemmas));
    let (actions, raw) = annotate_lcs(&ex.source, target, &ctx);
    let mut phrases = Vec::with_capacity(raw.len());
    for p in raw {
        let mut out = AnnotatedPhrase {
            position: p.position,
            tokens: p.phrase.clone(),
            method: AlignMethod::Unaligned,
            rule: SlottedRule::null(),
            spans: Vec::new(),
            covered: false,
        };
        if let Some(span) = p.resolved {
            out.method = AlignMethod::Lcs;
            out.rule = SlottedRule::glue(1);
            out.spans = vec![span];
            out.covered = true;
        } else if let (Some(tree), Some(aligner)) = (tree, &aligner) {
            if let Some(a) = aligner.align_phrase(tree, p.target_range.clone()) {
                out.method = AlignMethod::Syntax;
                out.rule = extract_rule(&a);
                out.covered = surface_matches(&a, &p.phrase, &ctx);
                out.spans = a.spans;
            }
        } else {
            log::info!("{}: phrase {:?} unaligned and no tree available", ex.id, p.phrase.join(" "));
        }
        phrases.push(out);
    }
    let fully_covered = phrases.iter().all(|p| p.covered);
    Ok(Annotation {
        id: ex.id.clone(),
        actions,
        phrases,
        fully_covered,
    })
}

/// Annotates a corpus in input order.
pub fn annotate(
    corpus: &[DialogueExample],
    sidecars: &Sidecars,
    exec: Execution,
) -> Result<(Vec<Annotation>, AnnotationStats)> {
    let empty = LemmaTable::new();
    let annotations = par::map_with(exec, corpus, |ex| {
        annotate_example(ex, sidecars.trees.get(&ex.id), sidecars.lemmas.get(&ex.id).unwrap_or(&empty))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let stats = AnnotationStats::compute(&annotations);
    Ok((annotations, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::apply_tags;
    use crate::tags::fixtures::{federer, toks};

    #[test]
    fn lcs_and_syntax_together() {
        let ex = federer();
        let tree = ConstituencyTree::parse(
            "(S (VBD did) (NP federer) (VB have) (DT any) (JJ other) (NNS injuries) \
             (PP (IN besides) (NP (PRP$ his) (NN back))) (. ?))",
        )
        .unwrap();
        let a = annotate_example(&ex, Some(&tree), &LemmaTable::new()).unwrap();
        assert!(a.fully_covered);
        assert_eq!(a.phrases.len(), 2);
        assert_eq!(a.phrases[0].method, AlignMethod::Lcs);
        assert_eq!(a.phrases[0].spans, vec![Span::new(3, 3)]);
        assert_eq!(a.phrases[1].method, AlignMethod::Syntax);
        assert_eq!(a.phrases[1].rule.to_string(), "besides <SL>");
        assert_eq!(a.phrases[1].spans, vec![Span::new(12, 13)]);
        let ctx = ex.context_sequence().unwrap();
        assert_eq!(apply_tags(&ex, &ctx, &a.tags()).unwrap(), ex.target.clone().unwrap());

        let no_tree = annotate_example(&ex, None, &LemmaTable::new()).unwrap();
        assert!(!no_tree.fully_covered);
        assert_eq!(no_tree.phrases[1].method, AlignMethod::Unaligned);
        assert!(no_tree.tags().rules[6].is_null());
    }

    #[test]
    fn lemma_only_match_is_not_covered() {
        let ex = DialogueExample {
            id: "x".into(),
            context: vec![toks("the dogs bark")],
            source: toks("why ?"),
            target: Some(toks("why the dog ?")),
        };
        let tree = ConstituencyTree::parse("(S (W why) (NP (DT the) (NN dog)) (. ?))").unwrap();
        let a = annotate_example(&ex, Some(&tree), &LemmaTable::new()).unwrap();
        assert_eq!(a.phrases[0].method, AlignMethod::Syntax);
        assert!(!a.phrases[0].covered);
        assert!(!a.fully_covered);
    }

    #[test]
    fn identity_corpus_is_fully_covered() {
        let corpus: Vec<DialogueExample> = (0..5)
            .map(|i| DialogueExample {
                id: i.to_string(),
                context: vec![toks("hello there")],
                source: toks("how are you ?"),
                target: Some(toks("how are you ?")),
            })
            .collect();
        let (anns, stats) = annotate(&corpus, &Sidecars::default(), Execution::Sequential).unwrap();
        assert!(anns.iter().all(|a| a.fully_covered && a.phrases.is_empty()));
        assert_eq!(stats.coverage, 1.0);
        assert_eq!(stats.phrases, 0);
        assert_eq!(stats.single_span_fraction, 1.0);
    }

    #[test]
    fn missing_target_is_an_error() {
        let mut ex = federer();
        ex.target = None;
        assert!(matches!(
            annotate_example(&ex, None, &LemmaTable::new()),
            Err(Error::EmptyTarget(_))
        ));
    }
}
