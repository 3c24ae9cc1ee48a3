//! Syntax-guided alignment of target phrases that have no single context span.
//!
//! The smallest target constituent covering a phrase is walked bottom-up:
//! each constituent either keeps its own best context match or adopts the
//! concatenated matches of its children, whichever covers strictly more
//! characters. Matching is done on lemmas.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tags::{ContextSequence, Span, SEP};
use crate::tree::ConstituencyTree;

/// Fallback lemmatizer: lowercases and strips one suffix.
///
/// Suffixes are tried in order: `'s`; `ies` → `y`; `sses` → `ss`; `s` unless
/// the word ends in `ss` or `us`. A strip that would leave nothing is skipped.
pub fn naive_lemmatize(tok: &str) -> String {
    let w = tok.to_lowercase();
    let stem = if let Some(s) = w.strip_suffix("'s") {
        s.to_owned()
    } else if let Some(s) = w.strip_suffix("ies") {
        format!("{s}y")
    } else if let Some(s) = w.strip_suffix("sses") {
        format!("{s}ss")
    } else if w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") {
        w[..w.len() - 1].to_owned()
    } else {
        w.clone()
    };
    if stem.is_empty() {
        w
    } else {
        stem
    }
}

/// Token → lemma lookup with [`naive_lemmatize`] as the fallback.
#[derive(Debug, Clone, Default)]
pub struct LemmaTable {
    map: HashMap<String, String>,
}

impl LemmaTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records externally supplied lemmas for parallel token/lemma lists.
    pub fn extend_parallel(&mut self, tokens: &[String], lemmas: &[String]) {
        for (t, l) in tokens.iter().zip(lemmas) {
            self.map.insert(t.clone(), l.clone());
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, lemma: impl Into<String>) {
        self.map.insert(token.into(), lemma.into());
    }

    pub fn lemma(&self, token: &str) -> String {
        self.map
            .get(token)
            .cloned()
            .unwrap_or_else(|| naive_lemmatize(token))
    }
}

/// One piece of an aligned phrase, in target order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// `len` target tokens copied from a context span.
    Covered { span: Span, len: usize },
    /// A target token with no context match.
    Literal(String),
}

/// Result of aligning one phrase to (possibly several) context spans.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MultiSpanAlignment {
    pub spans: Vec<Span>,
    pub covered_chars: usize,
    /// Maximal runs of uncovered target tokens, in order.
    pub uncovered: Vec<Vec<String>>,
    pub segments: Vec<Segment>,
}

impl MultiSpanAlignment {
    fn from_matches(phrase: &[String], offset: usize, matches: &[(Range<usize>, Span)], chars: usize) -> Self {
        let mut out = MultiSpanAlignment {
            covered_chars: chars,
            ..Default::default()
        };
        let mut at = offset;
        let end = offset + phrase.len();
        let mut run: Vec<String> = Vec::new();
        let literal = |out: &mut MultiSpanAlignment, run: &mut Vec<String>, upto: usize, at: &mut usize| {
            while *at < upto {
                let tok = phrase[*at - offset].clone();
                out.segments.push(Segment::Literal(tok.clone()));
                run.push(tok);
                *at += 1;
            }
        };
        for (range, span) in matches {
            literal(&mut out, &mut run, range.start, &mut at);
            if !run.is_empty() {
                out.uncovered.push(std::mem::take(&mut run));
            }
            out.spans.push(*span);
            out.segments.push(Segment::Covered {
                span: *span,
                len: range.len(),
            });
            at = range.end;
        }
        literal(&mut out, &mut run, end, &mut at);
        if !run.is_empty() {
            out.uncovered.push(run);
        }
        out
    }
}

/// Lemmatized view of one target utterance and one context.
pub struct SyntaxAligner<'a> {
    ctx: &'a ContextSequence,
    ctx_lemmas: Vec<String>,
    target_lemmas: Vec<String>,
}

impl<'a> SyntaxAligner<'a> {
    pub fn new<S: AsRef<str>>(target: &[S], ctx: &'a ContextSequence, lem: &LemmaTable) -> Self {
        Self {
            ctx,
            ctx_lemmas: ctx.tokens().iter().map(|t| lem.lemma(t)).collect(),
            target_lemmas: target.iter().map(|t| lem.lemma(t.as_ref())).collect(),
        }
    }

    /// Leftmost context span whose lemmas equal target lemmas `[i, k)`, with
    /// the matched character count; `(None, 0)` when nothing matches.
    pub fn align_span(&self, i: usize, k: usize) -> (Option<Span>, usize) {
        if i >= k || k > self.target_lemmas.len() {
            return (None, 0);
        }
        let want = &self.target_lemmas[i..k];
        let toks = self.ctx.tokens();
        let hit = self
            .ctx_lemmas
            .windows(want.len())
            .enumerate()
            .find(|(s, w)| *w == want && !toks[*s..*s + want.len()].iter().any(|t| t == SEP));
        match hit {
            Some((s, _)) => {
                let chars = want.iter().map(|l| l.chars().count()).sum();
                (Some(Span::new(s + 1, s + want.len())), chars)
            }
            None => (None, 0),
        }
    }

    /// Recursive descent: returns matches `(target range, span)` in target order
    /// and their summed character coverage. Only constituents that fall
    /// entirely inside `limit` may match; others are searched through.
    fn descend(&self, node: &ConstituencyTree, limit: &Range<usize>) -> (Vec<(Range<usize>, Span)>, usize) {
        let (i, k) = node.range();
        if k <= limit.start || i >= limit.end {
            return (Vec::new(), 0);
        }
        let inside = limit.start <= i && k <= limit.end;
        let (own, n) = if inside { self.align_span(i, k) } else { (None, 0) };
        let mut spans = Vec::new();
        let mut n_sum = 0;
        for child in &node.children {
            let (ch, n2) = self.descend(child, limit);
            spans.extend(ch);
            n_sum += n2;
        }
        if n_sum > n {
            return (spans, n_sum);
        }
        match own {
            Some(span) => (vec![(i..k, span)], n),
            None => (Vec::new(), 0),
        }
    }

    /// Aligns target tokens `phrase` (a sub-range of the tree's leaves) by
    /// descending from the smallest subtree covering it.
    pub fn align_phrase(&self, tree: &ConstituencyTree, phrase: Range<usize>) -> Option<MultiSpanAlignment> {
        let sub = tree.smallest_covering(phrase.start, phrase.end)?;
        let (matches, chars) = self.descend(sub, &phrase);
        let leaves: Vec<String> = tree.leaves()[phrase.clone()]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Some(MultiSpanAlignment::from_matches(&leaves, phrase.start, &matches, chars))
    }
}

/// Best match for constituent `[i, k)`, indexed into `ttr`'s own leaf list.
pub fn align_span(
    ttr: &ConstituencyTree,
    i: usize,
    k: usize,
    ctx: &ContextSequence,
    lem: &LemmaTable,
) -> (Option<Span>, usize) {
    SyntaxAligner::new(&ttr.leaves(), ctx, lem).align_span(i, k)
}

/// Walks all of `ttr` (assumed to be the smallest subtree covering a missing
/// phrase) and returns the highest-coverage span set.
pub fn descend_tree(ttr: &ConstituencyTree, ctx: &ContextSequence, lem: &LemmaTable) -> MultiSpanAlignment {
    let leaves = ttr.leaves();
    let (lo, hi) = ttr.range();
    // Leaves are indexed from the tree root; shift into a local view.
    let padded: Vec<&str> = std::iter::repeat_n("", lo).chain(leaves.iter().copied()).collect();
    let aligner = SyntaxAligner::new(&padded, ctx, lem);
    let (matches, chars) = aligner.descend(ttr, &(lo..hi));
    let phrase: Vec<String> = leaves.iter().map(|s| s.to_string()).collect();
    MultiSpanAlignment::from_matches(&phrase, lo, &matches, chars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::fixtures::toks;

    fn ctx(s: &str) -> ContextSequence {
        let turns: Vec<Vec<String>> = s.split(" | ").map(toks).collect();
        ContextSequence::build(&turns).unwrap()
    }

    #[test]
    fn lemmatizer_rules() {
        assert_eq!(naive_lemmatize("sleeps"), "sleep");
        assert_eq!(naive_lemmatize("puppy"), "puppy");
        assert_eq!(naive_lemmatize("injuries"), "injury");
        assert_eq!(naive_lemmatize("Classes"), "class");
        assert_eq!(naive_lemmatize("boss"), "boss");
        assert_eq!(naive_lemmatize("bus"), "bus");
        assert_eq!(naive_lemmatize("federer's"), "federer");
        assert_eq!(naive_lemmatize("'s"), "'s");
        assert_eq!(naive_lemmatize("s"), "s");
        assert_eq!(naive_lemmatize("slept"), "slept");
    }

    #[test]
    fn lemma_table_prefers_supplied_lemmas() {
        let mut lem = LemmaTable::new();
        lem.insert("slept", "sleep");
        assert_eq!(lem.lemma("slept"), "sleep");
        assert_eq!(lem.lemma("sleeps"), "sleep");
    }

    #[test]
    fn align_span_on_puppy() {
        let c = ctx("we adopt a puppy");
        let lem = LemmaTable::new();
        let t = ConstituencyTree::parse("(NP (DT the) (NN puppy))").unwrap();
        assert_eq!(align_span(&t, 1, 2, &c, &lem), (Some(Span::new(4, 4)), 5));
        assert_eq!(align_span(&t, 0, 2, &c, &lem), (None, 0));
        let t = ConstituencyTree::parse("(NN kitten)").unwrap();
        assert_eq!(align_span(&t, 0, 1, &c, &lem), (None, 0));
    }

    #[test]
    fn descend_on_puppy() {
        let c = ctx("we adopt a puppy");
        let t = ConstituencyTree::parse("(NP (DT the) (NN puppy))").unwrap();
        let a = descend_tree(&t, &c, &LemmaTable::new());
        assert_eq!(a.spans, vec![Span::new(4, 4)]);
        assert_eq!(a.covered_chars, 5);
        assert_eq!(a.uncovered, vec![toks("the")]);
    }

    #[test]
    fn root_match_beats_fragments() {
        let c = ctx("we saw the puppy today");
        let t = ConstituencyTree::parse("(NP (DT the) (NN puppy))").unwrap();
        let a = descend_tree(&t, &c, &LemmaTable::new());
        assert_eq!(a.spans, vec![Span::new(3, 4)]);
        assert!(a.uncovered.is_empty());
    }

    #[test]
    fn children_win_when_root_absent() {
        let c = ctx("x a b y | c z");
        let t = ConstituencyTree::parse("(A (B a b) (C c))").unwrap();
        let a = descend_tree(&t, &c, &LemmaTable::new());
        assert_eq!(a.spans, vec![Span::new(2, 3), Span::new(6, 6)]);
        assert_eq!(a.covered_chars, 3);
        assert!(a.uncovered.is_empty());
    }

    #[test]
    fn align_phrase_restricts_to_phrase_range() {
        // The covering subtree is S, but "sleeps" outside the phrase must not align.
        let c = ctx("we adopt a puppy that sleeps");
        let tree = ConstituencyTree::parse("(S (DT the) (NN puppy) (VBZ sleeps))").unwrap();
        let aligner = SyntaxAligner::new(&tree.leaves(), &c, &LemmaTable::new());
        let a = aligner.align_phrase(&tree, 0..2).unwrap();
        assert_eq!(a.spans, vec![Span::new(4, 4)]);
        assert_eq!(a.uncovered, vec![toks("the")]);
        assert_eq!(
            a.segments,
            vec![
                Segment::Literal("the".into()),
                Segment::Covered {
                    span: Span::new(4, 4),
                    len: 1
                }
            ]
        );
    }
}
