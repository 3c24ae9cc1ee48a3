//! LCS-based action and phrase extraction.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tags::{Action, ContextSequence, Span, SEP};

/// Aligned index pairs `(source, target)`, 0-based and strictly increasing in
/// both coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LcsAlignment {
    pub pairs: Vec<(usize, usize)>,
}

impl LcsAlignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Longest common subsequence of `a` and `b` in `O(|a|·|b|)`.
///
/// Backtraces from the end of both sequences, preferring a match, then a step
/// back in `a`, then a step back in `b`, so ties resolve deterministically.
pub fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> LcsAlignment {
    let (n, l) = (a.len(), b.len());
    let w = l + 1;
    let mut dp = vec![0u32; (n + 1) * w];
    for i in 1..=n {
        for j in 1..=l {
            dp[i * w + j] = if a[i - 1] == b[j - 1] {
                dp[(i - 1) * w + j - 1] + 1
            } else {
                dp[(i - 1) * w + j].max(dp[i * w + j - 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(dp[n * w + l] as usize);
    let (mut i, mut j) = (n, l);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if dp[(i - 1) * w + j] >= dp[i * w + j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    LcsAlignment { pairs }
}

/// LCS length only, in linear memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseStatus {
    SingleSpan,
    Unaligned,
}

/// A maximal run of target tokens with no aligned source counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseInsertion {
    /// 1-based source position the phrase is inserted before (`n + 1` = end).
    pub position: usize,
    pub phrase: Vec<String>,
    /// Location of the phrase in the target, 0-based half-open.
    pub target_range: Range<usize>,
    pub resolved: Option<Span>,
    pub status: PhraseStatus,
}

/// Derives KEEP/DELETE actions over `source` and the target phrases that must
/// be inserted to reach `target`.
///
/// Aligned source tokens are kept and unaligned ones deleted. A virtual
/// aligned pair before the first tokens anchors leading insertions; between
/// two consecutive aligned pairs the unaligned target run (if any) attaches
/// to the first unaligned source token of the same gap, or to the next
/// aligned source token when the source gap is empty (`n + 1` at the end).
/// Phrases are returned unresolved; see [`resolve_single_span`].
pub fn extract_actions_and_phrases(source: &[String], target: &[String]) -> (Vec<Action>, Vec<PhraseInsertion>) {
    let alignment = lcs(source, target);
    let mut actions = vec![Action::Delete; source.len()];
    for &(i, _) in &alignment.pairs {
        actions[i] = Action::Keep;
    }
    // Anchors in 1-based coordinates with virtual begin (0, 0) and end (n+1, l+1).
    let anchors = std::iter::once((0, 0))
        .chain(alignment.pairs.iter().map(|&(i, j)| (i + 1, j + 1)))
        .chain(std::iter::once((source.len() + 1, target.len() + 1)));
    let mut phrases = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (si, ti) in anchors {
        if let Some((ps, pt)) = prev {
            if ti > pt + 1 {
                // Source gap is ps+1..si; whether empty or not, the phrase sits at ps+1.
                let range = pt..ti - 1;
                phrases.push(PhraseInsertion {
                    position: ps + 1,
                    phrase: target[range.clone()].to_vec(),
                    target_range: range,
                    resolved: None,
                    status: PhraseStatus::Unaligned,
                });
            }
        }
        prev = Some((si, ti));
    }
    (actions, phrases)
}

/// Leftmost exact contiguous occurrence of `phrase` in `ctx` that does not
/// cross a turn separator.
pub fn resolve_single_span(phrase: &[String], ctx: &ContextSequence) -> Option<Span> {
    if phrase.is_empty() || phrase.len() > ctx.len() {
        return None;
    }
    ctx.tokens()
        .windows(phrase.len())
        .position(|w| w == phrase && !w.iter().any(|t| t == SEP))
        .map(|i| Span::new(i + 1, i + phrase.len()))
}

/// Runs extraction and single-span resolution together.
pub fn annotate_lcs(
    source: &[String],
    target: &[String],
    ctx: &ContextSequence,
) -> (Vec<Action>, Vec<PhraseInsertion>) {
    let (actions, mut phrases) = extract_actions_and_phrases(source, target);
    for p in &mut phrases {
        if let Some(span) = resolve_single_span(&p.phrase, ctx) {
            p.resolved = Some(span);
            p.status = PhraseStatus::SingleSpan;
        }
    }
    (actions, phrases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::fixtures::toks;
    use proptest::prelude::*;
    use Action::*;

    fn puppy() -> (Vec<String>, Vec<String>) {
        (
            toks("[BOS] it sleeps well , mostly at night ."),
            toks("[BOS] the puppy sleeps well at night now ."),
        )
    }

    #[test]
    fn lcs_on_puppy_pair() {
        let (x, y) = puppy();
        let a = lcs(&x, &y);
        let aligned: Vec<&str> = a.pairs.iter().map(|&(i, _)| x[i].as_str()).collect();
        assert_eq!(aligned, ["[BOS]", "sleeps", "well", "at", "night", "."]);
        assert_eq!(lcs_len(&x, &y), 6);
    }

    #[test]
    fn lcs_identity_and_empty() {
        let x = toks("a b c");
        assert_eq!(lcs(&x, &x).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let empty: Vec<String> = Vec::new();
        assert!(lcs(&x, &empty).is_empty());
        assert_eq!(lcs_len(&empty, &x), 0);
    }

    #[test]
    fn lcs_tie_break_is_fixed() {
        // "a" can align with either target "a"; backtrace from the end takes the last.
        let a = lcs(&toks("a"), &toks("a a"));
        assert_eq!(a.pairs, vec![(0, 1)]);
        let b = lcs(&toks("a b"), &toks("b a"));
        assert_eq!(b.len(), 1);
        assert_eq!(b.pairs, vec![(0, 1)]);
    }

    #[test]
    fn actions_and_phrases_on_puppy_pair() {
        let (x, y) = puppy();
        let (actions, phrases) = extract_actions_and_phrases(&x, &y);
        assert_eq!(actions, vec![Keep, Delete, Keep, Keep, Delete, Delete, Keep, Keep, Keep]);
        assert_eq!(phrases.len(), 2);
        assert_eq!(phrases[0].phrase, toks("the puppy"));
        assert_eq!(phrases[0].position, 2);
        assert_eq!(phrases[0].target_range, 1..3);
        assert_eq!(phrases[1].phrase, toks("now"));
        assert_eq!(phrases[1].position, 9);
    }

    #[test]
    fn identity_and_trailing_insertion() {
        let x = toks("a b");
        let (actions, phrases) = extract_actions_and_phrases(&x, &x);
        assert_eq!(actions, vec![Keep, Keep]);
        assert!(phrases.is_empty());

        let (actions, phrases) = extract_actions_and_phrases(&x, &toks("a b c"));
        assert_eq!(actions, vec![Keep, Keep]);
        assert_eq!(phrases[0].position, 3);
        assert_eq!(phrases[0].phrase, toks("c"));
    }

    #[test]
    fn leading_insertion_without_bos() {
        let (actions, phrases) = extract_actions_and_phrases(&toks("he left"), &toks("roger federer left"));
        assert_eq!(actions, vec![Delete, Keep]);
        assert_eq!(phrases[0].position, 1);
        assert_eq!(phrases[0].phrase, toks("roger federer"));
    }

    #[test]
    fn single_span_resolution() {
        let ex = crate::tags::fixtures::federer();
        let ctx = ex.context_sequence().unwrap();
        assert_eq!(resolve_single_span(&toks("his back"), &ctx), Some(Span::new(12, 13)));
        assert_eq!(resolve_single_span(&toks("besides his back"), &ctx), None);
        // Crossing the separator is not allowed.
        assert_eq!(resolve_single_span(&toks("? he"), &ctx), None);

        let ctx = ContextSequence::build(&[toks("x y x y")]).unwrap();
        assert_eq!(resolve_single_span(&toks("x y"), &ctx), Some(Span::new(1, 2)));
    }

    fn tokens(max: usize) -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..=max)
    }

    proptest! {
        #[test]
        fn alignment_invariants(x in tokens(10), y in tokens(10)) {
            let a = lcs(&x, &y);
            prop_assert_eq!(a.len(), lcs_len(&x, &y));
            prop_assert_eq!(lcs_len(&x, &y), lcs_len(&y, &x));
            for w in a.pairs.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
            for &(i, j) in &a.pairs {
                prop_assert_eq!(&x[i], &y[j]);
            }
        }

        #[test]
        fn reconstruction(x in tokens(10), y in tokens(10)) {
            let (actions, phrases) = extract_actions_and_phrases(&x, &y);
            let keeps = actions.iter().filter(|a| **a == Keep).count();
            prop_assert_eq!(keeps, lcs_len(&x, &y));
            let mut out = Vec::new();
            for i in 0..=x.len() {
                if let Some(p) = phrases.iter().find(|p| p.position == i + 1) {
                    out.extend(p.phrase.iter().cloned());
                }
                if i < x.len() && actions[i] == Keep {
                    out.push(x[i].clone());
                }
            }
            prop_assert_eq!(out, y);
        }
    }
}
