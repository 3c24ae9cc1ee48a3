//! Tag algebra for context-driven rewriting.
//!
//! A source utterance `x_1 .. x_n` is edited by a [`TagAssignment`]: every
//! source token carries a KEEP/DELETE [`Action`], and each of the `n + 1`
//! insertion points (before every token, plus the end of the sentence) carries
//! a [`SlottedRule`] whose slots are filled with [`Span`]s copied from the
//! dialogue context. [`apply_tags`] turns an assignment into the rewrite.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator placed between consecutive context turns.
pub const SEP: &str = "[SEP]";

/// Rendering of a slot in rule strings and vocabulary files.
pub const SLOT: &str = "<SL>";

pub(crate) fn check_token(tok: &str) -> Result<()> {
    if tok.is_empty() || tok.chars().any(char::is_whitespace) {
        return Err(Error::InvalidToken(tok.to_owned()));
    }
    Ok(())
}

/// One dialogue: context turns, the utterance to rewrite, and optionally the
/// gold rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub id: String,
    pub context: Vec<Vec<String>>,
    pub source: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<String>>,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::NoContext);
        }
        for (i, turn) in self.context.iter().enumerate() {
            if turn.is_empty() {
                return Err(Error::EmptyTurn(i));
            }
            turn.iter().try_for_each(|t| check_token(t))?;
        }
        if self.source.is_empty() {
            return Err(Error::EmptySource);
        }
        self.source.iter().try_for_each(|t| check_token(t))?;
        if let Some(target) = &self.target {
            if target.is_empty() {
                return Err(Error::EmptyTarget(self.id.clone()));
            }
            target.iter().try_for_each(|t| check_token(t))?;
        }
        Ok(())
    }

    pub fn context_sequence(&self) -> Result<ContextSequence> {
        ContextSequence::build(&self.context)
    }
}

/// Flattened dialogue context with 1-based token addressing.
///
/// Index 0 is reserved for the stop/empty symbol and never names a token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSequence {
    tokens: Vec<String>,
    turn_offsets: Vec<usize>,
}

impl ContextSequence {
    /// Joins turns with a single [`SEP`] token between consecutive turns.
    pub fn build<S: AsRef<str>>(turns: &[Vec<S>]) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::NoContext);
        }
        let mut tokens = Vec::new();
        let mut turn_offsets = Vec::with_capacity(turns.len());
        for (i, turn) in turns.iter().enumerate() {
            if turn.is_empty() {
                return Err(Error::EmptyTurn(i));
            }
            if i > 0 {
                tokens.push(SEP.to_owned());
            }
            turn_offsets.push(tokens.len() + 1);
            tokens.extend(turn.iter().map(|t| t.as_ref().to_owned()));
        }
        Ok(Self {
            tokens,
            turn_offsets,
        })
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

    /// 1-based start index of each turn.
    pub fn turn_offsets(&self) -> &[usize] {
        &self.turn_offsets
    }

    /// Token at 1-based position `idx`.
    pub fn get(&self, idx: usize) -> Option<&str> {
        idx.checked_sub(1)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    pub fn contains(&self, span: Span) -> bool {
        span.start >= 1 && span.start <= span.end && span.end <= self.len()
    }

    /// Tokens covered by `span`, or `None` when the span is invalid.
    pub fn slice(&self, span: Span) -> Option<&[String]> {
        self.contains(span)
            .then(|| &self.tokens[span.start - 1..span.end])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "K")]
    Keep,
    #[serde(rename = "D")]
    Delete,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Keep => 0,
            Action::Delete => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Keep
        } else {
            Action::Delete
        }
    }
}

/// Inclusive 1-based context range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Number of covered tokens; zero for an inverted span.
    pub fn len(&self) -> usize {
        (self.end + 1).saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleElement {
    Literal(String),
    Slot,
}

/// An insertion template of literal tokens and slots, e.g. `besides <SL>`.
///
/// The empty rule is the null rule (no insertion).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlottedRule {
    elements: Vec<RuleElement>,
}

impl SlottedRule {
    pub fn new(elements: Vec<RuleElement>) -> Self {
        Self { elements }
    }

    pub fn null() -> Self {
        Self::default()
    }

    /// The all-slot rule with `k` slots.
    pub fn glue(k: usize) -> Self {
        Self {
            elements: vec![RuleElement::Slot; k],
        }
    }

    /// Parses whitespace separated elements where [`SLOT`] (or `␣`) marks a
    /// slot. The empty string is the null rule.
    pub fn parse(s: &str) -> Result<Self> {
        let elements = s
            .split_whitespace()
            .map(|t| match t {
                SLOT | "␣" => Ok(RuleElement::Slot),
                lit => check_token(lit).map(|_| RuleElement::Literal(lit.to_owned())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { elements })
    }

    pub fn elements(&self) -> &[RuleElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_null(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.is_null()
    }

    pub fn slot_count(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, RuleElement::Slot))
            .count()
    }

    pub fn literal_count(&self) -> usize {
        self.len() - self.slot_count()
    }

    /// Non-null rule made only of slots.
    pub fn is_glue(&self) -> bool {
        !self.is_null() && self.literal_count() == 0
    }

    /// Element strings as written in vocabulary files.
    pub fn to_strings(&self) -> Vec<String> {
        self.elements
            .iter()
            .map(|e| match e {
                RuleElement::Literal(t) => t.clone(),
                RuleElement::Slot => SLOT.to_owned(),
            })
            .collect()
    }
}

impl fmt::Display for SlottedRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_strings().join(" "))
    }
}

/// Per-position labels for one source utterance of length `n`.
///
/// `actions` has `n` entries; `rules` and `spans` have `n + 1`, the last one
/// being the end-of-sentence insertion point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagAssignment {
    pub actions: Vec<Action>,
    pub rules: Vec<SlottedRule>,
    pub spans: Vec<Vec<Span>>,
}

impl TagAssignment {
    /// All KEEP, no insertions.
    pub fn identity(n: usize) -> Self {
        Self {
            actions: vec![Action::Keep; n],
            rules: vec![SlottedRule::null(); n + 1],
            spans: vec![Vec::new(); n + 1],
        }
    }

    pub fn source_len(&self) -> usize {
        self.actions.len()
    }

    /// Expected rewrite length under the length law.
    pub fn output_len(&self) -> usize {
        let kept = self.actions.iter().filter(|a| **a == Action::Keep).count();
        let inserted: usize = self
            .rules
            .iter()
            .zip(&self.spans)
            .map(|(r, s)| r.literal_count() + s.iter().map(Span::len).sum::<usize>())
            .sum();
        kept + inserted
    }
}

/// Invariant violations reported by [`validate_tags`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ActionCount { expected: usize, found: usize },
    RuleCount { expected: usize, found: usize },
    SpanListCount { expected: usize, found: usize },
    SlotCountMismatch { pos: usize, expected: usize, found: usize },
    StartAfterEnd { pos: usize, span: Span },
    OutOfRange { pos: usize, span: Span },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ActionCount { expected, found } => {
                write!(f, "action count {found}, expected {expected}")
            }
            Violation::RuleCount { expected, found } => {
                write!(f, "rule count {found}, expected {expected}")
            }
            Violation::SpanListCount { expected, found } => {
                write!(f, "span list count {found}, expected {expected}")
            }
            Violation::SlotCountMismatch { pos, .. } => write!(f, "slot-count mismatch at {pos}"),
            Violation::StartAfterEnd { pos, span } => write!(f, "start > end at {pos}: {span}"),
            Violation::OutOfRange { pos, span } => write!(f, "span out of range at {pos}: {span}"),
        }
    }
}

/// Checks every [`TagAssignment`] invariant against a context of `ctx.len()`
/// tokens and a source of `n` tokens. Positions are 1-based.
pub fn validate_tags(ctx: &ContextSequence, tags: &TagAssignment, n: usize) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if tags.actions.len() != n {
        out.push(Violation::ActionCount {
            expected: n,
            found: tags.actions.len(),
        });
    }
    if tags.rules.len() != n + 1 {
        out.push(Violation::RuleCount {
            expected: n + 1,
            found: tags.rules.len(),
        });
    }
    if tags.spans.len() != n + 1 {
        out.push(Violation::SpanListCount {
            expected: n + 1,
            found: tags.spans.len(),
        });
    }
    for (i, (rule, spans)) in tags.rules.iter().zip(&tags.spans).enumerate() {
        let pos = i + 1;
        if rule.slot_count() != spans.len() {
            out.push(Violation::SlotCountMismatch {
                pos,
                expected: rule.slot_count(),
                found: spans.len(),
            });
        }
        for &span in spans {
            if span.start > span.end {
                out.push(Violation::StartAfterEnd { pos, span });
            } else if span.start < 1 || span.end > ctx.len() {
                out.push(Violation::OutOfRange { pos, span });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Applies `tags` to the example's source, producing the rewrite.
///
/// Positions are visited left to right; at each one the rule is realized
/// first (literals verbatim, slot `j` copies the context tokens of
/// `spans[i][j]`) and then the source token is emitted if it is kept.
pub fn apply_tags(example: &DialogueExample, ctx: &ContextSequence, tags: &TagAssignment) -> Result<Vec<String>> {
    let n = example.source.len();
    if tags.actions.len() != n || tags.rules.len() != n + 1 || tags.spans.len() != n + 1 {
        return Err(Error::TagLength {
            n,
            detail: format!(
                "{} actions, {} rules, {} span lists",
                tags.actions.len(),
                tags.rules.len(),
                tags.spans.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(tags.output_len());
    for (i, (rule, spans)) in tags.rules.iter().zip(&tags.spans).enumerate() {
        let pos = i + 1;
        if rule.slot_count() != spans.len() {
            return Err(Error::SlotCountMismatch {
                pos,
                expected: rule.slot_count(),
                found: spans.len(),
            });
        }
        let mut slots = spans.iter();
        for el in rule.elements() {
            match el {
                RuleElement::Literal(t) => out.push(t.clone()),
                RuleElement::Slot => {
                    let span = *slots.next().expect("slot count checked");
                    let toks = ctx.slice(span).ok_or(Error::SpanOutOfRange {
                        pos,
                        span,
                        len: ctx.len(),
                    })?;
                    out.extend(toks.iter().cloned());
                }
            }
        }
        if i < n && tags.actions[i] == Action::Keep {
            out.push(example.source[i].clone());
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_context_places_separators() {
        let ex = federer();
        let ctx = ex.context_sequence().unwrap();
        assert_eq!(ctx.len(), 18);
        assert_eq!(ctx.get(9), Some(SEP));
        assert_eq!(ctx.get(3), Some("federer"));
        assert_eq!(ctx.get(12), Some("his"));
        assert_eq!(ctx.get(13), Some("back"));
        assert_eq!(ctx.turn_offsets(), &[1, 10]);
        assert_eq!(ctx.get(0), None);
    }

    #[test]
    fn build_context_edge_cases() {
        let one = ContextSequence::build(&[toks("hi")]).unwrap();
        assert_eq!(one.tokens(), &toks("hi")[..]);

        let three = ContextSequence::build(&[toks("a"), toks("b"), toks("c")]).unwrap();
        assert_eq!(three.len(), 5);
        assert_eq!(three.get(2), Some(SEP));
        assert_eq!(three.get(4), Some(SEP));

        let none: Vec<Vec<String>> = Vec::new();
        assert!(matches!(ContextSequence::build(&none), Err(Error::NoContext)));
        assert_eq!(Error::NoContext.to_string(), "no context");
    }

    #[test]
    fn apply_tags_reproduces_running_example() {
        let ex = federer();
        let ctx = ex.context_sequence().unwrap();
        let out = apply_tags(&ex, &ctx, &federer_tags()).unwrap();
        assert_eq!(Some(out), ex.target);
    }

    #[test]
    fn apply_tags_multi_slot_replacement() {
        let ex = DialogueExample {
            id: "x".into(),
            context: vec![toks("a b c d")],
            source: toks("p q"),
            target: None,
        };
        let ctx = ex.context_sequence().unwrap();
        let mut tags = TagAssignment::identity(2);
        tags.actions = vec![Action::Delete; 2];
        tags.rules[0] = SlottedRule::glue(2);
        tags.spans[0] = vec![Span::new(1, 2), Span::new(4, 4)];
        assert_eq!(apply_tags(&ex, &ctx, &tags).unwrap(), toks("a b d"));
    }

    #[test]
    fn apply_tags_errors() {
        let ex = federer();
        let ctx = ex.context_sequence().unwrap();
        let mut tags = federer_tags();
        tags.spans[1] = vec![Span::new(3, 40)];
        assert!(matches!(
            apply_tags(&ex, &ctx, &tags),
            Err(Error::SpanOutOfRange { pos: 2, .. })
        ));
        let mut tags = federer_tags();
        tags.spans[1].clear();
        assert!(matches!(
            apply_tags(&ex, &ctx, &tags),
            Err(Error::SlotCountMismatch { pos: 2, .. })
        ));
    }

    #[test]
    fn validate_reports_violations() {
        let ex = federer();
        let ctx = ex.context_sequence().unwrap();
        assert!(validate_tags(&ctx, &federer_tags(), 7).is_ok());

        let mut tags = federer_tags();
        tags.spans[1].clear();
        let v = validate_tags(&ctx, &tags, 7).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "slot-count mismatch at 2");

        let mut tags = federer_tags();
        tags.spans[1] = vec![Span::new(5, 3)];
        let v = validate_tags(&ctx, &tags, 7).unwrap_err();
        assert!(v[0].to_string().starts_with("start > end"));

        let mut tags = federer_tags();
        tags.actions.pop();
        assert!(matches!(
            validate_tags(&ctx, &tags, 7).unwrap_err()[0],
            Violation::ActionCount { .. }
        ));
    }

    #[test]
    fn rule_parsing_and_display() {
        let r = SlottedRule::parse("<SL> and ␣").unwrap();
        assert_eq!(r.slot_count(), 2);
        assert_eq!(r.literal_count(), 1);
        assert_eq!(r.to_string(), "<SL> and <SL>");
        assert!(SlottedRule::parse("").unwrap().is_null());
        assert!(SlottedRule::glue(3).is_glue());
        assert!(!SlottedRule::null().is_glue());
    }

    #[test]
    fn example_validation() {
        let mut ex = federer();
        assert!(ex.validate().is_ok());
        ex.source[0] = "two words".into();
        assert!(matches!(ex.validate(), Err(Error::InvalidToken(_))));
        let mut ex = federer();
        ex.target = Some(Vec::new());
        assert!(matches!(ex.validate(), Err(Error::EmptyTarget(_))));
    }

    fn arb_case() -> impl Strategy<Value = (DialogueExample, TagAssignment)> {
        let word = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
        let turn = prop::collection::vec(word.clone(), 1..5);
        (
            prop::collection::vec(turn, 1..3),
            prop::collection::vec(word, 1..6),
        )
            .prop_flat_map(|(context, source)| {
                let ctx = ContextSequence::build(&context).unwrap();
                let m = ctx.len();
                let n = source.len();
                let span = (1..=m)
                    .prop_flat_map(move |s| (Just(s), s..=m))
                    .prop_map(|(s, e)| Span::new(s, e));
                let elem = prop_oneof![
                    Just(RuleElement::Slot),
                    prop::sample::select(vec!["x", "y"]).prop_map(|t| RuleElement::Literal(t.into())),
                ];
                let position = prop::collection::vec(elem, 0..4).prop_flat_map(move |els| {
                    let k = els.iter().filter(|e| matches!(e, RuleElement::Slot)).count();
                    (Just(SlottedRule::new(els)), prop::collection::vec(span.clone(), k))
                });
                (
                    Just(context),
                    Just(source),
                    prop::collection::vec(any::<bool>(), n),
                    prop::collection::vec(position, n + 1),
                )
            })
            .prop_map(|(context, source, keep, positions)| {
                let ex = DialogueExample {
                    id: "p".into(),
                    context: context
                        .into_iter()
                        .map(|t| t.into_iter().map(String::from).collect())
                        .collect(),
                    source: source.into_iter().map(String::from).collect(),
                    target: None,
                };
                let (rules, spans) = positions.into_iter().unzip();
                let tags = TagAssignment {
                    actions: keep
                        .into_iter()
                        .map(|k| if k { Action::Keep } else { Action::Delete })
                        .collect(),
                    rules,
                    spans,
                };
                (ex, tags)
            })
    }

    proptest! {
        #[test]
        fn length_law_and_determinism((ex, tags) in arb_case()) {
            let ctx = ex.context_sequence().unwrap();
            prop_assert!(validate_tags(&ctx, &tags, ex.source.len()).is_ok());
            let a = apply_tags(&ex, &ctx, &tags).unwrap();
            let b = apply_tags(&ex, &ctx, &tags).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), tags.output_len());
        }

        #[test]
        fn identity_assignment_is_noop((ex, _) in arb_case()) {
            let ctx = ex.context_sequence().unwrap();
            let out = apply_tags(&ex, &ctx, &TagAssignment::identity(ex.source.len())).unwrap();
            prop_assert_eq!(out, ex.source);
        }
    }
}
