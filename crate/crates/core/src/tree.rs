//! Labeled-bracket constituency trees, e.g. `(S (NP (DT the) (NN puppy)) (VP ...))`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A constituency tree whose leaves are the tokens of one utterance.
///
/// Every node records the half-open leaf range `[start, end)` it spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstituencyTree {
    pub label: String,
    /// Leaf token; `None` for internal nodes.
    pub word: Option<String>,
    pub children: Vec<ConstituencyTree>,
    start: usize,
    end: usize,
}

impl ConstituencyTree {
    pub fn leaf(word: impl Into<String>, index: usize) -> Self {
        Self {
            label: String::new(),
            word: Some(word.into()),
            children: Vec::new(),
            start: index,
            end: index + 1,
        }
    }

    pub fn node(label: impl Into<String>, children: Vec<ConstituencyTree>) -> Self {
        let start = children.first().map_or(0, |c| c.start);
        let end = children.last().map_or(start, |c| c.end);
        Self {
            label: label.into(),
            word: None,
            children,
            start,
            end,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut p = Parser {
            toks: lex(s),
            pos: 0,
            leaves: 0,
        };
        let tree = p.tree()?;
        if p.pos != p.toks.len() {
            return Err(Error::TreeParse("trailing input after tree".into()));
        }
        Ok(tree)
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn is_leaf(&self) -> bool {
        self.word.is_some()
    }

    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match &self.word {
            Some(w) => out.push(w),
            None => self.children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Deepest internal node whose range contains `[start, end)`.
    pub fn smallest_covering(&self, start: usize, end: usize) -> Option<&ConstituencyTree> {
        if self.is_leaf() || start < self.start || end > self.end || start >= end {
            return None;
        }
        self.children
            .iter()
            .find_map(|c| c.smallest_covering(start, end))
            .or(Some(self))
    }
}

impl FromStr for ConstituencyTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for ConstituencyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(w) = &self.word {
            return f.write_str(w);
        }
        write!(f, "({}", self.label)?;
        for c in &self.children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Open,
    Close,
    Atom(String),
}

fn lex(s: &str) -> Vec<Tok> {
    let mut out = Vec::new();
    let mut atom = String::new();
    let flush = |atom: &mut String, out: &mut Vec<Tok>| {
        if !atom.is_empty() {
            out.push(Tok::Atom(std::mem::take(atom)));
        }
    };
    for ch in s.chars() {
        match ch {
            '(' => {
                flush(&mut atom, &mut out);
                out.push(Tok::Open);
            }
            ')' => {
                flush(&mut atom, &mut out);
                out.push(Tok::Close);
            }
            c if c.is_whitespace() => flush(&mut atom, &mut out),
            c => atom.push(c),
        }
    }
    flush(&mut atom, &mut out);
    out
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    leaves: usize,
}

impl Parser {
    fn tree(&mut self) -> Result<ConstituencyTree> {
        match self.toks.get(self.pos) {
            Some(Tok::Open) => self.pos += 1,
            other => return Err(Error::TreeParse(format!("expected '(' but found {other:?}"))),
        }
        // Label is optional: "( (S ...))" wraps a root without one.
        let label = match self.toks.get(self.pos) {
            Some(Tok::Atom(a)) => {
                self.pos += 1;
                a.clone()
            }
            _ => String::new(),
        };
        let mut children = Vec::new();
        loop {
            match self.toks.get(self.pos) {
                Some(Tok::Close) => {
                    self.pos += 1;
                    break;
                }
                Some(Tok::Open) => children.push(self.tree()?),
                Some(Tok::Atom(w)) => {
                    children.push(ConstituencyTree::leaf(w.clone(), self.leaves));
                    self.leaves += 1;
                    self.pos += 1;
                }
                None => return Err(Error::TreeParse("unbalanced parentheses".into())),
            }
        }
        if children.is_empty() {
            return Err(Error::TreeParse(format!("node {label:?} has no children")));
        }
        if label.is_empty() && children.len() == 1 && !children[0].is_leaf() {
            return Ok(children.pop().expect("one child"));
        }
        Ok(ConstituencyTree::node(label, children))
    }
}
