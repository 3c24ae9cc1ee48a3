//! Utterance rewriting by tagging source tokens against the dialogue context.

pub mod affinity;
pub mod align;
pub mod error;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod rules;
pub mod syntax;
pub mod tags;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
pub use tags::{apply_tags, Action, ContextSequence, DialogueExample, SlottedRule, Span, TagAssignment};
