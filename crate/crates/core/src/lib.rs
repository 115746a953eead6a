//! Conversational question answering with entity-driven history
//! selection: pruning, attention re-ranking and term highlighting over a
//! lexical span reader, with evaluation and experiment harnesses.

pub mod corpus;
pub mod entities;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nncore;
pub mod reader;
pub mod rng;
pub mod selection;
pub mod termclass;
pub mod text;

pub use error::{Error, Result};
