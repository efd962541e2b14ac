//! Statistics-to-news generation for ice hockey games.
//!
//! The pipeline parses statistics files into typed events ([`game`],
//! [`stats`]), picks newsworthy events with a linear-chain CRF ([`select`]),
//! verbalizes each one with a pointer-generator network ([`pgen`]) and scores
//! the output ([`metrics`]). [`synth`] builds a deterministic synthetic
//! corpus for training and testing; [`pipeline`] ties the stages together.

pub mod game;
pub mod linearize;
pub mod metrics;
pub mod pgen;
pub mod pipeline;
pub mod select;
pub mod stats;
pub mod synth;

/// A result that may carry a note about a degenerate input.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub flag: Option<String>,
}

impl<T> Flagged<T> {
    pub fn ok(value: T) -> Self {
        Flagged { value, flag: None }
    }

    pub fn flagged(value: T, note: impl Into<String>) -> Self {
        Flagged { value, flag: Some(note.into()) }
    }
}
