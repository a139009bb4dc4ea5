//! Weakly supervised token classification for document layouts.
//!
//! Pipeline: parse OCR-style documents ([`document`]), apply rule-based
//! labeling functions ([`lf`]), aggregate them with a generative label model
//! ([`cage`]), and train a hashed linear token classifier ([`features`])
//! jointly with the label model ([`train`]). [`eval`] scores predictions and
//! [`synth`] builds synthetic corpora for controlled experiments.

pub mod cage;
pub mod config;
pub mod document;
pub mod error;
pub mod eval;
pub mod features;
pub mod lf;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
