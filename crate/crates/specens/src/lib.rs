//! Token-level ensemble decoding accelerated by speculation.
//!
//! The engine combines the next-token distributions of 2..n pluggable models
//! (weighted sums, contrastive subtraction, or arbitrary weights) and offers
//! several decoding strategies that all emit the same ensemble distribution
//! while differing in how many model invocations they spend per token.
//! Costs are simulated: every model declares a per-invocation cost and each
//! decode produces a [`decoding::DecodeTrace`] with exact invocation counts.
//!
//! The [`harness`] module runs strategy/parameter sweeps and the statistical
//! validation suites; [`analysis`] holds the closed-form speed formulas the
//! sweeps are checked against.

pub mod analysis;
pub mod core;
pub mod decoding;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod models;

pub use crate::core::{Distribution, LogitsVec, RandomSource, Vocabulary};
pub use crate::decoding::{DecodeConfig, DecodeTrace, Strategy};
pub use crate::ensemble::{EnsembleKind, EnsembleSpec};
pub use crate::error::{Error, Result};
pub use crate::models::LanguageModel;
