//! Uncertainty-aware causal language modeling on a desk-scale transformer.
//!
//! The crate bundles a tiny decoder-only model with low-rank adapters, the
//! training objectives that shape its token-level uncertainty, a decoding
//! engine, response-level uncertainty scores and the calibration metrics used
//! to judge them, plus a synthetic question-answering world to train on.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod train;
pub mod uncertainty;
pub mod world;

pub use error::{Error, Result};
