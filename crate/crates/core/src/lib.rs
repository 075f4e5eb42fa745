//! Desk-scale laboratory for measuring how zero-shot pruning and quantization
//! perturb a transformer's next-token distribution as context grows.
//!
//! The crate bundles a small LLaMA-style decoder ([`model`]), compression
//! passes ([`prune`], [`quant`]), the KL-divergence context sweep
//! ([`harness`]), a Monte Carlo simulator of attention noise accumulation
//! ([`noise`]) and CSV/SVG reporting ([`report`]).

pub mod error;
pub mod harness;
pub mod model;
pub mod noise;
pub mod prune;
pub mod quant;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{LabError, ParseError, Result};
pub use tensor::Tensor;
