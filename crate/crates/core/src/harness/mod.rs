//! KL-divergence context-length sweep between a base model and its
//! compressed variants, teacher-forced on shared samples.

pub mod corpus;
pub mod kl;
pub mod sweep;

pub use corpus::synthetic_corpus;
pub use kl::{kl_divergence, logits_to_probs};
pub use sweep::{
    by_label, compress, eval_kl_at_length, fit_slope, parse_sweep_csv, run_study, run_sweep, sweep_csv,
    BaseCache, CompressionSpec, EvalMode, LabeledSpec, SweepRecord, SweepSetup, SWEEP_CSV_HEADER,
};
