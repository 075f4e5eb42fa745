use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kl::{kl_divergence, logits_to_probs};
use crate::error::{LabError, Result};
use crate::model::{Checkpoint, ForwardOptions, PreparedModel, TokenSequence};
use crate::prune::{apply_prune, calibrate, PruneMethod, PruneSpec};
use crate::quant::{apply_quant, QuantSpec};
use crate::stats::{mean_std, ols, LinearFit};

/// Which positions of a length-`L` prefix contribute to its KL value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Next-token distribution at position `L − 1` only.
    #[default]
    Last,
    /// Mean over the last `k` positions.
    Tail { k: usize },
}

impl EvalMode {
    fn positions(self, len: usize) -> std::ops::Range<usize> {
        match self {
            EvalMode::Last => len - 1..len,
            EvalMode::Tail { k } => len - k.min(len)..len,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            EvalMode::Tail { k: 0 } => Err(LabError::Config("tail mode needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressionSpec {
    Identity,
    Prune(PruneSpec),
    Quant(QuantSpec),
}

impl CompressionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            CompressionSpec::Identity => Ok(()),
            CompressionSpec::Prune(p) => p.validate(),
            CompressionSpec::Quant(q) => q.validate(),
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self, CompressionSpec::Prune(p) if p.method == PruneMethod::Wanda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSpec {
    pub label: String,
    #[serde(flatten)]
    pub spec: CompressionSpec,
}

/// Applies one compression method. Wanda calibrates on `calib` first.
pub fn compress(base: &Checkpoint, spec: &CompressionSpec, calib: &[TokenSequence]) -> Result<Checkpoint> {
    spec.validate()?;
    match spec {
        CompressionSpec::Identity => Ok(base.clone()),
        CompressionSpec::Prune(p) if p.method == PruneMethod::Wanda => {
            let norms = calibrate(base, calib)?;
            apply_prune(base, p, Some(&norms))
        }
        CompressionSpec::Prune(p) => apply_prune(base, p, None),
        CompressionSpec::Quant(q) => apply_quant(base, q),
    }
}

/// One point of a KL-versus-context-length curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method_label: String,
    pub context_length: usize,
    /// Nats.
    pub kl_mean: f64,
    pub kl_std: f64,
    pub n_samples: usize,
}

pub const SWEEP_CSV_HEADER: &str = "method_label,context_length,kl_mean,kl_std,n_samples";

/// Next-token distributions keyed by position.
type PositionProbs = BTreeMap<usize, Vec<f64>>;

/// Mean KL of `compressed ‖ base` over the mode's positions of one sample.
fn sample_kl(base: &PositionProbs, compressed: &PositionProbs, positions: std::ops::Range<usize>) -> Result<f64> {
    let n = positions.len() as f64;
    let mut total = 0.0;
    for pos in positions {
        total += kl_divergence(&compressed[&pos], &base[&pos])?;
    }
    Ok(total / n)
}

/// Runs `tokens` once and converts the logits at `positions` to probabilities.
fn probs_at(model: &PreparedModel, tokens: &TokenSequence, positions: &[usize]) -> Result<PositionProbs> {
    let logits = model.forward_rows(tokens, positions, ForwardOptions::default())?;
    Ok(positions
        .iter()
        .enumerate()
        .map(|(r, &pos)| (pos, logits_to_probs(logits.row(r))))
        .collect())
}

/// Evaluates one context length the direct way: every sample is truncated to
/// `len` tokens and run through both models.
pub fn eval_kl_at_length(
    base: &Checkpoint,
    compressed: &Checkpoint,
    samples: &[TokenSequence],
    len: usize,
    mode: EvalMode,
) -> Result<(f64, f64)> {
    mode.validate()?;
    if len == 0 {
        return Err(LabError::Config("context length must be positive".into()));
    }
    let base_model = PreparedModel::new(base)?;
    let comp_model = PreparedModel::new(compressed)?;
    let per_sample: Vec<Option<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let Some(prefix) = s.prefix(len) else {
                log::warn!("sample {i} has {} tokens, skipping length {len}", s.len());
                return Ok(None);
            };
            let base_logits = base_model.forward(&prefix, ForwardOptions::default())?;
            let logits = comp_model.forward(&prefix, ForwardOptions::default())?;
            let positions = mode.positions(len);
            let probs = |l: &crate::tensor::Tensor| -> PositionProbs {
                positions.clone().map(|p| (p, logits_to_probs(l.row(p)))).collect()
            };
            sample_kl(&probs(&base_logits), &probs(&logits), positions).map(Some)
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = per_sample.into_iter().flatten().collect();
    if values.is_empty() {
        return Err(LabError::EmptyEvaluation(len));
    }
    Ok(mean_std(&values))
}

/// Inputs shared by every method of a sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub lengths: &'a [usize],
    pub samples: &'a [TokenSequence],
    /// Calibration sequences for methods that need activation statistics;
    /// should be disjoint from `samples`.
    pub calibration: &'a [TokenSequence],
    pub mode: EvalMode,
}

impl SweepSetup<'_> {
    fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if self.lengths.is_empty() || self.lengths[0] == 0 {
            return Err(LabError::Config("sweep lengths must be non-empty and positive".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::Config("sweep lengths must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Tokens to run per sample: the longest requested length it can cover.
    fn span(&self, sample: &TokenSequence) -> Option<usize> {
        self.lengths.iter().rev().copied().find(|&l| l <= sample.len())
    }

    /// Every position read by some length up to `span`, ascending.
    fn positions(&self, span: usize) -> Vec<usize> {
        let set: std::collections::BTreeSet<usize> = self
            .lengths
            .iter()
            .filter(|&&l| l <= span)
            .flat_map(|&l| self.mode.positions(l))
            .collect();
        set.into_iter().collect()
    }
}

/// Base-model next-token distributions at every position a sweep reads.
pub struct BaseCache {
    per_sample: Vec<Option<PositionProbs>>,
}

impl BaseCache {
    pub fn build(base: &PreparedModel, setup: &SweepSetup<'_>) -> Result<Self> {
        setup.validate()?;
        let per_sample = setup
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let Some(span) = setup.span(s) else {
                    log::warn!(
                        "sample {i} has {} tokens, shorter than every sweep length; skipped",
                        s.len()
                    );
                    return Ok(None);
                };
                probs_at(base, &s.prefix(span).unwrap(), &setup.positions(span)).map(Some)
            })
            .collect::<Result<_>>()?;
        Ok(BaseCache { per_sample })
    }
}

/// Compresses once and evaluates every sweep length.
///
/// Each sample is run a single time over its longest usable prefix, keeping
/// only the rows some length reads; because the forward pass is causal
/// bit-for-bit, those rows equal the ones of a truncated run. Aggregation follows sample order, so the
/// records do not depend on the thread count.
pub fn run_sweep(
    base: &Checkpoint,
    spec: &LabeledSpec,
    setup: &SweepSetup<'_>,
    cache: &BaseCache,
) -> Result<Vec<SweepRecord>> {
    setup.validate()?;
    let compressed = compress(base, &spec.spec, setup.calibration)?;
    let model = PreparedModel::new(&compressed)?;
    let per_sample: Vec<Option<Vec<(usize, f64)>>> = setup
        .samples
        .par_iter()
        .zip(&cache.per_sample)
        .map(|(s, base_probs)| {
            let Some(base_probs) = base_probs else {
                return Ok(None);
            };
            let span = setup.span(s).unwrap();
            let probs = probs_at(&model, &s.prefix(span).unwrap(), &setup.positions(span))?;
            setup
                .lengths
                .iter()
                .filter(|&&l| l <= span)
                .map(|&len| Ok((len, sample_kl(base_probs, &probs, setup.mode.positions(len))?)))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<_>>()?;

    setup
        .lengths
        .iter()
        .map(|&len| {
            let values: Vec<f64> = per_sample
                .iter()
                .flatten()
                .flat_map(|v| v.iter().filter(|(l, _)| *l == len).map(|(_, kl)| *kl))
                .collect();
            if values.is_empty() {
                return Err(LabError::EmptyEvaluation(len));
            }
            let skipped = setup.samples.len() - values.len();
            if skipped > 0 {
                log::warn!("{}: {skipped} samples shorter than {len} tokens skipped", spec.label);
            }
            let (kl_mean, kl_std) = mean_std(&values);
            Ok(SweepRecord {
                method_label: spec.label.clone(),
                context_length: len,
                kl_mean,
                kl_std,
                n_samples: values.len(),
            })
        })
        .collect()
}

/// Runs every labeled method against one shared base cache.
pub fn run_study(base: &Checkpoint, specs: &[LabeledSpec], setup: &SweepSetup<'_>) -> Result<Vec<SweepRecord>> {
    let base_model = PreparedModel::new(base)?;
    let cache = BaseCache::build(&base_model, setup)?;
    let mut out = Vec::new();
    for spec in specs {
        log::info!("sweeping {}", spec.label);
        out.extend(run_sweep(base, spec, setup, &cache)?);
    }
    Ok(out)
}

/// Least-squares trend of `kl_mean` against context length.
pub fn fit_slope(records: &[SweepRecord]) -> Option<LinearFit> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.context_length as f64, r.kl_mean))
        .collect();
    ols(&pts)
}

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.method_label, r.context_length, r.kl_mean, r.kl_std, r.n_samples
        )
        .unwrap();
    }
    s
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(LabError::Input("missing sweep CSV header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| LabError::Input(format!("sweep CSV row {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("field count"));
            }
            Ok(SweepRecord {
                method_label: f[0].to_string(),
                context_length: f[1].parse().map_err(|_| bad("context_length"))?,
                kl_mean: f[2].parse().map_err(|_| bad("kl_mean"))?,
                kl_std: f[3].parse().map_err(|_| bad("kl_std"))?,
                n_samples: f[4].parse().map_err(|_| bad("n_samples"))?,
            })
        })
        .collect()
}

/// Groups records by label, keeping first-appearance order.
pub fn by_label(records: &[SweepRecord]) -> Vec<(String, Vec<SweepRecord>)> {
    let mut out: Vec<(String, Vec<SweepRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(l, _)| *l == r.method_label) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((r.method_label.clone(), vec![r.clone()])),
        }
    }
    out
}
