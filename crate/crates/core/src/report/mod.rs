//! Experiment configuration, the end-to-end study runner, and report
//! emission (CSV, slope tables, SVG charts).

pub mod svg;

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::{
    by_label, fit_slope, parse_sweep_csv, run_study, synthetic_corpus, EvalMode, LabeledSpec, SweepRecord,
    SweepSetup, SWEEP_CSV_HEADER,
};
use crate::model::{gen_toy_model_with, load_checkpoint, load_token_file, Checkpoint, ModelConfig, TokenSequence, ToyModelOptions};
use crate::noise::{fit_linear, parse_noise_csv, NoiseCurve, NOISE_CSV_HEADER};
use svg::{line_chart, Point, Series};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Generate {
        #[serde(default)]
        config: ModelConfig,
        seed: u64,
        #[serde(default)]
        options: ToyModelOptions,
    },
    Load(PathBuf),
}

impl ModelSource {
    pub fn materialize(&self) -> Result<Checkpoint> {
        match self {
            ModelSource::Generate { config, seed, options } => {
                config.validate()?;
                Ok(gen_toy_model_with(config, *seed, options))
            }
            ModelSource::Load(path) => load_checkpoint(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    /// Seeded synthetic text keyed by the experiment's master seed.
    #[default]
    Synthetic,
    /// Newline-delimited token-id file: the first `n_samples` non-blank lines
    /// are evaluation samples, the following lines calibration sequences.
    TokenFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSetup {
    pub n_sequences: usize,
    pub length: usize,
}

impl Default for CalibrationSetup {
    fn default() -> Self {
        CalibrationSetup {
            n_sequences: 8,
            length: 512,
        }
    }
}

fn default_n_samples() -> usize {
    20
}
fn default_lengths() -> Vec<usize> {
    vec![256, 512, 1024, 2048, 4096]
}

/// A full sweep study as read from its JSON configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub methods: Vec<LabeledSpec>,
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default)]
    pub samples: SampleSource,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub calibration: CalibrationSetup,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(format!("experiment config: {e}")))
    }

    /// Reads a config file and resolves its relative paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let ModelSource::Load(p) = &mut self.model {
            fix(p);
        }
        if let SampleSource::TokenFile(p) = &mut self.samples {
            fix(p);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(LabError::Config("no compression methods listed".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if m.label.is_empty() || m.label.contains([',', '\n', '\r', '"']) {
                return Err(LabError::Config(format!("invalid method label {:?}", m.label)));
            }
            if self.methods[..i].iter().any(|o| o.label == m.label) {
                return Err(LabError::Config(format!("duplicate method label {:?}", m.label)));
            }
            m.spec.validate()?;
        }
        if self.lengths.is_empty() || self.lengths[0] == 0 || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::Config("lengths must be positive and strictly increasing".into()));
        }
        if self.n_samples == 0 {
            return Err(LabError::Config("n_samples must be at least 1".into()));
        }
        self.eval_mode.validate()
    }
}

/// Model plus evaluation and calibration sequences, ready to sweep.
pub struct PreparedExperiment {
    pub base: Checkpoint,
    pub samples: Vec<TokenSequence>,
    pub calibration: Vec<TokenSequence>,
}

pub fn prepare_experiment(cfg: &ExperimentConfig) -> Result<PreparedExperiment> {
    cfg.validate()?;
    let base = cfg.model.materialize()?;
    let mc = base.config();
    let max_len = *cfg.lengths.last().unwrap();
    if max_len > mc.max_context {
        return Err(LabError::Config(format!(
            "sweep length {max_len} exceeds the model's max_context {}",
            mc.max_context
        )));
    }
    let calib = &cfg.calibration;
    let (samples, calibration) = match &cfg.samples {
        SampleSource::Synthetic => (
            synthetic_corpus(cfg.seed, 0, cfg.n_samples, max_len, mc.vocab_size),
            synthetic_corpus(cfg.seed, cfg.n_samples, calib.n_sequences, calib.length, mc.vocab_size),
        ),
        SampleSource::TokenFile(path) => {
            let mut seqs = load_token_file(path, mc.vocab_size)?;
            if seqs.len() < cfg.n_samples {
                log::warn!("token file has {} sequences, fewer than n_samples {}", seqs.len(), cfg.n_samples);
            }
            let rest = seqs.split_off(cfg.n_samples.min(seqs.len()));
            let calibration = rest
                .into_iter()
                .take(calib.n_sequences)
                .map(|s| s.prefix(calib.length.min(s.len())).unwrap())
                .collect();
            (seqs, calibration)
        }
    };
    if calibration.is_empty() && cfg.methods.iter().any(|m| m.spec.needs_calibration()) {
        return Err(LabError::Config("wanda needs calibration sequences but none are available".into()));
    }
    Ok(PreparedExperiment {
        base,
        samples,
        calibration,
    })
}

/// Runs every configured method over every length. Callers choose the rayon
/// pool; the output does not depend on its size.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    let prep = prepare_experiment(cfg)?;
    let setup = SweepSetup {
        lengths: &cfg.lengths,
        samples: &prep.samples,
        calibration: &prep.calibration,
        mode: cfg.eval_mode,
    };
    run_study(&prep.base, &cfg.methods, &setup)
}

pub fn sweep_chart(records: &[SweepRecord]) -> String {
    let series: Vec<Series> = by_label(records)
        .into_iter()
        .map(|(label, rs)| Series {
            label,
            points: rs
                .iter()
                .map(|r| Point {
                    x: r.context_length as f64,
                    y: r.kl_mean,
                    err: Some(r.kl_std),
                })
                .collect(),
        })
        .collect();
    line_chart(
        "KL(compressed || base) vs context length",
        "context length (tokens)",
        "mean KL divergence (nats)",
        &series,
    )
}

pub fn noise_chart(curves: &[NoiseCurve]) -> String {
    let series: Vec<Series> = curves
        .iter()
        .map(|c| Series {
            label: c.interpretation.as_str().to_string(),
            points: c
                .t
                .iter()
                .zip(&c.variance)
                .map(|(&t, &v)| Point {
                    x: t as f64,
                    y: v,
                    err: None,
                })
                .collect(),
        })
        .collect();
    line_chart("Hidden-state error variance vs position", "t", "Var[h_t noisy - h_t clean]", &series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeRow {
    pub method: String,
    pub slope: f64,
    pub r2: f64,
}

pub const SLOPE_CSV_HEADER: &str = "method,slope,r2";

/// Parsed contents of a CSV handed to `report`.
#[derive(Debug, Clone, PartialEq)]
pub enum ReportInput {
    Sweep(Vec<SweepRecord>),
    Noise(Vec<NoiseCurve>),
}

pub fn parse_report_input(text: &str) -> Result<ReportInput> {
    match text.lines().next() {
        Some(SWEEP_CSV_HEADER) => parse_sweep_csv(text).map(ReportInput::Sweep),
        Some(NOISE_CSV_HEADER) => parse_noise_csv(text).map(ReportInput::Noise),
        other => Err(LabError::Input(format!("unrecognized CSV header {other:?}"))),
    }
}

/// Slopes per sweep label and per simulator interpretation, in input order.
/// Series with fewer than two distinct x values are skipped.
pub fn slope_table(inputs: &[ReportInput]) -> Vec<SlopeRow> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for input in inputs {
        match input {
            ReportInput::Sweep(r) => records.extend(r.iter().cloned()),
            ReportInput::Noise(curves) => {
                for c in curves {
                    if let Some(f) = fit_linear(c) {
                        rows.push(SlopeRow {
                            method: c.interpretation.as_str().to_string(),
                            slope: f.slope,
                            r2: f.r2,
                        });
                    }
                }
            }
        }
    }
    for (label, rs) in by_label(&records) {
        if let Some(f) = fit_slope(&rs) {
            rows.push(SlopeRow {
                method: label,
                slope: f.slope,
                r2: f.r2,
            });
        }
    }
    rows
}

pub fn slope_csv(rows: &[SlopeRow]) -> String {
    let mut s = String::from(SLOPE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{}", r.method, r.slope, r.r2).unwrap();
    }
    s
}

pub fn parse_slope_csv(text: &str) -> Result<Vec<SlopeRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SLOPE_CSV_HEADER) {
        return Err(LabError::Input("missing slope CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || LabError::Input(format!("bad slope row {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(SlopeRow {
                method: f[0].to_string(),
                slope: f[1].parse().map_err(|_| bad())?,
                r2: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn slope_text(rows: &[SlopeRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>14}  {:>8}\n", "method", "slope/token", "r2");
    for r in rows {
        writeln!(s, "{:<width$}  {:>14.6e}  {:>8.4}", r.method, r.slope, r.r2).unwrap();
    }
    s
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".lclab.lock";

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| LabError::io(&path, e))?;
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn config_validation() {
        let json = r#"{
            "model": {"generate": {"seed": 1}},
            "methods": [{"label": "id", "kind": "identity"}, {"label": "id", "kind": "identity"}],
            "lengths": [4, 8]
        }"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert!(cfg.validate().is_err());

        let json = r#"{
            "model": {"generate": {"seed": 1}},
            "methods": [{"label": "m", "kind": "prune", "method": "magnitude", "ratio": 0.5}],
            "lengths": [8, 4]
        }"#;
        assert!(ExperimentConfig::from_json(json).unwrap().validate().is_err());
    }

    #[test]
    fn slope_csv_round_trip() {
        let rows = vec![
            SlopeRow { method: "a".into(), slope: 1.25e-7, r2: 0.5 },
            SlopeRow { method: "b".into(), slope: -3.0, r2: 1.0 },
        ];
        assert_eq!(parse_slope_csv(&slope_csv(&rows)).unwrap(), rows);
    }
}
