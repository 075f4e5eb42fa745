//! Monte Carlo model of how key/value noise accumulates in an attention
//! read-out as the sequence grows.
//!
//! Each trial draws scalar query, key and value streams plus Gaussian noise
//! `ε ~ N(0, σ²)` on keys and values, and measures the error
//! `h_t(noisy) − h_t(clean)` of the hidden state at each requested `t` under
//! one of three readings of the attention sum:
//!
//! * `per_term`: softmax applied to each single term, which is identically 1,
//!   so `h_t = Σ_{i≤t} (v_i + ε_vi)` and key noise drops out;
//! * `first_order`: linearization around the clean joint softmax,
//!   `Σ a_ti ε_vi + a_ti (1 − a_ti) (q_t / √d_k) v_i ε_ki`;
//! * `full_attention`: the exact joint-softmax read-out with noisy keys and values.
//!
//! Trials are processed in fixed-size chunks with per-trial streams, and the
//! chunk sums are combined in order, so curves are identical for any thread count.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::stream_rng;
use crate::stats::{ols, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    PerTerm,
    FirstOrder,
    FullAttention,
}

impl Interpretation {
    pub const ALL: [Interpretation; 3] = [
        Interpretation::PerTerm,
        Interpretation::FirstOrder,
        Interpretation::FullAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Interpretation::PerTerm => "per_term",
            Interpretation::FirstOrder => "first_order",
            Interpretation::FullAttention => "full_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.as_str() == s)
    }
}

/// Distribution of the clean q, k, v streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorDist {
    /// q, k, v ~ N(0, 1) / √d_k.
    #[default]
    StandardScaled,
    /// q ≡ 0, forcing uniform attention weights; k, v as above.
    UniformAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    KeysAndValues,
    ValuesOnly,
    KeysOnly,
}

fn default_d_k() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSimConfig {
    pub t_max: usize,
    pub sigma: f64,
    #[serde(default = "default_d_k")]
    pub d_k: usize,
    pub trials: usize,
    pub interpretation: Interpretation,
    #[serde(default)]
    pub vector_dist: VectorDist,
    #[serde(default)]
    pub noise_target: NoiseTarget,
    /// Positions to report; all of `1..=t_max` when absent.
    #[serde(default)]
    pub eval_points: Option<Vec<usize>>,
    pub seed: u64,
}

impl NoiseSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 2 {
            return Err(LabError::Config("t_max must be at least 2".into()));
        }
        if self.trials < 100 {
            return Err(LabError::Config("trials must be at least 100".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(LabError::Config("sigma must be finite and non-negative".into()));
        }
        if self.d_k == 0 {
            return Err(LabError::Config("d_k must be at least 1".into()));
        }
        if let Some(points) = &self.eval_points {
            if points.is_empty()
                || points[0] == 0
                || points.windows(2).any(|w| w[0] >= w[1])
                || *points.last().unwrap() > self.t_max
            {
                return Err(LabError::Config(
                    "eval_points must be strictly increasing within 1..=t_max".into(),
                ));
            }
        }
        Ok(())
    }

    fn points(&self) -> Vec<usize> {
        self.eval_points
            .clone()
            .unwrap_or_else(|| (1..=self.t_max).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCurve {
    pub interpretation: Interpretation,
    pub t: Vec<usize>,
    /// Unbiased sample variance of the hidden-state error across trials.
    pub variance: Vec<f64>,
    /// 95% normal-approximation half-width of each variance estimate.
    pub ci_halfwidth: Vec<f64>,
}

const CHUNK: usize = 64;
const Z95: f64 = 1.959_963_984_540_054;

struct Streams {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ek: Vec<f64>,
    ev: Vec<f64>,
}

fn draw_streams(cfg: &NoiseSimConfig, trial: usize, len: usize) -> Streams {
    let mut rng = stream_rng(cfg.seed, trial as u64);
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let (key_noise, value_noise) = match cfg.noise_target {
        NoiseTarget::KeysAndValues => (1.0, 1.0),
        NoiseTarget::ValuesOnly => (0.0, 1.0),
        NoiseTarget::KeysOnly => (1.0, 0.0),
    };
    let mut s = Streams {
        q: Vec::with_capacity(len),
        k: Vec::with_capacity(len),
        v: Vec::with_capacity(len),
        ek: Vec::with_capacity(len),
        ev: Vec::with_capacity(len),
    };
    for _ in 0..len {
        let mut z = || rng.sample::<f64, _>(StandardNormal);
        let q = z() * scale;
        s.q.push(match cfg.vector_dist {
            VectorDist::StandardScaled => q,
            VectorDist::UniformAttention => 0.0,
        });
        s.k.push(z() * scale);
        s.v.push(z() * scale);
        s.ek.push(z() * cfg.sigma * key_noise);
        s.ev.push(z() * cfg.sigma * value_noise);
    }
    s
}

fn softmax_weights(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Hidden-state error at each point for one trial.
fn trial_errors(cfg: &NoiseSimConfig, points: &[usize], trial: usize) -> Vec<f64> {
    let len = *points.last().unwrap();
    let s = draw_streams(cfg, trial, len);
    let inv_sqrt_dk = 1.0 / (cfg.d_k as f64).sqrt();
    match cfg.interpretation {
        Interpretation::PerTerm => {
            let mut acc = 0.0;
            let mut cum = Vec::with_capacity(len);
            for &e in &s.ev {
                acc += e;
                cum.push(acc);
            }
            points.iter().map(|&t| cum[t - 1]).collect()
        }
        Interpretation::FirstOrder => points
            .iter()
            .map(|&t| {
                let qt = s.q[t - 1] * inv_sqrt_dk;
                let mut a: Vec<f64> = s.k[..t].iter().map(|&k| qt * k).collect();
                softmax_weights(&mut a);
                a.iter()
                    .enumerate()
                    .map(|(i, &ai)| ai * s.ev[i] + ai * (1.0 - ai) * qt * s.v[i] * s.ek[i])
                    .sum()
            })
            .collect(),
        Interpretation::FullAttention => points
            .iter()
            .map(|&t| {
                let qt = s.q[t - 1] * inv_sqrt_dk;
                let mut clean: Vec<f64> = s.k[..t].iter().map(|&k| qt * k).collect();
                let mut noisy: Vec<f64> = s.k[..t]
                    .iter()
                    .zip(&s.ek)
                    .map(|(&k, &e)| qt * (k + e))
                    .collect();
                softmax_weights(&mut clean);
                softmax_weights(&mut noisy);
                let h_clean: f64 = clean.iter().zip(&s.v).map(|(a, v)| a * v).sum();
                let h_noisy: f64 = noisy
                    .iter()
                    .zip(s.v.iter().zip(&s.ev))
                    .map(|(a, (v, e))| a * (v + e))
                    .sum();
                h_noisy - h_clean
            })
            .collect(),
    }
}

/// Power sums `Σe, Σe², Σe³, Σe⁴` per point.
type Moments = Vec<[f64; 4]>;

pub fn simulate(cfg: &NoiseSimConfig) -> Result<NoiseCurve> {
    cfg.validate()?;
    let points = cfg.points();
    let n_chunks = cfg.trials.div_ceil(CHUNK);
    let chunks: Vec<Moments> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = vec![[0.0f64; 4]; points.len()];
            for trial in c * CHUNK..((c + 1) * CHUNK).min(cfg.trials) {
                for (acc, e) in m.iter_mut().zip(trial_errors(cfg, &points, trial)) {
                    let e2 = e * e;
                    acc[0] += e;
                    acc[1] += e2;
                    acc[2] += e2 * e;
                    acc[3] += e2 * e2;
                }
            }
            m
        })
        .collect();
    let mut total = vec![[0.0f64; 4]; points.len()];
    for m in &chunks {
        for (t, c) in total.iter_mut().zip(m) {
            for j in 0..4 {
                t[j] += c[j];
            }
        }
    }

    let n = cfg.trials as f64;
    let mut variance = Vec::with_capacity(points.len());
    let mut ci = Vec::with_capacity(points.len());
    for [s1, s2, s3, s4] in total {
        let mean = s1 / n;
        let var = ((s2 - s1 * mean) / (n - 1.0)).max(0.0);
        let m2 = (s2 / n - mean * mean).max(0.0);
        let m4 = s4 / n - 4.0 * mean * s3 / n + 6.0 * mean * mean * s2 / n - 3.0 * mean.powi(4);
        let se2 = (m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n;
        variance.push(var);
        ci.push(Z95 * se2.max(0.0).sqrt());
    }
    Ok(NoiseCurve {
        interpretation: cfg.interpretation,
        t: points,
        variance,
        ci_halfwidth: ci,
    })
}

pub fn fit_linear(curve: &NoiseCurve) -> Option<LinearFit> {
    let pts: Vec<(f64, f64)> = curve
        .t
        .iter()
        .zip(&curve.variance)
        .map(|(&t, &v)| (t as f64, v))
        .collect();
    ols(&pts)
}

#[derive(Debug, Clone)]
pub struct InterpretationResult {
    pub curve: NoiseCurve,
    pub fit: Option<LinearFit>,
}

/// Runs each interpretation on the same seeds (hence the same draws).
pub fn compare_interpretations(cfg: &NoiseSimConfig, which: &[Interpretation]) -> Result<Vec<InterpretationResult>> {
    which
        .iter()
        .map(|&interpretation| {
            let curve = simulate(&NoiseSimConfig {
                interpretation,
                ..cfg.clone()
            })?;
            let fit = fit_linear(&curve);
            Ok(InterpretationResult { curve, fit })
        })
        .collect()
}

/// Plain-text side-by-side table of slopes and r².
pub fn comparison_table(results: &[InterpretationResult]) -> String {
    let mut s = format!("{:<16} {:>14} {:>14} {:>8}\n", "interpretation", "slope", "intercept", "r2");
    for r in results {
        match r.fit {
            Some(f) => writeln!(
                s,
                "{:<16} {:>14.6e} {:>14.6e} {:>8.4}",
                r.curve.interpretation.as_str(),
                f.slope,
                f.intercept,
                f.r2
            ),
            None => writeln!(s, "{:<16} {:>14} {:>14} {:>8}", r.curve.interpretation.as_str(), "-", "-", "-"),
        }
        .unwrap();
    }
    s
}

pub const NOISE_CSV_HEADER: &str = "interpretation,t,variance,ci_halfwidth";

pub fn noise_csv(curves: &[NoiseCurve]) -> String {
    let mut s = String::from(NOISE_CSV_HEADER);
    s.push('\n');
    for c in curves {
        for ((t, v), h) in c.t.iter().zip(&c.variance).zip(&c.ci_halfwidth) {
            writeln!(s, "{},{t},{v},{h}", c.interpretation.as_str()).unwrap();
        }
    }
    s
}

pub fn parse_noise_csv(text: &str) -> Result<Vec<NoiseCurve>> {
    let mut lines = text.lines();
    if lines.next() != Some(NOISE_CSV_HEADER) {
        return Err(LabError::Input("missing noise CSV header".into()));
    }
    let mut curves: Vec<NoiseCurve> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| LabError::Input(format!("noise CSV row {}: bad {what}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("field count"));
        }
        let interp = Interpretation::parse(f[0]).ok_or_else(|| bad("interpretation"))?;
        let t = f[1].parse().map_err(|_| bad("t"))?;
        let v = f[2].parse().map_err(|_| bad("variance"))?;
        let h = f[3].parse().map_err(|_| bad("ci_halfwidth"))?;
        let curve = match curves.iter_mut().find(|c| c.interpretation == interp) {
            Some(c) => c,
            None => {
                curves.push(NoiseCurve {
                    interpretation: interp,
                    t: vec![],
                    variance: vec![],
                    ci_halfwidth: vec![],
                });
                curves.last_mut().unwrap()
            }
        };
        curve.t.push(t);
        curve.variance.push(v);
        curve.ci_halfwidth.push(h);
    }
    Ok(curves)
}
