//! Fake quantization (quantize → dequantize) of weights and activations.
//!
//! Weights use symmetric per-group quantization: each row is tiled along the
//! input dimension into groups of `group_size` (the last one may be short),
//! every group gets `scale = max|w| / (2^(b−1) − 1)` and
//! `q = round_half_even(w / scale)`. The mixed-precision variant keeps the
//! largest-magnitude groups at a higher bit-width. Activations use asymmetric
//! min–max quantization per token (row).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{Checkpoint, TensorRole};
use crate::stats::ceil_count;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Symmetric,
}

/// How salient groups are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMetric {
    #[default]
    MaxAbs,
    L2,
}

fn default_group_size() -> usize {
    128
}
fn default_salient_bits() -> u8 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u8,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    #[serde(default)]
    pub activation_bits: Option<u8>,
    #[serde(default)]
    pub salient_fraction: f64,
    #[serde(default = "default_salient_bits")]
    pub salient_bits: u8,
    #[serde(default)]
    pub saliency: SaliencyMetric,
}

impl QuantSpec {
    pub fn weight_only(bits: u8) -> Self {
        QuantSpec {
            weight_bits: bits,
            group_size: default_group_size(),
            weight_scheme: WeightScheme::Symmetric,
            activation_bits: None,
            salient_fraction: 0.0,
            salient_bits: default_salient_bits(),
            saliency: SaliencyMetric::MaxAbs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_weight_bits(self.weight_bits)?;
        if self.group_size == 0 {
            return Err(LabError::Config("group_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.salient_fraction) {
            return Err(LabError::Config(format!(
                "salient_fraction {} must lie in [0, 1)",
                self.salient_fraction
            )));
        }
        if self.salient_fraction > 0.0 {
            if self.salient_bits != 8 {
                return Err(LabError::Config("salient_bits must be 8".into()));
            }
            if self.salient_bits <= self.weight_bits {
                return Err(LabError::Config(format!(
                    "salient_bits {} must exceed weight_bits {}",
                    self.salient_bits, self.weight_bits
                )));
            }
        }
        if let Some(b) = self.activation_bits {
            if b != 8 {
                return Err(LabError::Config(format!("activation_bits must be 8, got {b}")));
            }
        }
        Ok(())
    }
}

fn check_weight_bits(bits: u8) -> Result<()> {
    if matches!(bits, 3 | 4 | 8) {
        Ok(())
    } else {
        Err(LabError::Config(format!("weight bits must be 3, 4 or 8, got {bits}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    /// 0 for an all-zero group.
    pub scale: f64,
    pub q: Vec<i32>,
}

impl QuantizedGroup {
    pub fn dequantize(&self) -> Vec<f32> {
        self.q.iter().map(|&q| (f64::from(q) * self.scale) as f32).collect()
    }
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Symmetric round-half-to-even quantization of one group.
///
/// The ratio is formed as `w·qmax / max|w|`, so the group maximum maps to
/// exactly `±qmax` and dequantizes back to itself; this makes the transform a
/// bitwise projection.
pub fn quantize_group(w: &[f32], bits: u8) -> Result<QuantizedGroup> {
    check_weight_bits(bits)?;
    let qm = qmax(bits);
    let max_abs = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(QuantizedGroup {
            scale: 0.0,
            q: vec![0; w.len()],
        });
    }
    let m = f64::from(max_abs);
    let q = w
        .iter()
        .map(|&v| {
            let r = (f64::from(v) * f64::from(qm) / m).round_ties_even();
            r.clamp(-f64::from(qm), f64::from(qm)) as i32
        })
        .collect();
    Ok(QuantizedGroup {
        scale: m / f64::from(qm),
        q,
    })
}

/// Group layout of a weight matrix: rows tiled along the input dimension.
#[derive(Debug, Clone, Copy)]
pub struct GroupLayout {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub groups_per_row: usize,
}

impl GroupLayout {
    pub fn new(w: &Tensor, group_size: usize) -> Result<Self> {
        let (rows, cols) = w.dims2()?;
        if group_size == 0 {
            return Err(LabError::Config("group_size must be at least 1".into()));
        }
        Ok(GroupLayout {
            rows,
            cols,
            group_size,
            groups_per_row: cols.div_ceil(group_size),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.rows * self.groups_per_row
    }

    /// Flat element range of group `g` (row-major group numbering).
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        let (r, k) = (g / self.groups_per_row, g % self.groups_per_row);
        let start = k * self.group_size;
        let end = (start + self.group_size).min(self.cols);
        r * self.cols + start..r * self.cols + end
    }
}

fn quantize_groups_with(w: &Tensor, group_size: usize, bits_for: impl Fn(usize) -> u8) -> Result<Tensor> {
    let layout = GroupLayout::new(w, group_size)?;
    let mut out = w.clone();
    for g in 0..layout.n_groups() {
        let range = layout.range(g);
        let deq = quantize_group(&w.data()[range.clone()], bits_for(g))?.dequantize();
        out.data_mut()[range].copy_from_slice(&deq);
    }
    Ok(out)
}

/// Uniform per-group fake quantization at `spec.weight_bits`.
pub fn quantize_weights(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    spec.validate()?;
    quantize_groups_with(w, spec.group_size, |_| spec.weight_bits)
}

/// Indices of the `ceil(fraction · n_groups)` groups with the largest
/// magnitude; ties go to the lower group index.
pub fn select_salient_groups(
    w: &Tensor,
    group_size: usize,
    fraction: f64,
    metric: SaliencyMetric,
) -> Result<BTreeSet<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(LabError::Config(format!("fraction {fraction} must lie in [0, 1)")));
    }
    let layout = GroupLayout::new(w, group_size)?;
    let n = layout.n_groups();
    let k = ceil_count(fraction, n);
    if k == 0 {
        return Ok(BTreeSet::new());
    }
    let scores: Vec<f64> = (0..n)
        .map(|g| {
            let vals = &w.data()[layout.range(g)];
            match metric {
                SaliencyMetric::MaxAbs => vals.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs()))),
                SaliencyMetric::L2 => vals.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt(),
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).collect())
}

/// Per-group quantization with salient groups kept at `spec.salient_bits`.
pub fn quantize_mixed(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    spec.validate()?;
    let salient = select_salient_groups(w, spec.group_size, spec.salient_fraction, spec.saliency)?;
    quantize_groups_with(w, spec.group_size, |g| {
        if salient.contains(&g) {
            spec.salient_bits
        } else {
            spec.weight_bits
        }
    })
}

/// Asymmetric min–max fake quantization of each row of `x[t × d]`.
/// Constant rows pass through unchanged.
pub fn quantize_activations_per_token(x: &Tensor, bits: u8) -> Tensor {
    let d = *x.shape().last().expect("tensor has a shape");
    let levels = f64::from((1u32 << bits) - 1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (lo, hi) = row.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if lo == hi {
            continue;
        }
        let scale = (f64::from(hi) - f64::from(lo)) / levels;
        let zero = (-f64::from(lo) / scale).round_ties_even();
        for v in row.iter_mut() {
            let q = ((f64::from(*v) / scale).round_ties_even() + zero).clamp(0.0, levels);
            *v = ((q - zero) * scale) as f32;
        }
    }
    out
}

/// Quantizes every attention and feed-forward projection of a checkpoint and
/// records the activation bit-width for weight-activation mode.
pub fn apply_quant(ckpt: &Checkpoint, spec: &QuantSpec) -> Result<Checkpoint> {
    spec.validate()?;
    let out = ckpt.map_tensors(&[TensorRole::Projection], |_, w| quantize_mixed(w, spec))?;
    Ok(out.with_activation_bits(spec.activation_bits))
}

/// Mean squared difference between two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}
