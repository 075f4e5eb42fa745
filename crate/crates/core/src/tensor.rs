//! Dense row-major `f32` tensors and the handful of kernels the transformer
//! forward pass needs.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-reproducible across runs and thread counts. There is no broadcasting:
//! callers state shapes explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting shape mismatches and
    /// non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(LabError::Dimension(format!(
                "shape {shape:?} must have positive dimensions"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LabError::Dimension(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Input(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(LabError::Dimension(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// First `n` rows of a 2-D tensor.
    pub fn head_rows(&self, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if n == 0 || n > r {
            return Err(LabError::Dimension(format!(
                "cannot take {n} rows of a {r}-row tensor"
            )));
        }
        Ok(Tensor::from_parts(vec![n, c], self.data[..n * c].to_vec()))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * c).collect())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating each output element over `k`
/// in increasing order.
pub(crate) fn matmul_slices(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    // Four output rows share each pass over a row of `b`; every output element
    // still accumulates its k terms in increasing order.
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(LabError::Dimension(format!(
            "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_slices(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `e^x` for `x ≤ 0`: range reduction to `2^n · e^r`, `|r| ≤ ln2/2`, and a
/// degree-6 Taylor polynomial (relative error below 5e-7 after f32 rounding).
/// Branch-free so the softmax loop vectorizes; inputs below -87 are clamped.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5·2^23 rounds to the nearest integer and leaves it in the low mantissa bits.
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(bits)
}

/// Maximum of a non-empty finite row. Max is order-independent, so the
/// lane-parallel scan returns the same value as a sequential one.
fn row_max(row: &[f32]) -> f32 {
    let mut lanes = [f32::NEG_INFINITY; 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = l.max(v);
        }
    }
    let tail = chunks.remainder().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    lanes.iter().copied().fold(tail, f32::max)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row_max(row);
    for v in row.iter_mut() {
        *v = exp_nonpositive(*v - max);
    }
    let mut sum = 0.0f32;
    for &v in row.iter() {
        sum += v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn rms_norm_slice(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64;
    let inv = (1.0 / (mean_sq + f64::from(eps)).sqrt()) as f32;
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * (v * inv);
    }
}

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)` for a 1-D tensor.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    if x.shape.len() != 1 || gain.shape != x.shape {
        return Err(LabError::Dimension(format!(
            "rms_norm expects matching 1-D shapes, got {:?} and {:?}",
            x.shape, gain.shape
        )));
    }
    if eps <= 0.0 {
        return Err(LabError::Config("rms_norm eps must be positive".into()));
    }
    let mut out = vec![0.0; x.numel()];
    rms_norm_slice(&x.data, &gain.data, eps, &mut out);
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Row-wise RMS normalization of a 2-D tensor.
pub fn rms_norm_rows(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if gain.shape != [d] {
        return Err(LabError::Dimension(format!(
            "gain shape {:?} does not match row width {d}",
            gain.shape
        )));
    }
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        rms_norm_slice(row, &gain.data, eps, o);
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Cosine/sine tables for rotary embeddings; `angle = pos · theta^(-2j/d_head)`.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub(crate) fn new(positions: &[usize], d_head: usize, theta: f64) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(LabError::Config(format!(
                "rotary embeddings need an even head dimension, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|j| theta.powf(-(2.0 * j as f64) / d_head as f64))
            .collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &pos in positions {
            for &f in &freqs {
                let angle = pos as f64 * f;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(RopeTable { half, cos, sin })
    }

    /// Rotates the pairs of one head-row in place for table row `t`.
    pub(crate) fn rotate(&self, t: usize, row: &mut [f32]) {
        let cos = &self.cos[t * self.half..(t + 1) * self.half];
        let sin = &self.sin[t * self.half..(t + 1) * self.half];
        for j in 0..self.half {
            let (x0, x1) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = x0 * cos[j] - x1 * sin[j];
            row[2 * j + 1] = x0 * sin[j] + x1 * cos[j];
        }
    }
}

pub fn rope_apply(x: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    let (t, d_head) = x.dims2()?;
    if positions.len() != t {
        return Err(LabError::Dimension(format!(
            "{} positions for {t} rows",
            positions.len()
        )));
    }
    let table = RopeTable::new(positions, d_head, theta)?;
    let mut out = x.clone();
    for (i, row) in out.data.chunks_mut(d_head).enumerate() {
        table.rotate(i, row);
    }
    Ok(out)
}
