//! Zero-shot unstructured pruning: magnitude, Wanda and random.
//!
//! Every method zeroes exactly `floor(ratio · group_size)` entries per
//! comparison group. Ties in the ranking prune the lower flat (or column)
//! index first. Surviving weights are left bit-identical.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{Checkpoint, ForwardOptions, PreparedModel, TensorRole, TokenSequence};
use crate::model::ActivationObserver;
use crate::rng::{name_key, stream_rng};
use crate::stats::floor_count;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Magnitude,
    Wanda,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerRow,
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    pub ratio: f64,
    /// Defaults to per-layer for magnitude and per-row for Wanda; random
    /// pruning always draws over the whole matrix.
    #[serde(default)]
    pub granularity: Option<Granularity>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Also prune the embedding table and output head.
    #[serde(default)]
    pub include_embeddings_and_head: bool,
}

impl PruneSpec {
    pub fn new(method: PruneMethod, ratio: f64) -> Self {
        PruneSpec {
            method,
            ratio,
            granularity: None,
            seed: None,
            include_embeddings_and_head: false,
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity.unwrap_or(match self.method {
            PruneMethod::Wanda => Granularity::PerRow,
            _ => Granularity::PerLayer,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.method == PruneMethod::Random && self.seed.is_none() {
            return Err(LabError::Config("random pruning requires a seed".into()));
        }
        if self.method == PruneMethod::Wanda && self.granularity == Some(Granularity::PerLayer) {
            return Err(LabError::Config("wanda compares scores per output row only".into()));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(LabError::Config(format!("prune ratio {ratio} must lie in [0, 1)")))
    }
}

/// Zeroes the `floor(ratio · len)` lowest-scoring entries of one comparison
/// group. `offset` is the flat index of the group's first element.
fn prune_group(values: &mut [f32], scores: &[f64], ratio: f64) {
    let k = floor_count(ratio, values.len());
    if k == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    for &i in &order[..k] {
        values[i] = 0.0;
    }
}

fn row_width(w: &Tensor) -> usize {
    *w.shape().last().unwrap()
}

pub fn prune_magnitude(w: &Tensor, ratio: f64, granularity: Granularity) -> Result<Tensor> {
    check_ratio(ratio)?;
    let mut out = w.clone();
    let scores: Vec<f64> = w.data().iter().map(|v| f64::from(v.abs())).collect();
    match granularity {
        Granularity::PerLayer => prune_group(out.data_mut(), &scores, ratio),
        Granularity::PerRow => {
            let n = row_width(w);
            for (vals, sc) in out.data_mut().chunks_mut(n).zip(scores.chunks(n)) {
                prune_group(vals, sc, ratio);
            }
        }
    }
    Ok(out)
}

/// Wanda: score `|W_ij| · ‖X_j‖₂`, pruned per output row.
pub fn prune_wanda(w: &Tensor, col_norms: &[f32], ratio: f64) -> Result<Tensor> {
    check_ratio(ratio)?;
    let (_, cols) = w.dims2()?;
    if col_norms.len() != cols {
        return Err(LabError::Dimension(format!(
            "{} column norms for a matrix with {cols} input columns",
            col_norms.len()
        )));
    }
    let mut out = w.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let scores: Vec<f64> = row
            .iter()
            .zip(col_norms)
            .map(|(&v, &n)| f64::from(v.abs()) * f64::from(n))
            .collect();
        prune_group(row, &scores, ratio);
    }
    Ok(out)
}

/// Zeroes `floor(ratio · numel)` entries picked by a seeded partial
/// Fisher–Yates shuffle of the flat indices.
pub fn prune_random(w: &Tensor, ratio: f64, seed: u64) -> Result<Tensor> {
    check_ratio(ratio)?;
    let n = w.numel();
    let k = floor_count(ratio, n);
    let mut out = w.clone();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, n as u64);
    let (chosen, _) = idx.partial_shuffle(&mut rng, k);
    for &i in chosen.iter() {
        out.data_mut()[i] = 0.0;
    }
    Ok(out)
}

/// Per weight-matrix L2 norms of each input column over all calibration tokens.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationNorms {
    pub norms: BTreeMap<String, Vec<f32>>,
}

impl CalibrationNorms {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.norms.get(name).map(Vec::as_slice)
    }
}

#[derive(Default)]
struct SquareAccumulator {
    sums: Mutex<BTreeMap<String, Vec<f64>>>,
}

impl ActivationObserver for SquareAccumulator {
    fn observe(&self, consumers: &[String], input: &Tensor) {
        let d = row_width(input);
        let mut col = vec![0.0f64; d];
        for row in input.data().chunks(d) {
            for (c, &v) in col.iter_mut().zip(row) {
                *c += f64::from(v) * f64::from(v);
            }
        }
        let mut sums = self.sums.lock().unwrap();
        for name in consumers {
            let acc = sums.entry(name.clone()).or_insert_with(|| vec![0.0; d]);
            for (a, c) in acc.iter_mut().zip(&col) {
                *a += c;
            }
        }
    }
}

/// Runs the calibration sequences through the model in order and returns
/// `sqrt(Σ x_j²)` per input column of every linear layer.
pub fn calibrate(ckpt: &Checkpoint, calib: &[TokenSequence]) -> Result<CalibrationNorms> {
    if calib.is_empty() {
        return Err(LabError::Config("calibration set is empty".into()));
    }
    let model = PreparedModel::new(ckpt)?;
    let acc = SquareAccumulator::default();
    for seq in calib {
        model.forward(
            seq,
            ForwardOptions {
                observer: Some(&acc),
                transform: None,
            },
        )?;
    }
    let norms = acc
        .sums
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|s| s.sqrt() as f32).collect()))
        .collect();
    Ok(CalibrationNorms { norms })
}

/// Prunes every attention and feed-forward projection (plus embedding and
/// head when requested). Random pruning seeds each matrix with
/// `(seed, FNV-1a(name))`.
pub fn apply_prune(ckpt: &Checkpoint, spec: &PruneSpec, norms: Option<&CalibrationNorms>) -> Result<Checkpoint> {
    spec.validate()?;
    if spec.method == PruneMethod::Wanda && norms.is_none() {
        return Err(LabError::Config("wanda pruning needs calibration norms".into()));
    }
    let mut roles = vec![TensorRole::Projection];
    if spec.include_embeddings_and_head {
        roles.extend([TensorRole::Embedding, TensorRole::OutputHead]);
    }
    ckpt.map_tensors(&roles, |name, w| match spec.method {
        PruneMethod::Magnitude => prune_magnitude(w, spec.ratio, spec.granularity()),
        PruneMethod::Random => prune_random(w, spec.ratio, crate::rng::derive_seed(spec.seed.unwrap(), name_key(name))),
        PruneMethod::Wanda => match norms.and_then(|n| n.get(name)) {
            Some(cn) => prune_wanda(w, cn, spec.ratio),
            // The embedding table has no activation input; rank it by magnitude.
            None if ckpt.config().role_of(name) == Some(TensorRole::Embedding) => {
                prune_magnitude(w, spec.ratio, Granularity::PerRow)
            }
            None => Err(LabError::Config(format!("no calibration norms for {name:?}"))),
        },
    })
}
