//! Deterministic toy-model generator.
//!
//! Each tensor draws from its own xoshiro256** stream keyed by
//! `(seed, FNV-1a(name))`, so adding or reordering tensors never perturbs the
//! others. Matrices get `N(0, init_std²)` entries via `rand_distr::StandardNormal`;
//! norm gains are ones. A fraction of every projection matrix is then scaled
//! by `outlier_scale` to give the heavy-tailed magnitude profile that salient
//! weight experiments need.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, TensorRole};
use crate::rng::{name_key, stream_rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelOptions {
    pub init_std: f64,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
}

impl Default for ToyModelOptions {
    fn default() -> Self {
        ToyModelOptions {
            init_std: 0.02,
            outlier_fraction: 0.005,
            outlier_scale: 20.0,
        }
    }
}

pub fn gen_toy_model(config: &ModelConfig, seed: u64) -> Checkpoint {
    gen_toy_model_with(config, seed, &ToyModelOptions::default())
}

/// # Panics
/// If `config` fails validation.
pub fn gen_toy_model_with(config: &ModelConfig, seed: u64, opts: &ToyModelOptions) -> Checkpoint {
    config.validate().expect("gen_toy_model needs a valid config");
    let mut tensors = BTreeMap::new();
    for (name, shape, role) in config.tensor_specs() {
        let numel: usize = shape.iter().product();
        let data = match role {
            TensorRole::NormGain => vec![1.0f32; numel],
            _ => {
                let mut rng = stream_rng(seed, name_key(&name));
                let mut data: Vec<f32> = (0..numel)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal) * opts.init_std) as f32)
                    .collect();
                if role == TensorRole::Projection && opts.outlier_fraction > 0.0 {
                    let count = ((opts.outlier_fraction * numel as f64).round() as usize).min(numel);
                    let mut idx: Vec<usize> = (0..numel).collect();
                    let (chosen, _) = idx.partial_shuffle(&mut rng, count);
                    for &i in chosen.iter() {
                        data[i] = (f64::from(data[i]) * opts.outlier_scale) as f32;
                    }
                }
                data
            }
        };
        tensors.insert(name, Tensor::from_parts(shape, data));
    }
    Checkpoint::new(config.clone(), tensors).expect("generated tensors match config")
}
