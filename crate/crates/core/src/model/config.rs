use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

fn default_rope_theta() -> f64 {
    10000.0
}

/// Hyperparameters of the LLaMA-style toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    pub max_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_ff: 384,
            vocab_size: 256,
            rope_theta: default_rope_theta(),
            max_context: 4096,
        }
    }
}

pub const RMS_EPS: f32 = 1e-5;

pub const EMBEDDING: &str = "tok_embeddings";
pub const FINAL_NORM: &str = "norm";
pub const OUTPUT_HEAD: &str = "output";

/// Role of a named tensor inside the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    NormGain,
    Projection,
    OutputHead,
}

pub fn layer_tensor(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

pub const ATTN_NORM: &str = "attention_norm";
pub const FFN_NORM: &str = "ffn_norm";
pub const WQ: &str = "attention.wq";
pub const WK: &str = "attention.wk";
pub const WV: &str = "attention.wv";
pub const WO: &str = "attention.wo";
/// SwiGLU gate projection.
pub const W1: &str = "feed_forward.w1";
/// SwiGLU down projection.
pub const W2: &str = "feed_forward.w2";
/// SwiGLU up projection.
pub const W3: &str = "feed_forward.w3";

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(LabError::Config("vocab_size must be at least 2".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(LabError::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(LabError::Config(format!(
                "d_head {} must be even for rotary embeddings",
                self.d_head
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(LabError::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Every tensor the decoder needs, with its exact shape, in a fixed order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>, TensorRole)> {
        let d = self.d_model;
        let mut specs = vec![(
            EMBEDDING.to_string(),
            vec![self.vocab_size, d],
            TensorRole::Embedding,
        )];
        for l in 0..self.n_layers {
            specs.push((layer_tensor(l, ATTN_NORM), vec![d], TensorRole::NormGain));
            for w in [WQ, WK, WV, WO] {
                specs.push((layer_tensor(l, w), vec![d, d], TensorRole::Projection));
            }
            specs.push((layer_tensor(l, FFN_NORM), vec![d], TensorRole::NormGain));
            specs.push((layer_tensor(l, W1), vec![self.d_ff, d], TensorRole::Projection));
            specs.push((layer_tensor(l, W3), vec![self.d_ff, d], TensorRole::Projection));
            specs.push((layer_tensor(l, W2), vec![d, self.d_ff], TensorRole::Projection));
        }
        specs.push((FINAL_NORM.to_string(), vec![d], TensorRole::NormGain));
        specs.push((
            OUTPUT_HEAD.to_string(),
            vec![self.vocab_size, d],
            TensorRole::OutputHead,
        ));
        specs
    }

    pub fn role_of(&self, name: &str) -> Option<TensorRole> {
        self.tensor_specs()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, r)| r)
    }
}
