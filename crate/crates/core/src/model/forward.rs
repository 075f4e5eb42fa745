//! Teacher-forced forward pass of the LLaMA-style decoder.
//!
//! Per layer: `x += Wo·attn(rope(Wq·n(x)), rope(Wk·n(x)), Wv·n(x))` then
//! `x += W2·(silu(W1·n(x)) ⊙ W3·n(x))`, with `n` = RMSNorm, followed by a final
//! RMSNorm and the output head. Every per-row computation only reads rows at
//! or before its own position, so a prefix produces bit-identical logits to the
//! corresponding rows of a longer run.

use super::checkpoint::Checkpoint;
use super::config::{self, ModelConfig, RMS_EPS};
use super::tokens::TokenSequence;
use crate::error::{LabError, Result};
use crate::quant::quantize_activations_per_token;
use crate::tensor::{matmul_slices, rms_norm_rows, softmax_in_place, RopeTable, Tensor};

/// Sees the input of every linear layer before it is multiplied.
///
/// `consumers` names the weight matrices that read this input (q/k/v share
/// one input, as do the two SwiGLU input projections). Implementations must be
/// reentrant: one observer may serve concurrent forward passes.
pub trait ActivationObserver: Sync {
    fn observe(&self, consumers: &[String], input: &Tensor);
}

/// Rewrites the input of every attention/feed-forward projection.
pub trait ActivationTransform: Sync {
    fn transform(&self, input: &Tensor) -> Tensor;
}

impl<F> ActivationTransform for F
where
    F: Fn(&Tensor) -> Tensor + Sync,
{
    fn transform(&self, input: &Tensor) -> Tensor {
        self(input)
    }
}

#[derive(Default, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub observer: Option<&'a dyn ActivationObserver>,
    /// Overrides the checkpoint's own activation quantization when set.
    pub transform: Option<&'a dyn ActivationTransform>,
}

struct Linear {
    consumers: Vec<String>,
    /// Weights transposed to `[in × out]`, one block per consumer.
    weights_t: Vec<Vec<f32>>,
    d_in: usize,
    d_out: Vec<usize>,
}

impl Linear {
    fn new(ckpt: &Checkpoint, names: &[String]) -> Result<Self> {
        let mut weights_t = Vec::new();
        let mut d_out = Vec::new();
        let mut d_in = None;
        for name in names {
            let w = ckpt.tensor(name)?;
            let (o, i) = w.dims2()?;
            if d_in.is_some_and(|d| d != i) {
                return Err(LabError::Checkpoint(format!("{name:?} input width mismatch")));
            }
            d_in = Some(i);
            d_out.push(o);
            weights_t.push(w.transpose()?.into_data());
        }
        Ok(Linear {
            consumers: names.to_vec(),
            weights_t,
            d_in: d_in.unwrap_or(0),
            d_out,
        })
    }

    /// Applies every consumer matrix to `x[t × in]`, after observation and
    /// optional transformation of the shared input.
    fn apply(&self, x: &Tensor, hooks: &Hooks<'_>, transform: bool) -> Vec<Tensor> {
        if let Some(obs) = hooks.observer {
            obs.observe(&self.consumers, x);
        }
        let transformed;
        let input = match hooks.transform {
            Some(tf) if transform => {
                transformed = tf.transform(x);
                &transformed
            }
            _ => x,
        };
        let t = input.shape()[0];
        self.weights_t
            .iter()
            .zip(&self.d_out)
            .map(|(w, &o)| {
                let mut out = vec![0.0f32; t * o];
                matmul_slices(input.data(), w, &mut out, t, self.d_in, o);
                Tensor::from_parts(vec![t, o], out)
            })
            .collect()
    }
}

struct Layer {
    attn_norm: Tensor,
    ffn_norm: Tensor,
    qkv: Linear,
    wo: Linear,
    gate_up: Linear,
    down: Linear,
}

struct Hooks<'a> {
    observer: Option<&'a dyn ActivationObserver>,
    transform: Option<&'a dyn ActivationTransform>,
}

/// Checkpoint with weights laid out for the forward kernels. Reusable across
/// many sequences and safe to share between threads.
pub struct PreparedModel {
    config: ModelConfig,
    embedding: Tensor,
    layers: Vec<Layer>,
    final_norm: Tensor,
    head: Linear,
    activation_bits: Option<u8>,
}

impl PreparedModel {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config().clone();
        let names = |l: usize, s: &[&str]| -> Vec<String> {
            s.iter().map(|w| config::layer_tensor(l, w)).collect()
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(Layer {
                attn_norm: ckpt.tensor(&config::layer_tensor(l, config::ATTN_NORM))?.clone(),
                ffn_norm: ckpt.tensor(&config::layer_tensor(l, config::FFN_NORM))?.clone(),
                qkv: Linear::new(ckpt, &names(l, &[config::WQ, config::WK, config::WV]))?,
                wo: Linear::new(ckpt, &names(l, &[config::WO]))?,
                gate_up: Linear::new(ckpt, &names(l, &[config::W1, config::W3]))?,
                down: Linear::new(ckpt, &names(l, &[config::W2]))?,
            });
        }
        Ok(PreparedModel {
            embedding: ckpt.tensor(config::EMBEDDING)?.clone(),
            final_norm: ckpt.tensor(config::FINAL_NORM)?.clone(),
            head: Linear::new(ckpt, &[config::OUTPUT_HEAD.to_string()])?,
            layers,
            activation_bits: ckpt.activation_bits(),
            config: cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Pre-softmax logits `[t × vocab_size]` for every position.
    pub fn forward(&self, tokens: &TokenSequence, opts: ForwardOptions<'_>) -> Result<Tensor> {
        self.run(tokens, opts, None)
    }

    /// Logits for the listed positions only, one output row per entry of
    /// `rows`. Each row is bit-identical to the same row of [`Self::forward`];
    /// the final layer skips the positions nobody reads.
    pub fn forward_rows(&self, tokens: &TokenSequence, rows: &[usize], opts: ForwardOptions<'_>) -> Result<Tensor> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(LabError::Input(format!(
                "row {bad} requested from a {}-token sequence",
                tokens.len()
            )));
        }
        self.run(tokens, opts, Some(rows))
    }

    fn run(&self, tokens: &TokenSequence, opts: ForwardOptions<'_>, rows: Option<&[usize]>) -> Result<Tensor> {
        let cfg = &self.config;
        let t = tokens.len();
        if t > cfg.max_context {
            return Err(LabError::ContextLength {
                len: t,
                max: cfg.max_context,
            });
        }
        let d = cfg.d_model;
        let mut x = vec![0.0f32; t * d];
        for (row, &id) in x.chunks_mut(d).zip(tokens.ids()) {
            if id as usize >= cfg.vocab_size {
                return Err(LabError::Input(format!(
                    "token id {id} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            row.copy_from_slice(self.embedding.row(id as usize));
        }
        let mut x = Tensor::from_parts(vec![t, d], x);

        let act_quant = self
            .activation_bits
            .map(|bits| move |a: &Tensor| quantize_activations_per_token(a, bits));
        let hooks = Hooks {
            observer: opts.observer,
            transform: opts
                .transform
                .or(act_quant.as_ref().map(|f| f as &dyn ActivationTransform)),
        };

        let positions: Vec<usize> = (0..t).collect();
        let rope = RopeTable::new(&positions, cfg.d_head, cfg.rope_theta)?;

        for (l, layer) in self.layers.iter().enumerate() {
            let queries = match rows {
                Some(r) if l + 1 == self.layers.len() => r,
                _ => &positions,
            };
            let h = rms_norm_rows(&x, &layer.attn_norm, RMS_EPS)?;
            let qkv = layer.qkv.apply(&h, &hooks, true);
            let attn = self.attention(&qkv[0], &qkv[1], &qkv[2], &rope, queries);
            if queries.len() != t {
                x = select_rows(&x, queries);
            }
            let o = layer.wo.apply(&attn, &hooks, true);
            add_in_place(&mut x, &o[0]);

            let h = rms_norm_rows(&x, &layer.ffn_norm, RMS_EPS)?;
            let gu = layer.gate_up.apply(&h, &hooks, true);
            let mut act = gu[0].clone();
            for (g, &u) in act.data_mut().iter_mut().zip(gu[1].data()) {
                *g = *g / (1.0 + (-*g).exp()) * u;
            }
            let down = layer.down.apply(&act, &hooks, true);
            add_in_place(&mut x, &down[0]);
        }
        let h = rms_norm_rows(&x, &self.final_norm, RMS_EPS)?;
        let mut logits = self.head.apply(&h, &hooks, false);
        Ok(logits.remove(0))
    }

    /// Causal multi-head attention with rotary embeddings.
    /// Only the rows listed in `queries` are produced, in that order.
    fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, rope: &RopeTable, queries: &[usize]) -> Tensor {
        let cfg = &self.config;
        let (t, d, dh) = (q.shape()[0], cfg.d_model, cfg.d_head);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0f32; queries.len() * d];
        let mut qh = vec![0.0f32; t * dh];
        let mut kp = vec![0.0f32; t.div_ceil(LANES) * dh * LANES];
        let mut vh = vec![0.0f32; t * dh];
        let mut krow = vec![0.0f32; dh];
        let mut scores = vec![0.0f32; t.div_ceil(LANES) * LANES];

        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t {
                let qrow = &mut qh[i * dh..(i + 1) * dh];
                qrow.copy_from_slice(&q.row(i)[cols.clone()]);
                rope.rotate(i, qrow);
                qrow.iter_mut().for_each(|v| *v *= scale);

                krow.copy_from_slice(&k.row(i)[cols.clone()]);
                rope.rotate(i, &mut krow);
                let panel = (i / LANES) * dh * LANES;
                for (dd, &kv) in krow.iter().enumerate() {
                    kp[panel + dd * LANES + i % LANES] = kv;
                }
                vh[i * dh..(i + 1) * dh].copy_from_slice(&v.row(i)[cols.clone()]);
            }
            for (r, &i) in queries.iter().enumerate() {
                accumulate_scores(&mut scores, &qh[i * dh..(i + 1) * dh], &kp, i + 1);
                let s = &mut scores[..=i];
                softmax_in_place(s);
                let orow = &mut out[r * d + head * dh..r * d + (head + 1) * dh];
                accumulate_values(orow, s, &vh);
            }
        }
        Tensor::from_parts(vec![queries.len(), d], out)
    }
}

const LANES: usize = 8;

/// `s[j] = Σ_d q[d] · k_j[d]` for `j < n`, summing over `d` in increasing
/// order. Keys are packed in panels of `LANES` positions:
/// `kp[(j / LANES)·dh·LANES + d·LANES + j % LANES]`. Lanes past `n` in the last
/// panel are computed into scratch and never read.
fn accumulate_scores(s: &mut [f32], q: &[f32], kp: &[f32], n: usize) {
    let dh = q.len();
    for b in 0..n.div_ceil(LANES) {
        let panel = &kp[b * dh * LANES..(b + 1) * dh * LANES];
        let mut acc = [0.0f32; LANES];
        for (row, &qd) in panel.chunks_exact(LANES).zip(q) {
            let row: &[f32; LANES] = row.try_into().unwrap();
            for l in 0..LANES {
                acc[l] += qd * row[l];
            }
        }
        s[b * LANES..(b + 1) * LANES].copy_from_slice(&acc);
    }
}

/// `out[e] = Σ_j p[j] · v[j·dh + e]`, summing over `j` in increasing order.
fn accumulate_values(out: &mut [f32], p: &[f32], v: &[f32]) {
    let dh = out.len();
    let mut c = 0;
    while c + LANES <= dh {
        let mut acc = [0.0f32; LANES];
        for (vr, &pj) in v.chunks_exact(dh).zip(p) {
            let vr: &[f32; LANES] = vr[c..c + LANES].try_into().unwrap();
            for l in 0..LANES {
                acc[l] += pj * vr[l];
            }
        }
        out[c..c + LANES].copy_from_slice(&acc);
        c += LANES;
    }
    for e in c..dh {
        let mut acc = 0.0f32;
        for (j, &pj) in p.iter().enumerate() {
            acc += pj * v[j * dh + e];
        }
        out[e] = acc;
    }
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::from_parts(vec![rows.len(), d], out)
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// One-shot forward pass; prefer [`PreparedModel`] when running many sequences.
pub fn forward(ckpt: &Checkpoint, tokens: &TokenSequence, opts: ForwardOptions<'_>) -> Result<Tensor> {
    PreparedModel::new(ckpt)?.forward(tokens, opts)
}
