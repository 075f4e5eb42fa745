//! Toy LLaMA-style decoder: configuration, checkpoint container and file
//! format, deterministic generator, byte tokenizer and forward pass.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod generate;
pub mod tokens;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, TensorRole};
pub use forward::{forward, ActivationObserver, ActivationTransform, ForwardOptions, PreparedModel};
pub use generate::{gen_toy_model, gen_toy_model_with, ToyModelOptions};
pub use tokens::{load_token_file, parse_token_lines, tokenize_bytes, TokenSequence};
