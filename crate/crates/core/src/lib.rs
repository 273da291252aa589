//! Desk-scale laboratory for speech recognition with a text-only decoder LLM.
//!
//! The pipeline: synthetic speech embeddings are quantized against a k-means
//! codebook, the resulting audio-token ids are remapped onto the least-frequent
//! tail of the text vocabulary, a small decoder-only transformer (multi-query
//! attention, analytic gradients) is fine-tuned on (audio tokens -> transcript)
//! pairs, and the model is then adapted to a shifted "disordered" speech domain
//! with PPO on a composite WER + meaning-preservation reward.

pub mod audio_tokenizer;
pub mod error;
pub mod eval_harness;
pub mod fingerprint;
pub mod lm_core;
pub mod metrics;
pub mod rlhf_ppo;
pub mod rng;
pub mod synth_data;
pub mod token_bridge;
pub mod train_sft;

pub use error::{Error, Result};
