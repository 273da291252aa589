//! Toy decoder-only transformer with multi-query attention: seeded init,
//! cached forward, analytic gradients, autoregressive decoding, and a binary
//! checkpoint container tied to the vocab map and codebook by fingerprints.

mod backward;
mod checkpoint_io;
mod forward;
mod generate;
mod params;

pub use backward::{backprop, batch_loss, loss_and_grads};
pub use checkpoint_io::{load_checkpoint, save_checkpoint};
pub use forward::{forward, forward_cached, masked_log_softmax, ForwardCache};
pub use generate::{generate, score_tokens, DecodeConfig, DecodeMode, Generated};
pub use params::{init_params, param_count, scalar, LayerParams, ModelConfig, Params, Real};

use crate::error::{Error, Result};
use crate::token_bridge::VocabMap;

/// Named parameter tensors plus everything needed to use them coherently:
/// model config, the vocab map, and artifact fingerprints.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub vocab_map: Option<VocabMap>,
    pub codebook_fingerprint: Option<u64>,
    pub step: u64,
}

impl PolicyCheckpoint {
    pub fn vocab_map_fingerprint(&self) -> Option<u64> {
        self.vocab_map.as_ref().map(|m| m.fingerprint())
    }

    /// The [V-K, V) id range reserved for audio tokens, when bound.
    pub fn audio_range(&self) -> Option<(u32, u32)> {
        self.vocab_map
            .as_ref()
            .map(|m| (m.audio_start(), m.v as u32))
    }

    /// Bind the vocab map and codebook fingerprint this model was trained
    /// against. The architecture is untouched: config equality is asserted by
    /// tests downstream.
    pub fn bind_artifacts(&mut self, vocab_map: VocabMap, codebook_fingerprint: u64) -> Result<()> {
        if vocab_map.v != self.config.v {
            return Err(Error::Compatibility(format!(
                "vocab map V={} does not match model V={}",
                vocab_map.v, self.config.v
            )));
        }
        if let Some(existing) = &self.vocab_map {
            if existing != &vocab_map {
                return Err(Error::Compatibility(
                    "checkpoint already bound to a different vocab map".into(),
                ));
            }
        }
        if let Some(existing) = self.codebook_fingerprint {
            if existing != codebook_fingerprint {
                return Err(Error::Compatibility(
                    "checkpoint already bound to a different codebook".into(),
                ));
            }
        }
        self.vocab_map = Some(vocab_map);
        self.codebook_fingerprint = Some(codebook_fingerprint);
        Ok(())
    }

    /// Error unless this checkpoint is bound to exactly these artifacts.
    pub fn check_compatible(
        &self,
        vocab_map_fingerprint: u64,
        codebook_fingerprint: u64,
    ) -> Result<()> {
        match (self.vocab_map_fingerprint(), self.codebook_fingerprint) {
            (Some(v), Some(c)) if v == vocab_map_fingerprint && c == codebook_fingerprint => Ok(()),
            (None, _) | (_, None) => Err(Error::Compatibility(
                "checkpoint is not bound to a vocab map / codebook".into(),
            )),
            _ => Err(Error::Compatibility(
                "checkpoint fingerprints do not match the provided artifacts".into(),
            )),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

/// Deterministic seeded initialization; fan-in scaled Gaussians, norms at
/// identity, no artifacts bound yet.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<PolicyCheckpoint> {
    Ok(PolicyCheckpoint {
        config: config.clone(),
        params: init_params::<f32>(config, seed)?,
        vocab_map: None,
        codebook_fingerprint: None,
        step: 0,
    })
}

/// Eval-mode logits for a checkpoint.
pub fn forward_ckpt(ckpt: &PolicyCheckpoint, tokens: &[u32]) -> Result<ndarray::Array2<f32>> {
    forward(&ckpt.config, &ckpt.params, tokens)
}

/// Decode from a checkpoint, honoring its bound audio range.
pub fn generate_ckpt(
    ckpt: &PolicyCheckpoint,
    prompt: &[u32],
    decode: &DecodeConfig,
) -> Result<Generated> {
    generate(
        &ckpt.config,
        &ckpt.params,
        ckpt.audio_range(),
        prompt,
        decode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_bridge::build_vocab_map;

    fn cfg() -> ModelConfig {
        ModelConfig {
            v: 32,
            d_model: 8,
            n_layers: 1,
            n_query_heads: 2,
            head_dim: 4,
            kv_heads: 1,
            ffn_dim: 16,
            max_seq_len: 16,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn init_is_reproducible_and_unbound() {
        let a = init_model(&cfg(), 3).unwrap();
        let b = init_model(&cfg(), 3).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.vocab_map.is_none());
        assert_eq!(a.step, 0);
    }

    #[test]
    fn binding_leaves_the_architecture_untouched() {
        let mut ckpt = init_model(&cfg(), 3).unwrap();
        let config_before = ckpt.config.clone();
        let params_before = ckpt.params.clone();
        let map = build_vocab_map(32, 4, &vec![0; 32]).unwrap();
        ckpt.bind_artifacts(map.clone(), 99).unwrap();
        assert_eq!(ckpt.config, config_before);
        assert_eq!(ckpt.params, params_before);
        assert_eq!(ckpt.audio_range(), Some((28, 32)));
        // rebinding identical artifacts is fine; different ones are not
        assert!(ckpt.bind_artifacts(map, 99).is_ok());
        let other = build_vocab_map(32, 5, &vec![0; 32]).unwrap();
        assert!(ckpt.bind_artifacts(other, 99).is_err());
    }

    #[test]
    fn compatibility_gate() {
        let mut ckpt = init_model(&cfg(), 3).unwrap();
        let map = build_vocab_map(32, 4, &vec![0; 32]).unwrap();
        assert!(ckpt.check_compatible(map.fingerprint(), 99).is_err());
        ckpt.bind_artifacts(map.clone(), 99).unwrap();
        assert!(ckpt.check_compatible(map.fingerprint(), 99).is_ok());
        assert!(ckpt.check_compatible(map.fingerprint(), 98).is_err());
    }
}
