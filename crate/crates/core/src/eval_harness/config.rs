//! Experiment configuration: a TOML file with defaults for every knob, so a
//! minimal config (or none at all) runs the full desk-scale pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint_bytes;
use crate::lm_core::ModelConfig;
use crate::metrics::MpTrainConfig;
use crate::rlhf_ppo::{MpSource, PpoConfig};
use crate::synth_data::CorpusSpec;
use crate::train_sft::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataStageConfig {
    pub num_words: usize,
    pub num_synonym_sets: usize,
    pub dim: usize,
    pub frames_per_word: (usize, usize),
    pub corpus: CorpusSpec,
    /// Sentences of the text pretraining corpus.
    pub text_sentences: usize,
    pub text_len: (usize, usize),
}

impl Default for DataStageConfig {
    fn default() -> Self {
        DataStageConfig {
            num_words: 50,
            num_synonym_sets: 10,
            dim: 16,
            frames_per_word: (2, 4),
            corpus: CorpusSpec::default(),
            text_sentences: 1500,
            text_len: (2, 8),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookStageConfig {
    pub k: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for CodebookStageConfig {
    fn default() -> Self {
        CodebookStageConfig {
            k: 64,
            max_iters: 30,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainStageConfig {
    pub train: TrainConfig,
}

impl Default for PretrainStageConfig {
    fn default() -> Self {
        PretrainStageConfig {
            train: TrainConfig {
                learning_rate: 1e-3,
                warmup_steps: 15,
                total_steps: 150,
                eval_every: 50,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SftStageConfig {
    pub train: TrainConfig,
    /// Shifted-domain weight of the mixture (0.3 mirrors the 30:70 mix).
    pub shifted_weight: f64,
    /// Also train a clean-only baseline for the mixture comparison.
    pub run_clean_only: bool,
    /// Also continue SFT on shifted-only data from the mixture baseline.
    pub run_continued_sft: bool,
    pub continued: TrainConfig,
}

impl Default for SftStageConfig {
    fn default() -> Self {
        SftStageConfig {
            train: TrainConfig {
                total_steps: 2400,
                warmup_steps: 80,
                eval_every: 300,
                ..Default::default()
            },
            shifted_weight: 0.3,
            run_clean_only: true,
            run_continued_sft: true,
            continued: TrainConfig {
                total_steps: 800,
                warmup_steps: 30,
                eval_every: 200,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpStageConfig {
    pub num_pairs: usize,
    pub train: MpTrainConfig,
}

impl Default for MpStageConfig {
    fn default() -> Self {
        MpStageConfig {
            num_pairs: 2000,
            train: MpTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlhfStageConfig {
    pub gammas: Vec<f64>,
    pub wer_clamp_delta: f64,
    pub mp_source: MpSource,
    pub ppo: PpoConfig,
}

impl Default for RlhfStageConfig {
    fn default() -> Self {
        RlhfStageConfig {
            gammas: vec![0.0, 0.25, 0.5, 1.0],
            wer_clamp_delta: 1e-3,
            mp_source: MpSource::LearnedModel,
            ppo: PpoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStageConfig {
    /// Manifest names to evaluate every trained model on.
    pub splits: Vec<String>,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig {
            splits: vec!["disordered_dev".into()],
        }
    }
}

/// The whole experiment, stage by stage.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub data: DataStageConfig,
    pub codebook: CodebookStageConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainStageConfig,
    pub sft: SftStageConfig,
    pub mp: MpStageConfig,
    pub rlhf: RlhfStageConfig,
    pub eval: EvalStageConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.pretrain
            .train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.sft
            .train
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.rlhf
            .ppo
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.sft.shifted_weight) {
            return Err(Error::Config("sft.shifted_weight must be in [0, 1]".into()));
        }
        if self.rlhf.gammas.is_empty() {
            return Err(Error::Config("rlhf.gammas must not be empty".into()));
        }
        Ok(())
    }

    /// With the seed override applied everywhere a stage derives streams.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.data.corpus.seed = s;
            self.pretrain.train.seed = s ^ 0x1;
            self.sft.train.seed = s ^ 0x2;
            self.sft.continued.seed = s ^ 0x3;
            self.mp.train.seed = s ^ 0x4;
            self.rlhf.ppo.seed = s ^ 0x5;
        }
        self
    }

    /// Stable hash over the serialized config.
    pub fn hash(&self) -> u64 {
        fingerprint_bytes(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn seed_override_propagates() {
        let cfg = ExperimentConfig::default().with_seed(Some(99));
        assert_eq!(cfg.data.corpus.seed, 99);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            "seed = 5\n[codebook]\nk = 16\n[sft]\nshifted_weight = 0.5\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, Some(5));
        assert_eq!(cfg.codebook.k, 16);
        assert!((cfg.sft.shifted_weight - 0.5).abs() < 1e-12);
        assert_eq!(cfg.data.num_words, 50); // default intact
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[rlhf]\ngammas = []\n").unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path),
            Err(Error::Config(_))
        ));
    }
}
