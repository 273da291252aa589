//! Text pretraining and supervised ASR fine-tuning: Adam with linear warmup
//! and cosine decay, dataset mixtures, input dropout, and best-WER checkpoint
//! selection on the shifted-domain dev set.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_tokenizer::{quantize, Codebook};
use crate::error::{Error, Result};
use crate::lm_core::{
    batch_loss, generate_ckpt, loss_and_grads, DecodeConfig, DecodeMode, Params, PolicyCheckpoint,
};
use crate::metrics::corpus_wer;
use crate::rng::{mix_index, mix_tag, rng_from};
use crate::synth_data::{Domain, Severity, UtteranceRecord};
use crate::token_bridge::{encode_example, EncodedExample, TextTokenizer, VocabMap, BOS, EOS};

/// Optimizer and schedule knobs.
///
/// The learning rate defaults to the toy value 3e-4; the paper's 5e-6 assumes
/// a pretrained 2B model and stays selectable through config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub input_dropout: f32,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            warmup_steps: 30,
            total_steps: 600,
            final_lr_fraction: 0.1,
            batch_size: 16,
            input_dropout: 5e-2,
            eval_every: 150,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Argument("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Argument("input_dropout must be in [0, 1)".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Argument("warmup_steps > total_steps".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return Err(Error::Argument("zero-sized training knob".into()));
        }
        Ok(())
    }

    /// Linear warmup to `learning_rate`, then cosine decay to
    /// `final_lr_fraction * learning_rate` at `total_steps`. The values at
    /// steps 0, warmup and total are exact.
    pub fn lr_at(&self, step: usize) -> f64 {
        let lr = self.learning_rate;
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return lr * step as f64 / self.warmup_steps as f64;
        }
        if step == self.warmup_steps {
            return lr;
        }
        let final_lr = self.final_lr_fraction * lr;
        if step >= self.total_steps || self.total_steps <= self.warmup_steps {
            return final_lr;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        final_lr + (lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with bias correction; state mirrors the parameter tensors.
pub struct AdamState {
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(template: &Params<f32>) -> Self {
        let zeros: Vec<Array2<f32>> = template
            .tensors()
            .into_iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.adam_beta1 as f32;
        let b2 = cfg.adam_beta2 as f32;
        let eps = cfg.adam_eps as f32;
        let correction =
            lr * (1.0 - cfg.adam_beta2.powi(self.t as i32)).sqrt() / (1.0 - cfg.adam_beta1.powi(self.t as i32));
        let lr_t = correction as f32;
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// One encoded utterance with its evaluation metadata.
#[derive(Debug, Clone)]
pub struct EncodedItem {
    pub utt_id: String,
    pub transcript: String,
    pub domain: Domain,
    pub severity: Severity,
    pub speaker_id: String,
    pub example: EncodedExample,
}

/// A dataset quantized against one codebook and encoded under one vocab map.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub items: Vec<EncodedItem>,
    pub vocab_map_fingerprint: u64,
    pub codebook_fingerprint: u64,
}

/// Quantize and encode a record set for training or evaluation.
pub fn prepare_dataset(
    records: &[UtteranceRecord],
    codebook: &Codebook,
    vocab_map: &VocabMap,
    tokenizer: &TextTokenizer,
) -> Result<EncodedDataset> {
    if records.is_empty() {
        return Err(Error::Data("cannot encode an empty record set".into()));
    }
    let items = records
        .iter()
        .map(|r| {
            let audio_ids = quantize(codebook, &r.embedding)?;
            let transcript_ids = tokenizer.encode_transcript(&r.transcript)?;
            let example = encode_example(vocab_map, &audio_ids, &transcript_ids)?;
            Ok(EncodedItem {
                utt_id: r.utt_id.clone(),
                transcript: r.transcript.clone(),
                domain: r.domain,
                severity: r.severity,
                speaker_id: r.speaker_id.clone(),
                example,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedDataset {
        items,
        vocab_map_fingerprint: vocab_map.fingerprint(),
        codebook_fingerprint: codebook.train_fingerprint,
    })
}

/// Weighted mixture over encoded datasets; weights normalize to 1.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub components: Vec<(EncodedDataset, f64)>,
}

impl MixtureSpec {
    pub fn new(components: Vec<(EncodedDataset, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Argument("mixture needs >= 1 component".into()));
        }
        if components.iter().any(|(d, _)| d.items.is_empty()) {
            return Err(Error::Data("mixture component has no examples".into()));
        }
        if components.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Argument("mixture weights must be finite and >= 0".into()));
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::Argument("mixture weights sum to zero".into()));
        }
        let components = components
            .into_iter()
            .map(|(d, w)| (d, w / total))
            .collect();
        Ok(MixtureSpec { components })
    }

    fn fingerprints(&self) -> (u64, u64) {
        let (d, _) = &self.components[0];
        (d.vocab_map_fingerprint, d.codebook_fingerprint)
    }

    fn check_consistent(&self) -> Result<()> {
        let (vfp, cfp) = self.fingerprints();
        for (d, _) in &self.components {
            if d.vocab_map_fingerprint != vfp || d.codebook_fingerprint != cfp {
                return Err(Error::Compatibility(
                    "mixture components built against different artifacts".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Deterministic (component, index) draws for one step.
///
/// Component choice is i.i.d. under the mixture weights from a per-step
/// stream; within a component, draws walk a per-step shuffled permutation so
/// a step never repeats an example unless the component is exhausted.
pub fn sample_mixture_indices(
    spec: &MixtureSpec,
    batch_size: usize,
    step: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = rng_from(mix_index(mix_tag(seed, "mixture"), step as u64));
    let mut cursors = vec![0usize; spec.components.len()];
    let mut perms: Vec<Vec<usize>> = spec
        .components
        .iter()
        .map(|(d, _)| (0..d.items.len()).collect())
        .collect();
    for (c, perm) in perms.iter_mut().enumerate() {
        let mut prng = rng_from(mix_index(
            mix_tag(seed, "mixture-perm"),
            (step as u64) << 8 | c as u64,
        ));
        for i in (1..perm.len()).rev() {
            let j = prng.gen_range(0..=i);
            perm.swap(i, j);
        }
    }

    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let dart: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = spec.components.len() - 1;
        for (c, (_, w)) in spec.components.iter().enumerate() {
            acc += w;
            if dart < acc {
                comp = c;
                break;
            }
        }
        let n = spec.components[comp].0.items.len();
        let idx = perms[comp][cursors[comp] % n];
        cursors[comp] += 1;
        if cursors[comp] % n == 0 {
            // exhausted within this step: reshuffle for the next epoch
            let epoch = cursors[comp] / n;
            let mut prng = rng_from(mix_index(
                mix_tag(seed, "mixture-perm"),
                (step as u64) << 8 | (comp as u64) | (epoch as u64) << 32,
            ));
            let perm = &mut perms[comp];
            for i in (1..perm.len()).rev() {
                let j = prng.gen_range(0..=i);
                perm.swap(i, j);
            }
        }
        out.push((comp, idx));
    }
    out
}

/// Materialize one mixture batch.
pub fn sample_mixture_batch(
    spec: &MixtureSpec,
    batch_size: usize,
    step: usize,
    seed: u64,
) -> Vec<EncodedExample> {
    sample_mixture_indices(spec, batch_size, step, seed)
        .into_iter()
        .map(|(c, i)| spec.components[c].0.items[i].example.clone())
        .collect()
}

/// Encode a plain text sentence as a next-token LM example.
pub fn encode_lm_sentence(
    tokenizer: &TextTokenizer,
    sentence: &str,
    max_seq_len: usize,
) -> Result<EncodedExample> {
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer.encode_transcript(sentence)?);
    tokens.push(EOS);
    tokens.truncate(max_seq_len);
    let mut loss_mask = vec![true; tokens.len()];
    loss_mask[0] = false;
    Ok(EncodedExample { tokens, loss_mask })
}

/// Next-token language-model training on a text corpus.
///
/// Returns the updated checkpoint and the per-step loss curve.
pub fn pretrain_text(
    ckpt: &PolicyCheckpoint,
    sentences: &[String],
    tokenizer: &TextTokenizer,
    cfg: &TrainConfig,
) -> Result<(PolicyCheckpoint, Vec<f64>)> {
    cfg.validate()?;
    if sentences.is_empty() {
        return Err(Error::Argument("empty pretraining corpus".into()));
    }
    let examples: Vec<EncodedExample> = sentences
        .iter()
        .map(|s| encode_lm_sentence(tokenizer, s, ckpt.config.max_seq_len))
        .collect::<Result<Vec<_>>>()?;

    let mut out = ckpt.clone();
    let mut adam = AdamState::new(&out.params);
    let mut curve = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let idxs = sample_flat_indices(examples.len(), cfg.batch_size, step, cfg.seed);
        let batch: Vec<EncodedExample> = idxs.iter().map(|&i| examples[i].clone()).collect();
        let (loss, grads) = loss_and_grads(
            &out.config,
            &out.params,
            &batch,
            cfg.input_dropout > 0.0,
            mix_index(mix_tag(cfg.seed, "dropout"), step as u64),
        )?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("pretrain loss {loss}"),
            });
        }
        adam.step(&mut out.params, &grads, cfg.lr_at(step), cfg);
        curve.push(loss);
        out.step += 1;
    }
    Ok((out, curve))
}

/// Uniform per-step sampling without within-step repeats (single component).
fn sample_flat_indices(n: usize, batch_size: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut prng = rng_from(mix_index(mix_tag(seed, "flat-perm"), step as u64));
    for i in (1..perm.len()).rev() {
        let j = prng.gen_range(0..=i);
        perm.swap(i, j);
    }
    (0..batch_size).map(|i| perm[i % n]).collect()
}

/// One row of the SFT training curve.
#[derive(Debug, Clone, Serialize)]
pub struct SftCurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_clean_loss: f64,
    pub dev_shifted_loss: f64,
    pub dev_clean_wer: f64,
    pub dev_shifted_wer: f64,
}

/// SFT output: the best checkpoint by shifted-dev WER plus the full curves.
pub struct SftOutput {
    pub best: PolicyCheckpoint,
    pub best_step: usize,
    pub best_wer: f64,
    pub curves: Vec<SftCurveRow>,
}

/// Greedy-decode every item of a dataset; returns (reference, hypothesis).
pub fn decode_dataset(
    ckpt: &PolicyCheckpoint,
    dataset: &EncodedDataset,
    tokenizer: &TextTokenizer,
    max_new_tokens: usize,
) -> Result<Vec<(String, String)>> {
    let decode = DecodeConfig {
        mode: DecodeMode::Greedy,
        max_new_tokens,
        seed: 0,
        forbid_audio_ids: true,
    };
    dataset
        .items
        .iter()
        .map(|item| {
            let out = generate_ckpt(ckpt, item.example.prompt(), &decode)?;
            let text_ids: Vec<u32> = out.ids.iter().copied().filter(|&t| t != EOS).collect();
            Ok((item.transcript.clone(), tokenizer.decode(&text_ids)))
        })
        .collect()
}

/// Corpus WER of a checkpoint on a dataset.
pub fn dataset_wer(
    ckpt: &PolicyCheckpoint,
    dataset: &EncodedDataset,
    tokenizer: &TextTokenizer,
) -> Result<f64> {
    let pairs = decode_dataset(ckpt, dataset, tokenizer, 24)?;
    corpus_wer(pairs.iter().map(|(r, h)| (r.as_str(), h.as_str())))
}

fn dataset_loss(ckpt: &PolicyCheckpoint, dataset: &EncodedDataset) -> Result<f64> {
    let batch: Vec<EncodedExample> = dataset.items.iter().map(|i| i.example.clone()).collect();
    batch_loss(&ckpt.config, &ckpt.params, &batch)
}

/// First index of the minimum (ties keep the earlier entry); the selection
/// rule `sft` applies to its WER series.
#[cfg(test)]
pub(crate) fn argmin_first(series: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in series.iter().enumerate() {
        if x < series[best] {
            best = i;
        }
    }
    best
}

/// Supervised fine-tuning on a dataset mixture.
///
/// Every `eval_every` steps the dev sets are greedy-decoded; the checkpoint
/// with the lowest shifted-dev WER is retained (ties keep the earlier step).
pub fn sft(
    ckpt: &PolicyCheckpoint,
    mixture: &MixtureSpec,
    cfg: &TrainConfig,
    tokenizer: &TextTokenizer,
    dev_clean: &EncodedDataset,
    dev_shifted: &EncodedDataset,
) -> Result<SftOutput> {
    cfg.validate()?;
    mixture.check_consistent()?;
    let (vfp, cfp) = mixture.fingerprints();
    for d in [dev_clean, dev_shifted] {
        if d.vocab_map_fingerprint != vfp || d.codebook_fingerprint != cfp {
            return Err(Error::Compatibility(
                "dev sets built against different artifacts than the mixture".into(),
            ));
        }
    }
    let mut model = ckpt.clone();
    model.check_compatible(vfp, cfp)?;

    let mut adam = AdamState::new(&model.params);
    let mut curves = Vec::new();
    let mut best: Option<(f64, usize, PolicyCheckpoint)> = None;
    let mut train_loss_acc = 0.0;
    let mut train_loss_n = 0usize;

    for step in 0..cfg.total_steps {
        let batch = sample_mixture_batch(mixture, cfg.batch_size, step, cfg.seed);
        let (loss, grads) = loss_and_grads(
            &model.config,
            &model.params,
            &batch,
            cfg.input_dropout > 0.0,
            mix_index(mix_tag(cfg.seed, "sft-dropout"), step as u64),
        )?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("sft loss {loss}"),
            });
        }
        adam.step(&mut model.params, &grads, cfg.lr_at(step), cfg);
        model.step += 1;
        train_loss_acc += loss;
        train_loss_n += 1;

        let is_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps;
        if is_eval {
            let dev_clean_loss = dataset_loss(&model, dev_clean)?;
            let dev_shifted_loss = dataset_loss(&model, dev_shifted)?;
            let dev_clean_wer = dataset_wer(&model, dev_clean, tokenizer)?;
            let dev_shifted_wer = dataset_wer(&model, dev_shifted, tokenizer)?;
            curves.push(SftCurveRow {
                step: step + 1,
                train_loss: train_loss_acc / train_loss_n as f64,
                dev_clean_loss,
                dev_shifted_loss,
                dev_clean_wer,
                dev_shifted_wer,
            });
            train_loss_acc = 0.0;
            train_loss_n = 0;
            let better = match &best {
                None => true,
                Some((w, _, _)) => dev_shifted_wer < *w,
            };
            if better {
                best = Some((dev_shifted_wer, step + 1, model.clone()));
            }
        }
    }

    let (best_wer, best_step, best) = best.expect("at least one eval ran");
    Ok(SftOutput {
        best,
        best_step,
        best_wer,
        curves,
    })
}

/// Curves CSV: step,train_loss,dev_clean_loss,dev_shifted_loss,dev_clean_wer,dev_shifted_wer
pub fn write_sft_curves(path: &Path, rows: &[SftCurveRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "step,train_loss,dev_clean_loss,dev_shifted_loss,dev_clean_wer,dev_shifted_wer"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.train_loss, r.dev_clean_loss, r.dev_shifted_loss, r.dev_clean_wer, r.dev_shifted_wer
        )?;
    }
    Ok(())
}
