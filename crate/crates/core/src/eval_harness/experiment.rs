//! Stage pipeline: gen-data -> codebook -> pretrain -> sft -> train-mp ->
//! rlhf -> eval. Every stage reads its prerequisites from the artifact
//! directory and writes files back, so runs resume from whatever exists.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio_tokenizer::{collect_frames, read_codebook, train_codebook, write_codebook, quantize};
use crate::error::{Error, Result};
use crate::fingerprint::{fingerprint_file, to_hex};
use crate::lm_core::{init_model, PolicyCheckpoint};
use crate::metrics::{gen_mp_pairs, read_mp_pairs, train_mp_model, write_mp_pairs, MpModel};
use crate::rlhf_ppo::{rlhf_train, write_rlhf_curves, RewardConfig, RewardContext};
use crate::rng::mix_tag;
use crate::synth_data::{
    build_lexicon, gen_corpus, gen_text_corpus, load_manifest, Lexicon,
};
use crate::token_bridge::{build_vocab_map, count_token_freqs, TextTokenizer, VocabMap};
use crate::train_sft::{
    prepare_dataset, pretrain_text, sft, write_sft_curves, EncodedDataset, MixtureSpec,
};

use super::config::ExperimentConfig;
use super::{evaluate, write_records_csv, write_report_csv};

/// Pipeline stages in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Codebook,
    Pretrain,
    Sft,
    TrainMp,
    Rlhf,
    Eval,
}

impl Stage {
    pub fn all() -> Vec<Stage> {
        vec![
            Stage::GenData,
            Stage::Codebook,
            Stage::Pretrain,
            Stage::Sft,
            Stage::TrainMp,
            Stage::Rlhf,
            Stage::Eval,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Codebook => "train-codebook",
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::TrainMp => "train-mp",
            Stage::Rlhf => "rlhf",
            Stage::Eval => "eval",
        }
    }
}

/// Final metrics the acceptance checks read, all parsed back from artifacts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub sft_mix_final_shifted_dev_loss: Option<f64>,
    pub sft_clean_final_shifted_dev_loss: Option<f64>,
    /// model name -> shifted-dev corpus WER (eval stage, disordered_dev).
    pub shifted_dev_wer: BTreeMap<String, f64>,
    /// model name -> shifted-dev MP%.
    pub shifted_dev_mp_pct: BTreeMap<String, f64>,
    /// model name -> shifted-dev record count.
    pub shifted_dev_n: BTreeMap<String, usize>,
    /// model name -> severity label -> MP%.
    pub severity_mp_pct: BTreeMap<String, BTreeMap<String, f64>>,
    /// model name -> severity label -> record count.
    pub severity_counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// model name -> (accuracy, spearman rho, n) of MP model vs oracle.
    pub agreement: BTreeMap<String, (f64, Option<f64>, usize)>,
}

fn missing(stage: Stage, path: &Path) -> Error {
    Error::Staging {
        stage: stage.name().into(),
        missing: path.display().to_string(),
    }
}

fn require(stage: Stage, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(missing(stage, &path))
    }
}

struct Layout {
    out: PathBuf,
}

impl Layout {
    fn data(&self) -> PathBuf {
        self.out.join("data")
    }
    fn lexicon(&self) -> PathBuf {
        self.data().join("lexicon.json")
    }
    fn manifest(&self, name: &str) -> PathBuf {
        self.data().join(format!("{name}.jsonl"))
    }
    fn text_corpus(&self) -> PathBuf {
        self.data().join("text_corpus.txt")
    }
    fn codebook(&self) -> PathBuf {
        self.out.join("codebook.kmc")
    }
    fn vocab_map(&self) -> PathBuf {
        self.out.join("vocab_map.json")
    }
    fn tokenizer(&self) -> PathBuf {
        self.out.join("tokenizer.json")
    }
    fn ckpt(&self, name: &str) -> PathBuf {
        self.out.join("ckpt").join(format!("{name}.ckpt"))
    }
    fn curve(&self, name: &str) -> PathBuf {
        self.out.join("curves").join(format!("{name}.csv"))
    }
    fn mp_pairs(&self) -> PathBuf {
        self.out.join("mp_pairs.jsonl")
    }
    fn mp_model(&self) -> PathBuf {
        self.out.join("mp_model.json")
    }
    fn report(&self, model: &str, split: &str, kind: &str) -> PathBuf {
        self.out
            .join("reports")
            .join(format!("eval_{model}_{split}.{kind}.csv"))
    }
    fn summary(&self) -> PathBuf {
        self.out.join("summary.json")
    }
    fn run_manifest(&self) -> PathBuf {
        self.out.join("run_manifest.json")
    }
}

fn gamma_label(gamma: f64) -> String {
    format!("g{:03}", (gamma * 100.0).round() as u32)
}

/// Model names the rlhf/eval stages may produce, in report order.
fn model_names(config: &ExperimentConfig) -> Vec<String> {
    let mut names = vec!["sft_mix".to_string()];
    if config.sft.run_clean_only {
        names.push("sft_clean".into());
    }
    if config.sft.run_continued_sft {
        names.push("sft_cont".into());
    }
    for &g in &config.rlhf.gammas {
        names.push(format!("rlhf_{}", gamma_label(g)));
    }
    names
}

fn stage_gen_data(config: &ExperimentConfig, l: &Layout) -> Result<()> {
    std::fs::create_dir_all(l.data())?;
    let d = &config.data;
    let lexicon = build_lexicon(
        mix_tag(d.corpus.seed, "lexicon"),
        d.num_words,
        d.num_synonym_sets,
        d.dim,
        d.frames_per_word,
    )?;
    lexicon.save(&l.lexicon())?;
    gen_corpus(&lexicon, &d.corpus, &l.data())?;
    let sentences = gen_text_corpus(
        &lexicon,
        d.text_sentences,
        d.text_len,
        mix_tag(d.corpus.seed, "text"),
    );
    std::fs::write(l.text_corpus(), sentences.join("\n") + "\n")?;
    Ok(())
}

fn stage_codebook(config: &ExperimentConfig, l: &Layout) -> Result<()> {
    let manifest = require(Stage::Codebook, l.manifest("clean_train"))?;
    let records = load_manifest(&manifest)?;
    let frames = collect_frames(&records)?;
    let (cb, trace) = train_codebook(
        &frames,
        config.codebook.k,
        mix_tag(config.data.corpus.seed, "codebook"),
        config.codebook.max_iters,
        config.codebook.rel_tol,
    )?;
    write_codebook(&l.codebook(), &cb)?;
    std::fs::create_dir_all(l.out.join("curves"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(l.curve("codebook_distortion"))?);
    writeln!(f, "iteration,distortion")?;
    for (i, d) in trace.iter().enumerate() {
        writeln!(f, "{i},{d:.9}")?;
    }
    Ok(())
}

fn load_bridge(l: &Layout, stage: Stage) -> Result<(Lexicon, VocabMap, TextTokenizer)> {
    let lexicon = Lexicon::load(&require(stage, l.lexicon())?)?;
    let vocab_map = VocabMap::load(&require(stage, l.vocab_map())?)?;
    let tokenizer = TextTokenizer::load(&require(stage, l.tokenizer())?)?;
    Ok((lexicon, vocab_map, tokenizer))
}

fn stage_pretrain(config: &ExperimentConfig, l: &Layout) -> Result<()> {
    let lexicon = Lexicon::load(&require(Stage::Pretrain, l.lexicon())?)?;
    let codebook = read_codebook(&require(Stage::Pretrain, l.codebook())?)?;
    let text = std::fs::read_to_string(require(Stage::Pretrain, l.text_corpus())?)?;
    let sentences: Vec<String> = text.lines().map(String::from).collect();

    let freqs = count_token_freqs(&lexicon, &sentences, config.model.v)?;
    let vocab_map = build_vocab_map(config.model.v, codebook.k, &freqs)?;
    vocab_map.save(&l.vocab_map())?;
    let tokenizer = TextTokenizer::build(&lexicon, &vocab_map)?;
    tokenizer.save(&l.tokenizer())?;

    let mut ckpt = init_model(&config.model, mix_tag(config.pretrain.train.seed, "init"))?;
    ckpt.bind_artifacts(vocab_map, codebook.train_fingerprint)?;
    let (ckpt, curve) = pretrain_text(&ckpt, &sentences, &tokenizer, &config.pretrain.train)?;

    std::fs::create_dir_all(l.out.join("ckpt"))?;
    std::fs::create_dir_all(l.out.join("curves"))?;
    ckpt.save(&l.ckpt("pretrain"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(l.curve("pretrain_loss"))?);
    writeln!(f, "step,loss")?;
    for (i, loss) in curve.iter().enumerate() {
        writeln!(f, "{i},{loss:.6}")?;
    }
    Ok(())
}

fn load_split(
    l: &Layout,
    stage: Stage,
    name: &str,
    codebook: &crate::audio_tokenizer::Codebook,
    vocab_map: &VocabMap,
    tokenizer: &TextTokenizer,
) -> Result<EncodedDataset> {
    let records = load_manifest(&require(stage, l.manifest(name))?)?;
    prepare_dataset(&records, codebook, vocab_map, tokenizer)
}

fn stage_sft(config: &ExperimentConfig, l: &Layout) -> Result<()> {
    let stage = Stage::Sft;
    let (_, vocab_map, tokenizer) = load_bridge(l, stage)?;
    let codebook = read_codebook(&require(stage, l.codebook())?)?;
    let pretrained = PolicyCheckpoint::load(&require(stage, l.ckpt("pretrain"))?)?;

    let clean_train = load_split(l, stage, "clean_train", &codebook, &vocab_map, &tokenizer)?;
    let dis_train = load_split(l, stage, "disordered_train", &codebook, &vocab_map, &tokenizer)?;
    let clean_dev = load_split(l, stage, "clean_dev", &codebook, &vocab_map, &tokenizer)?;
    let dis_dev = load_split(l, stage, "disordered_dev", &codebook, &vocab_map, &tokenizer)?;

    let w = config.sft.shifted_weight;
    let mixture = MixtureSpec::new(vec![
        (dis_train.clone(), w),
        (clean_train.clone(), 1.0 - w),
    ])?;
    let out = sft(
        &pretrained,
        &mixture,
        &config.sft.train,
        &tokenizer,
        &clean_dev,
        &dis_dev,
    )?;
    out.best.save(&l.ckpt("sft_mix"))?;
    write_sft_curves(&l.curve("sft_mix"), &out.curves)?;

    if config.sft.run_clean_only {
        let clean_only = MixtureSpec::new(vec![(clean_train, 1.0)])?;
        let out = sft(
            &pretrained,
            &clean_only,
            &config.sft.train,
            &tokenizer,
            &clean_dev,
            &dis_dev,
        )?;
        out.best.save(&l.ckpt("sft_clean"))?;
        write_sft_curves(&l.curve("sft_clean"), &out.curves)?;
    }

    if config.sft.run_continued_sft {
        let baseline = PolicyCheckpoint::load(&l.ckpt("sft_mix"))?;
        let shifted_only = MixtureSpec::new(vec![(dis_train, 1.0)])?;
        let out = sft(
            &baseline,
            &shifted_only,
            &config.sft.continued,
            &tokenizer,
            &clean_dev,
            &dis_dev,
        )?;
        out.best.save(&l.ckpt("sft_cont"))?;
        write_sft_curves(&l.curve("sft_cont"), &out.curves)?;
    }
    Ok(())
}

fn stage_train_mp(config: &ExperimentConfig, l: &Layout) -> Result<()> {
    let lexicon = Lexicon::load(&require(Stage::TrainMp, l.lexicon())?)?;
    let pairs = gen_mp_pairs(
        &lexicon,
        config.mp.num_pairs,
        mix_tag(config.mp.train.seed, "mp-pairs"),
    );
    write_mp_pairs(&l.mp_pairs(), &pairs)?;
    let pairs = read_mp_pairs(&l.mp_pairs())?;
    let (model, _auc) = train_mp_model(&lexicon, &pairs, &config.mp.train)?;
    model.save(&l.mp_model())?;
    Ok(())
}

fn stage_rlhf(config: &ExperimentConfig, l: &Layout, gammas: &[f64]) -> Result<()> {
    let stage = Stage::Rlhf;
    let (lexicon, vocab_map, tokenizer) = load_bridge(l, stage)?;
    let codebook = read_codebook(&require(stage, l.codebook())?)?;
    let sft_ckpt = PolicyCheckpoint::load(&require(stage, l.ckpt("sft_mix"))?)?;
    let mp_model = MpModel::load(&require(stage, l.mp_model())?)?;

    let dis_train = load_split(l, stage, "disordered_train", &codebook, &vocab_map, &tokenizer)?;
    let dis_dev = load_split(l, stage, "disordered_dev", &codebook, &vocab_map, &tokenizer)?;

    for &gamma in gammas {
        let reward_cfg = RewardConfig {
            gamma,
            wer_clamp_delta: config.rlhf.wer_clamp_delta,
            mp_source: config.rlhf.mp_source,
        };
        let ctx = RewardContext {
            cfg: reward_cfg,
            mp_model: Some(&mp_model),
            lexicon: Some(&lexicon),
        };
        let out = rlhf_train(
            &sft_ckpt,
            &dis_train,
            &dis_dev,
            &ctx,
            &config.rlhf.ppo,
            &tokenizer,
            &mp_model,
        )?;
        let label = gamma_label(gamma);
        out.best.save(&l.ckpt(&format!("rlhf_{label}")))?;
        write_rlhf_curves(&l.curve(&format!("rlhf_{label}")), &out.curves)?;
    }
    Ok(())
}

fn stage_eval(config: &ExperimentConfig, l: &Layout) -> Result<()> {
    let stage = Stage::Eval;
    let (lexicon, vocab_map, tokenizer) = load_bridge(l, stage)?;
    let codebook = read_codebook(&require(stage, l.codebook())?)?;
    let mp_model = MpModel::load(&require(stage, l.mp_model())?)?;
    std::fs::create_dir_all(l.out.join("reports"))?;

    for split in &config.eval.splits {
        let dataset = load_split(l, stage, split, &codebook, &vocab_map, &tokenizer)?;
        for model in model_names(config) {
            let path = l.ckpt(&model);
            if !path.exists() {
                continue;
            }
            let ckpt = PolicyCheckpoint::load(&path)?;
            let (records, report) = evaluate(&ckpt, &dataset, &tokenizer, &mp_model, &lexicon)?;
            write_records_csv(&l.report(&model, split, "records"), &records)?;
            write_report_csv(&l.report(&model, split, "report"), &records, &report)?;
        }
    }

    let summary = build_summary(&l.out, config)?;
    std::fs::write(l.summary(), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// Parse the final dev losses and eval reports back out of the artifact dir.
pub fn build_summary(out: &Path, config: &ExperimentConfig) -> Result<RunSummary> {
    let l = Layout { out: out.to_path_buf() };
    let mut summary = RunSummary::default();

    let last_row = |path: &Path, col: usize| -> Option<f64> {
        let text = std::fs::read_to_string(path).ok()?;
        let line = text.lines().filter(|l| !l.trim().is_empty()).next_back()?;
        line.split(',').nth(col)?.parse().ok()
    };
    // column 3 is dev_shifted_loss in the sft curve layout
    summary.sft_mix_final_shifted_dev_loss = last_row(&l.curve("sft_mix"), 3);
    summary.sft_clean_final_shifted_dev_loss = last_row(&l.curve("sft_clean"), 3);

    for model in model_names(config) {
        let path = l.report(&model, "disordered_dev", "report");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            match cols.as_slice() {
                ["all", n, wer, mp] => {
                    summary
                        .shifted_dev_wer
                        .insert(model.clone(), wer.parse().unwrap_or(f64::NAN));
                    summary
                        .shifted_dev_mp_pct
                        .insert(model.clone(), mp.parse().unwrap_or(f64::NAN));
                    summary
                        .shifted_dev_n
                        .insert(model.clone(), n.parse().unwrap_or(0));
                }
                [scope, n, wer, mp] if scope.starts_with("severity_") => {
                    let sev = scope.trim_start_matches("severity_").to_string();
                    let _ = wer;
                    summary
                        .severity_mp_pct
                        .entry(model.clone())
                        .or_default()
                        .insert(sev.clone(), mp.parse().unwrap_or(f64::NAN));
                    summary
                        .severity_counts
                        .entry(model.clone())
                        .or_default()
                        .insert(sev, n.parse().unwrap_or(0));
                }
                ["agreement", n, acc, rho] => {
                    let rho = rho.parse::<f64>().ok();
                    summary.agreement.insert(
                        model.clone(),
                        (acc.parse().unwrap_or(f64::NAN), rho, n.parse().unwrap_or(0)),
                    );
                }
                _ => {}
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
    seed: Option<u64>,
    stages: Vec<(String, u128)>,
    artifacts: BTreeMap<String, String>,
}

fn write_run_manifest(
    l: &Layout,
    config: &ExperimentConfig,
    timings: &[(String, u128)],
) -> Result<()> {
    let mut artifacts = BTreeMap::new();
    let mut stack = vec![l.out.clone()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) != Some("run_manifest.json") {
                let rel = path
                    .strip_prefix(&l.out)
                    .expect("under out dir")
                    .to_string_lossy()
                    .replace('\\', "/");
                artifacts.insert(rel, to_hex(fingerprint_file(&path)?));
            }
        }
    }
    let manifest = RunManifest {
        config_hash: to_hex(config.hash()),
        seed: config.seed,
        stages: timings.to_vec(),
        artifacts,
    };
    std::fs::write(l.run_manifest(), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Artifact fingerprints of a prior run (for determinism comparisons).
pub fn read_manifest_fingerprints(out: &Path) -> Result<BTreeMap<String, String>> {
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json"))?)?;
    Ok(manifest.artifacts)
}

/// Run the requested stages in canonical order and refresh the run manifest.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    stages: &[Stage],
) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let l = Layout {
        out: out.to_path_buf(),
    };
    let mut timings = Vec::new();
    for stage in Stage::all() {
        if !stages.contains(&stage) {
            continue;
        }
        let t0 = Instant::now();
        match stage {
            Stage::GenData => stage_gen_data(config, &l)?,
            Stage::Codebook => stage_codebook(config, &l)?,
            Stage::Pretrain => stage_pretrain(config, &l)?,
            Stage::Sft => stage_sft(config, &l)?,
            Stage::TrainMp => stage_train_mp(config, &l)?,
            Stage::Rlhf => stage_rlhf(config, &l, &config.rlhf.gammas)?,
            Stage::Eval => stage_eval(config, &l)?,
        }
        timings.push((stage.name().to_string(), t0.elapsed().as_millis()));
    }
    write_run_manifest(&l, config, &timings)?;
    build_summary(out, config)
}

/// Quantize every utterance of a manifest; JSONL {utt_id, audio_ids}.
pub fn write_tokens_jsonl(out: &Path, manifest_name: &str) -> Result<PathBuf> {
    let l = Layout {
        out: out.to_path_buf(),
    };
    let codebook = read_codebook(&require(Stage::Codebook, l.codebook())?)?;
    let records = load_manifest(&require(Stage::GenData, l.manifest(manifest_name))?)?;
    let path = l.out.join(format!("tokens_{manifest_name}.jsonl"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    #[derive(Serialize)]
    struct Row<'a> {
        utt_id: &'a str,
        audio_ids: Vec<u32>,
    }
    for r in &records {
        let row = Row {
            utt_id: &r.utt_id,
            audio_ids: quantize(&codebook, &r.embedding)?,
        };
        writeln!(f, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_fail_cleanly_without_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::default();
        // rlhf without an sft checkpoint names the stage
        let err = run_experiment(&config, dir.path(), &[Stage::Rlhf]).unwrap_err();
        match err {
            Error::Staging { stage, .. } => assert_eq!(stage, "rlhf"),
            other => panic!("expected staging error, got {other}"),
        }
        let err = run_experiment(&config, dir.path(), &[Stage::Codebook]).unwrap_err();
        match err {
            Error::Staging { stage, .. } => assert_eq!(stage, "train-codebook"),
            other => panic!("expected staging error, got {other}"),
        }
    }

    #[test]
    fn gamma_labels_are_stable() {
        assert_eq!(gamma_label(0.0), "g000");
        assert_eq!(gamma_label(0.25), "g025");
        assert_eq!(gamma_label(0.5), "g050");
        assert_eq!(gamma_label(1.0), "g100");
    }
}
