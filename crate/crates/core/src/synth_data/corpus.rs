//! Corpus generation: manifests, embedding files, and split hygiene.
//!
//! Within the disordered domain, dev/test speakers and phrases are disjoint
//! from train. Severity is a speaker-level attribute.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_tag, rng_from};

use super::{
    gen_utterance, write_embedding, read_embedding, Domain, DomainParams, Lexicon, Severity,
    UtteranceRecord,
};

/// One JSONL manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utt_id: String,
    pub embedding_path: String,
    pub transcript: String,
    pub domain: Domain,
    pub severity: Severity,
    pub speaker_id: String,
}

/// Sizes and knobs of one generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub clean_train: usize,
    pub clean_dev: usize,
    pub clean_test: usize,
    pub disordered_train: usize,
    pub disordered_dev: usize,
    pub disordered_test: usize,
    pub clean_speakers: usize,
    pub disordered_train_speakers: usize,
    /// Speakers reserved for disordered dev/test (split between the two).
    pub disordered_heldout_speakers: usize,
    pub transcript_len: (usize, usize),
    pub clean_noise_std: f32,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 17,
            clean_train: 2000,
            clean_dev: 150,
            clean_test: 150,
            disordered_train: 2000,
            disordered_dev: 150,
            disordered_test: 150,
            clean_speakers: 20,
            disordered_train_speakers: 10,
            disordered_heldout_speakers: 6,
            transcript_len: (3, 8),
            clean_noise_std: 0.05,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        let counts = [
            self.clean_train,
            self.clean_dev,
            self.clean_test,
            self.disordered_train,
            self.disordered_dev,
            self.disordered_test,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Argument("all split counts must be >= 1".into()));
        }
        if self.clean_speakers == 0 || self.disordered_train_speakers == 0 {
            return Err(Error::Argument("speaker counts must be >= 1".into()));
        }
        if self.disordered_heldout_speakers < 2 {
            return Err(Error::Argument(
                "need >= 2 held-out disordered speakers (dev and test)".into(),
            ));
        }
        if self.transcript_len.0 < 1 || self.transcript_len.1 < self.transcript_len.0 {
            return Err(Error::Argument("bad transcript length range".into()));
        }
        Ok(())
    }
}

/// Locations of a generated corpus.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub root: PathBuf,
    pub manifests: Vec<(Domain, &'static str, PathBuf)>,
}

impl CorpusPaths {
    pub fn manifest(&self, domain: Domain, split: &str) -> Option<&PathBuf> {
        self.manifests
            .iter()
            .find(|(d, s, _)| *d == domain && *s == split)
            .map(|(_, _, p)| p)
    }
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Generate both domains into `out_dir`: JSONL manifests per (domain, split)
/// plus one EMB1 file per utterance under `out_dir/emb/`.
pub fn gen_corpus(lexicon: &Lexicon, spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusPaths> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("emb"))?;

    // Unique phrase pools, one phrase per utterance slot, so models must
    // decode audio rather than memorize a phrase list. Disordered train
    // phrases are disjoint from disordered dev/test phrases; the clean pool
    // is independent.
    let mut phrase_rng = rng_from(mix_tag(spec.seed, "phrases"));
    let n_train_pool = spec.disordered_train.max(32);
    let n_eval_pool = (spec.disordered_dev + spec.disordered_test).max(32);
    let dis_pool = unique_phrases(lexicon, n_train_pool + n_eval_pool, spec, &mut phrase_rng);
    let (dis_train_pool, dis_eval_pool) = dis_pool.split_at(n_train_pool);
    let clean_pool = unique_phrases(lexicon, spec.clean_train.max(32), spec, &mut phrase_rng);

    // Speakers. Disordered speakers carry a speaker-level severity, assigned
    // round-robin within each group so every split covers all levels.
    let clean_speakers: Vec<String> = (0..spec.clean_speakers)
        .map(|i| format!("spk_c{i:03}"))
        .collect();
    let n_dis = spec.disordered_train_speakers + spec.disordered_heldout_speakers;
    let dis_speakers: Vec<String> = (0..n_dis).map(|i| format!("spk_d{i:03}")).collect();
    let dis_train_speakers = &dis_speakers[..spec.disordered_train_speakers];
    let heldout = &dis_speakers[spec.disordered_train_speakers..];
    let n_dev_speakers = (heldout.len() / 2).max(1);
    let dis_dev_speakers = &heldout[..n_dev_speakers];
    let dis_test_speakers = &heldout[n_dev_speakers..];
    let cycle = [Severity::Mild, Severity::Moderate, Severity::Severe];
    let severities: Vec<Severity> = (0..n_dis)
        .map(|i| {
            // restart the cycle at each group boundary so train, dev and
            // test all cover every level once they have >= 3 speakers
            let t = spec.disordered_train_speakers;
            let within_group = if i < t {
                i
            } else if i < t + n_dev_speakers {
                i - t
            } else {
                i - t - n_dev_speakers
            };
            cycle[within_group % 3]
        })
        .collect();

    let mut manifests = Vec::new();
    for domain in [Domain::Clean, Domain::Disordered] {
        for split in SPLITS {
            let count = match (domain, split) {
                (Domain::Clean, "train") => spec.clean_train,
                (Domain::Clean, "dev") => spec.clean_dev,
                (Domain::Clean, "test") => spec.clean_test,
                (Domain::Disordered, "train") => spec.disordered_train,
                (Domain::Disordered, "dev") => spec.disordered_dev,
                _ => spec.disordered_test,
            };
            let (speakers, phrases): (&[String], &[String]) = match (domain, split) {
                (Domain::Clean, _) => (&clean_speakers, &clean_pool),
                (Domain::Disordered, "train") => (dis_train_speakers, dis_train_pool),
                (Domain::Disordered, "dev") => (dis_dev_speakers, dis_eval_pool),
                _ => (dis_test_speakers, dis_eval_pool),
            };

            let manifest_path = out_dir.join(format!("{}_{split}.jsonl", domain.label()));
            let mut lines = Vec::with_capacity(count);
            for i in 0..count {
                let utt_id = format!("{}_{split}_{i:06}", domain.label());
                let utt_seed = mix_tag(spec.seed, &utt_id);
                let mut pick = rng_from(mix_tag(utt_seed, "pick"));
                let spk_i = pick.gen_range(0..speakers.len());
                let speaker_id = speakers[spk_i].clone();
                let transcript = phrases[pick.gen_range(0..phrases.len())].clone();

                let severity = match domain {
                    Domain::Clean => Severity::None,
                    Domain::Disordered => {
                        let global = dis_speakers
                            .iter()
                            .position(|s| *s == speaker_id)
                            .expect("speaker exists");
                        severities[global]
                    }
                };
                let params = match domain {
                    Domain::Clean => DomainParams::preset(Severity::None, spec.clean_noise_std),
                    Domain::Disordered => DomainParams::preset(severity, spec.clean_noise_std),
                };

                let mut rec = gen_utterance(lexicon, &transcript, &params, utt_seed)?;
                rec.utt_id = utt_id.clone();
                rec.speaker_id = speaker_id;
                rec.domain = domain;
                rec.severity = severity;

                let rel = format!("emb/{utt_id}.emb");
                write_embedding(&out_dir.join(&rel), &rec.embedding)?;
                lines.push(ManifestRow {
                    utt_id,
                    embedding_path: rel,
                    transcript: rec.transcript,
                    domain,
                    severity,
                    speaker_id: rec.speaker_id,
                });
            }
            write_manifest(&manifest_path, &lines)?;
            manifests.push((domain, split, manifest_path));
        }
    }

    Ok(CorpusPaths {
        root: out_dir.to_path_buf(),
        manifests,
    })
}

fn unique_phrases(
    lexicon: &Lexicon,
    n: usize,
    spec: &CorpusSpec,
    rng: &mut impl Rng,
) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = super::sample_transcript(lexicon, spec.transcript_len, rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        writeln!(f, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

/// Read manifest rows without loading embeddings.
pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// Load a manifest and its embedding files into full records.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let rows = read_manifest_rows(path)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", path.display())));
    }
    rows.into_iter()
        .map(|row| {
            let embedding = read_embedding(&dir.join(&row.embedding_path))?;
            Ok(UtteranceRecord {
                utt_id: row.utt_id,
                embedding,
                transcript: row.transcript,
                domain: row.domain,
                severity: row.severity,
                speaker_id: row.speaker_id,
            })
        })
        .collect()
}
