//! Deterministic synthetic "speech" corpora in two domains: a clean domain and
//! a shifted (disordered) domain with severity levels.
//!
//! Real audio is out of scope. An utterance embedding is the concatenation of
//! per-word phoneme-prototype frames, perturbed by substitution, frame drops,
//! frame duplication and additive Gaussian noise. Ground truth (word identity,
//! synonym classes) stays known, which is what makes exact oracles possible
//! downstream.

mod corpus;
mod embedding_io;

pub use corpus::{gen_corpus, load_manifest, read_manifest_rows, CorpusPaths, CorpusSpec, ManifestRow};
pub use embedding_io::{read_embedding, write_embedding};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Speaker-level severity of the shifted domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    None,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 4] = [
        Severity::None,
        Severity::Mild,
        Severity::Moderate,
        Severity::Severe,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Severity::None => "none",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

/// Which corpus an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Clean,
    Disordered,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::Clean => "clean",
            Domain::Disordered => "disordered",
        }
    }
}

/// Frames-by-dim matrix of f32, the stand-in for speech-encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Data(format!(
                "embedding data length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Generated vocabulary: words, per-word prototype frames, synonym classes.
///
/// Every word is either a content word (member of exactly one synonym set) or
/// a function word carrying no meaning signature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub dim: usize,
    pub words: Vec<String>,
    /// Per word: prototype frames, each of length `dim`.
    pub prototypes: Vec<Vec<Vec<f32>>>,
    /// Partition of content words (by word index) into equivalence classes.
    pub synonym_sets: Vec<Vec<u32>>,
    /// Word indices of function words.
    pub function_words: Vec<u32>,
    word_index: BTreeMap<String, u32>,
}

impl Lexicon {
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn word_index(&self, word: &str) -> Option<u32> {
        self.word_index.get(word).copied()
    }

    /// Synonym-set id of a word index; `None` for function words.
    pub fn class_of(&self, word_idx: u32) -> Option<u32> {
        for (set_id, set) in self.synonym_sets.iter().enumerate() {
            if set.contains(&word_idx) {
                return Some(set_id as u32);
            }
        }
        None
    }

    /// word -> Some(class id) for content words, None for function words.
    pub fn class_map(&self) -> BTreeMap<String, Option<u32>> {
        let mut by_word: BTreeMap<String, Option<u32>> = BTreeMap::new();
        for &w in &self.function_words {
            by_word.insert(self.words[w as usize].clone(), None);
        }
        for (set_id, set) in self.synonym_sets.iter().enumerate() {
            for &w in set {
                by_word.insert(self.words[w as usize].clone(), Some(set_id as u32));
            }
        }
        by_word
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.words.len()];
        for set in &self.synonym_sets {
            if set.is_empty() {
                return Err(Error::Data("empty synonym set".into()));
            }
            for &w in set {
                if seen[w as usize] {
                    return Err(Error::Data(format!("word {w} in two classes")));
                }
                seen[w as usize] = true;
            }
        }
        for &w in &self.function_words {
            if seen[w as usize] {
                return Err(Error::Data(format!("function word {w} also in a set")));
            }
            seen[w as usize] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Data("word in neither a set nor function_words".into()));
        }
        for (w, protos) in self.prototypes.iter().enumerate() {
            if protos.is_empty() {
                return Err(Error::Data(format!("word {w} has no prototype frames")));
            }
            if protos.iter().any(|f| f.len() != self.dim) {
                return Err(Error::Data(format!("word {w} has a frame of wrong dim")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let lex: Lexicon = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lex.validate()?;
        Ok(lex)
    }
}

/// Perturbation parameters of one rendering domain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainParams {
    pub noise_std: f32,
    pub substitution_rate: f32,
    pub frame_drop_rate: f32,
    pub frame_dup_rate: f32,
    pub severity: Severity,
}

impl DomainParams {
    /// Pinned per-severity presets; `noise_std` is added on top of `base_noise`.
    pub fn preset(severity: Severity, base_noise: f32) -> Self {
        let (noise, sub, drop, dup) = match severity {
            Severity::None => (0.0, 0.0, 0.0, 0.0),
            Severity::Mild => (0.04, 0.02, 0.02, 0.02),
            Severity::Moderate => (0.08, 0.05, 0.04, 0.04),
            Severity::Severe => (0.14, 0.09, 0.07, 0.06),
        };
        DomainParams {
            noise_std: base_noise + noise,
            substitution_rate: sub,
            frame_drop_rate: drop,
            frame_dup_rate: dup,
            severity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.substitution_rate,
            self.frame_drop_rate,
            self.frame_dup_rate,
        ];
        if self.noise_std < 0.0 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Argument("domain params out of range".into()));
        }
        if self.severity == Severity::None && probs.iter().any(|&p| p != 0.0) {
            return Err(Error::Argument(
                "severity=none requires zero substitution/drop/dup rates".into(),
            ));
        }
        Ok(())
    }
}

/// One (embedding, transcript) pair; the unit of every dataset.
#[derive(Debug, Clone)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub embedding: EmbeddingSequence,
    pub transcript: String,
    pub domain: Domain,
    pub severity: Severity,
    pub speaker_id: String,
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministically generate a lexicon from the given sizes.
///
/// Prototype frames are drawn from a unit-variance spherical Gaussian. Roughly
/// an eighth of the words become function words (never more than the slack
/// left after reserving one word per synonym set).
pub fn build_lexicon(
    seed: u64,
    num_words: usize,
    num_synonym_sets: usize,
    dim: usize,
    frames_per_word: (usize, usize),
) -> Result<Lexicon> {
    if num_synonym_sets < 1 || num_words < num_synonym_sets {
        return Err(Error::Argument(format!(
            "need num_words >= num_synonym_sets >= 1, got {num_words} / {num_synonym_sets}"
        )));
    }
    if dim < 2 {
        return Err(Error::Argument(format!("dim must be >= 2, got {dim}")));
    }
    let (lo, hi) = frames_per_word;
    if lo < 1 || hi < lo {
        return Err(Error::Argument(format!(
            "frames_per_word range ({lo}, {hi}) invalid"
        )));
    }

    let mut rng = rng_from(seed);

    // Pronounceable unique words from CV syllables.
    let mut words: Vec<String> = Vec::with_capacity(num_words);
    let mut used = std::collections::BTreeSet::new();
    while words.len() < num_words {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if used.insert(w.clone()) {
            words.push(w);
        }
    }

    let normal = Normal::new(0.0f64, 1.0).expect("valid normal");
    let prototypes: Vec<Vec<Vec<f32>>> = (0..num_words)
        .map(|_| {
            let frames = rng.gen_range(lo..=hi);
            (0..frames)
                .map(|_| (0..dim).map(|_| normal.sample(&mut rng) as f32).collect())
                .collect()
        })
        .collect();

    let num_function = (num_words / 8).min(num_words - num_synonym_sets);
    let mut indices: Vec<u32> = (0..num_words as u32).collect();
    shuffle(&mut indices, &mut rng);
    let function_words: Vec<u32> = {
        let mut f: Vec<u32> = indices[..num_function].to_vec();
        f.sort_unstable();
        f
    };
    let content = &indices[num_function..];

    let mut synonym_sets: Vec<Vec<u32>> = vec![Vec::new(); num_synonym_sets];
    for (i, &w) in content.iter().enumerate() {
        let set = if i < num_synonym_sets {
            i
        } else {
            rng.gen_range(0..num_synonym_sets)
        };
        synonym_sets[set].push(w);
    }
    for set in &mut synonym_sets {
        set.sort_unstable();
    }

    let word_index = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();

    let lex = Lexicon {
        dim,
        words,
        prototypes,
        synonym_sets,
        function_words,
        word_index,
    };
    lex.validate()?;
    Ok(lex)
}

/// Fisher-Yates with the crate RNG; kept local so shuffles stay reproducible
/// independent of `rand`'s SliceRandom implementation details.
fn shuffle<T>(xs: &mut [T], rng: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Render one utterance: concatenate word prototypes, then apply (in order)
/// per-frame prototype substitution, frame drop, frame duplication, additive
/// Gaussian noise. At least one frame always survives.
pub fn gen_utterance(
    lexicon: &Lexicon,
    transcript: &str,
    params: &DomainParams,
    seed: u64,
) -> Result<UtteranceRecord> {
    params.validate()?;
    let words: Vec<&str> = transcript.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Argument("transcript is empty".into()));
    }

    let mut frames: Vec<Vec<f32>> = Vec::new();
    for w in &words {
        let idx = lexicon
            .word_index(w)
            .ok_or_else(|| Error::UnknownWord(w.to_string()))?;
        frames.extend(lexicon.prototypes[idx as usize].iter().cloned());
    }

    let mut rng = rng_from(seed);

    // 1. prototype substitution
    for frame in frames.iter_mut() {
        if rng.gen::<f32>() < params.substitution_rate {
            let w = rng.gen_range(0..lexicon.num_words());
            let f = rng.gen_range(0..lexicon.prototypes[w].len());
            *frame = lexicon.prototypes[w][f].clone();
        }
    }

    // 2. frame drop (keep the first frame if everything would be dropped)
    let kept: Vec<Vec<f32>> = frames
        .iter()
        .filter(|_| rng.gen::<f32>() >= params.frame_drop_rate)
        .cloned()
        .collect();
    let mut frames = if kept.is_empty() {
        vec![frames[0].clone()]
    } else {
        kept
    };

    // 3. frame duplication
    let mut duplicated: Vec<Vec<f32>> = Vec::with_capacity(frames.len() * 2);
    for frame in frames.drain(..) {
        let dup = rng.gen::<f32>() < params.frame_dup_rate;
        duplicated.push(frame.clone());
        if dup {
            duplicated.push(frame);
        }
    }

    // 4. additive Gaussian noise
    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0f64, params.noise_std as f64).expect("valid normal");
        for frame in duplicated.iter_mut() {
            for x in frame.iter_mut() {
                *x += noise.sample(&mut rng) as f32;
            }
        }
    }

    let dim = lexicon.dim;
    let data: Vec<f32> = duplicated.into_iter().flatten().collect();
    Ok(UtteranceRecord {
        utt_id: String::new(),
        embedding: EmbeddingSequence::new(dim, data)?,
        transcript: transcript.to_string(),
        domain: if params.severity == Severity::None {
            Domain::Clean
        } else {
            Domain::Disordered
        },
        severity: params.severity,
        speaker_id: String::new(),
    })
}

/// Sample `n` sentences over the lexicon with a Zipf word distribution, so the
/// text corpus has a meaningful frequency tail for the vocabulary remap.
pub fn gen_text_corpus(
    lexicon: &Lexicon,
    n: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Vec<String> {
    let mut rng = rng_from(seed);
    let zipf = Zipf::new(lexicon.num_words() as u64, 1.1).expect("valid zipf");
    (0..n)
        .map(|_| {
            let len = rng.gen_range(len_range.0..=len_range.1);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let idx = zipf.sample(&mut rng) as usize - 1;
                    lexicon.words[idx].as_str()
                })
                .collect();
            words.join(" ")
        })
        .collect()
}

/// Sample one transcript with uniform word choice.
pub fn sample_transcript(lexicon: &Lexicon, len_range: (usize, usize), rng: &mut impl Rng) -> String {
    let len = rng.gen_range(len_range.0..=len_range.1);
    let words: Vec<&str> = (0..len)
        .map(|_| lexicon.words[rng.gen_range(0..lexicon.num_words())].as_str())
        .collect();
    words.join(" ")
}
