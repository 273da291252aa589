//! Mapping between audio-token ids and the K least-frequent text-vocabulary
//! indices, plus example encoding for ASR training.
//!
//! The vocabulary is reindexed by descending corpus frequency (reserved ids
//! pinned first), so indices V-K..V-1 are exactly the K least frequent and can
//! be repurposed as audio tokens without touching the model architecture.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint_bytes;
use crate::synth_data::Lexicon;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_RESERVED: usize = 4;

/// Bijection between audio ids 0..K and vocab indices V-K..V.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub v: usize,
    pub k: usize,
    /// freq_rank[new_id] = original token id; descending frequency after the
    /// pinned reserved ids, stable tie-break by original id.
    pub freq_rank: Vec<u32>,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    pub sep: u32,
}

/// Mapping direction for `map_token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AudioToVocab,
    VocabToAudio,
}

/// Reindex the vocabulary by descending frequency and pin the audio range.
///
/// `token_freqs` are per-original-id counts (length V). Reserved ids keep
/// positions 0..3 regardless of frequency.
pub fn build_vocab_map(v: usize, k: usize, token_freqs: &[u64]) -> Result<VocabMap> {
    if v <= k + NUM_RESERVED {
        return Err(Error::Argument(format!(
            "need V > K + {NUM_RESERVED}, got V={v}, K={k}"
        )));
    }
    if token_freqs.len() != v {
        return Err(Error::Argument(format!(
            "token_freqs length {} != V={v}",
            token_freqs.len()
        )));
    }
    let mut rest: Vec<u32> = (NUM_RESERVED as u32..v as u32).collect();
    rest.sort_by(|&a, &b| {
        token_freqs[b as usize]
            .cmp(&token_freqs[a as usize])
            .then(a.cmp(&b))
    });
    let mut freq_rank = Vec::with_capacity(v);
    freq_rank.extend(0..NUM_RESERVED as u32);
    freq_rank.extend(rest);

    Ok(VocabMap {
        v,
        k,
        freq_rank,
        bos: BOS,
        eos: EOS,
        pad: PAD,
        sep: SEP,
    })
}

impl VocabMap {
    /// First index of the audio range [V-K, V).
    pub fn audio_start(&self) -> u32 {
        (self.v - self.k) as u32
    }

    pub fn is_audio_vocab_id(&self, id: u32) -> bool {
        id >= self.audio_start() && (id as usize) < self.v
    }

    pub fn audio_to_vocab(&self, audio_id: u32) -> Result<u32> {
        if audio_id as usize >= self.k {
            return Err(Error::Argument(format!(
                "audio id {audio_id} out of range 0..{}",
                self.k
            )));
        }
        Ok(self.audio_start() + audio_id)
    }

    pub fn vocab_to_audio(&self, vocab_id: u32) -> Result<Option<u32>> {
        if vocab_id as usize >= self.v {
            return Err(Error::Argument(format!(
                "vocab id {vocab_id} out of range 0..{}",
                self.v
            )));
        }
        Ok(if self.is_audio_vocab_id(vocab_id) {
            Some(vocab_id - self.audio_start())
        } else {
            None
        })
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_bytes(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Directional id mapping; vocab->audio yields None for text-range ids.
pub fn map_token(map: &VocabMap, id: u32, direction: Direction) -> Result<Option<u32>> {
    match direction {
        Direction::AudioToVocab => map.audio_to_vocab(id).map(Some),
        Direction::VocabToAudio => map.vocab_to_audio(id),
    }
}

/// Count original-id token frequencies of a word-level corpus.
///
/// Original ids: reserved 0..4, then lexicon word i at id 4+i. BOS/EOS are
/// counted once per sentence so reserved ids rank as frequent.
pub fn count_token_freqs(lexicon: &Lexicon, sentences: &[String], v: usize) -> Result<Vec<u64>> {
    if v < NUM_RESERVED + lexicon.num_words() {
        return Err(Error::Argument(format!(
            "V={v} too small for {} words + reserved",
            lexicon.num_words()
        )));
    }
    let mut freqs = vec![0u64; v];
    for s in sentences {
        freqs[BOS as usize] += 1;
        freqs[EOS as usize] += 1;
        for w in s.split_whitespace() {
            let idx = lexicon
                .word_index(w)
                .ok_or_else(|| Error::UnknownWord(w.to_string()))?;
            freqs[NUM_RESERVED + idx as usize] += 1;
        }
    }
    Ok(freqs)
}

/// Word-level text tokenizer in the remapped index space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextTokenizer {
    pub v: usize,
    pub k: usize,
    word_id: BTreeMap<String, u32>,
    id_word: BTreeMap<u32, String>,
}

impl TextTokenizer {
    /// Place each lexicon word at its frequency-ranked vocab id.
    ///
    /// Errors if any word would land in the audio range; that means V is too
    /// small for the lexicon plus the repurposed tail.
    pub fn build(lexicon: &Lexicon, map: &VocabMap) -> Result<Self> {
        let mut original_of_word: BTreeMap<u32, String> = BTreeMap::new();
        for (i, w) in lexicon.words.iter().enumerate() {
            original_of_word.insert((NUM_RESERVED + i) as u32, w.clone());
        }
        let mut word_id = BTreeMap::new();
        let mut id_word = BTreeMap::new();
        for (new_id, &orig) in map.freq_rank.iter().enumerate() {
            if let Some(w) = original_of_word.get(&orig) {
                let new_id = new_id as u32;
                if map.is_audio_vocab_id(new_id) {
                    return Err(Error::Argument(format!(
                        "word {w:?} ranked into the audio range; increase V"
                    )));
                }
                word_id.insert(w.clone(), new_id);
                id_word.insert(new_id, w.clone());
            }
        }
        Ok(TextTokenizer {
            v: map.v,
            k: map.k,
            word_id,
            id_word,
        })
    }

    pub fn encode_word(&self, word: &str) -> Option<u32> {
        self.word_id.get(word).copied()
    }

    pub fn encode_transcript(&self, transcript: &str) -> Result<Vec<u32>> {
        transcript
            .split_whitespace()
            .map(|w| {
                self.encode_word(w)
                    .ok_or_else(|| Error::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Render ids back to words; ids with no word (reserved, unused, audio)
    /// render as `tok{id}` so decoding errors stay visible to WER.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<String> = ids
            .iter()
            .map(|id| {
                self.id_word
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| format!("tok{id}"))
            })
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One teacher-forced training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    /// [BOS, mapped audio ids..., SEP, transcript ids..., EOS]
    pub tokens: Vec<u32>,
    /// True at positions the loss trains on: the transcript ids and EOS.
    pub loss_mask: Vec<bool>,
}

impl EncodedExample {
    /// Prompt prefix [BOS, audio..., SEP] for decoding.
    pub fn prompt(&self) -> &[u32] {
        let sep_pos = self
            .tokens
            .iter()
            .position(|&t| t == SEP)
            .expect("encoded example has SEP");
        &self.tokens[..=sep_pos]
    }

    /// Target ids covered by the loss mask.
    pub fn targets(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .zip(&self.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Lay out one example and its loss mask.
pub fn encode_example(
    map: &VocabMap,
    audio_ids: &[u32],
    transcript_ids: &[u32],
) -> Result<EncodedExample> {
    let mut tokens = Vec::with_capacity(audio_ids.len() + transcript_ids.len() + 3);
    tokens.push(BOS);
    for &a in audio_ids {
        tokens.push(map.audio_to_vocab(a)?);
    }
    tokens.push(SEP);
    let text_end = tokens.len();
    for &t in transcript_ids {
        if t as usize >= map.v {
            return Err(Error::Encoding(format!("transcript id {t} >= V")));
        }
        if map.is_audio_vocab_id(t) {
            return Err(Error::Encoding(format!(
                "transcript id {t} lies in the audio range"
            )));
        }
        tokens.push(t);
    }
    tokens.push(EOS);

    let mut loss_mask = vec![false; tokens.len()];
    for m in loss_mask.iter_mut().skip(text_end) {
        *m = true;
    }
    Ok(EncodedExample { tokens, loss_mask })
}
