//! Meaning preservation: rule oracle over synonym classes, plus a small
//! learned scorer standing in for an LLM judge behind the same interface.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::synth_data::Lexicon;

use super::normalize_text;

/// Class id assigned to hypothesis words outside the lexicon.
const OOV_CLASS: u32 = u32::MAX;

/// Ground-truth meaning preservation: 1 iff the synonym-class sequence of the
/// reference's content words equals that of the hypothesis. Function words are
/// ignored on both sides; unknown hypothesis words map to a sentinel class.
pub fn mp_oracle(lexicon: &Lexicon, reference: &str, hypothesis: &str) -> bool {
    let classes = lexicon.class_map();
    content_classes(&classes, reference) == content_classes(&classes, hypothesis)
}

fn content_classes(classes: &BTreeMap<String, Option<u32>>, text: &str) -> Vec<u32> {
    normalize_text(text)
        .into_iter()
        .filter_map(|w| match classes.get(&w) {
            Some(Some(c)) => Some(*c),
            Some(None) => None, // function word
            None => Some(OOV_CLASS),
        })
        .collect()
}

/// One labeled (reference, hypothesis) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledPair {
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub label: u8,
}

/// Learned meaning-preservation scorer: bag-of-class overlap features into a
/// logistic scorer. Self-contained (carries its own word->class table).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpModel {
    word_class: BTreeMap<String, Option<u32>>,
    weights: Vec<f64>,
    bias: f64,
    /// AUC on the held-out split at training time.
    pub holdout_auc: f64,
}

const N_FEATURES: usize = 9;

fn features(classes: &BTreeMap<String, Option<u32>>, reference: &str, hypothesis: &str) -> [f64; N_FEATURES] {
    let r = content_classes(classes, reference);
    let h = content_classes(classes, hypothesis);
    let rn = r.len();
    let hn = h.len();

    let mut r_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in &r {
        *r_counts.entry(c).or_default() += 1;
    }
    let mut overlap = 0usize;
    let mut h_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in &h {
        *h_counts.entry(c).or_default() += 1;
    }
    for (c, &hc) in &h_counts {
        overlap += hc.min(r_counts.get(c).copied().unwrap_or(0));
    }

    let r_set: std::collections::BTreeSet<u32> = r.iter().copied().collect();
    let h_set: std::collections::BTreeSet<u32> = h.iter().copied().collect();
    let union = r_set.union(&h_set).count();
    let inter = r_set.intersection(&h_set).count();

    let lcp = r.iter().zip(&h).take_while(|(a, b)| a == b).count();
    let oov = h.iter().filter(|&&c| c == OOV_CLASS).count();

    [
        f64::from(r == h),
        if rn == 0 { f64::from(hn == 0) } else { overlap as f64 / rn as f64 },
        if hn == 0 { f64::from(rn == 0) } else { overlap as f64 / hn as f64 },
        if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        if hn == 0 { 0.0 } else { oov as f64 / hn as f64 },
        (rn as f64 - hn as f64) / (rn + hn + 1) as f64,
        lcp as f64 / rn.max(hn).max(1) as f64,
        rn as f64 / 10.0,
        hn as f64 / 10.0,
    ]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Score in [0, 1]; deterministic for a trained model.
pub fn mp_score(model: &MpModel, reference: &str, hypothesis: &str) -> f64 {
    let f = features(&model.word_class, reference, hypothesis);
    let z: f64 = f
        .iter()
        .zip(&model.weights)
        .map(|(x, w)| x * w)
        .sum::<f64>()
        + model.bias;
    sigmoid(z)
}

impl MpModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Training knobs for the MP scorer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for MpTrainConfig {
    fn default() -> Self {
        MpTrainConfig {
            lr: 0.8,
            steps: 600,
            seed: 13,
            holdout_fraction: 0.25,
        }
    }
}

/// Train the logistic scorer on labeled pairs with full-batch gradient
/// descent; returns the model and its held-out AUC (rank-based, midrank ties).
pub fn train_mp_model(
    lexicon: &Lexicon,
    pairs: &[LabeledPair],
    cfg: &MpTrainConfig,
) -> Result<(MpModel, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("no MP training pairs".into()));
    }
    let n_pos = pairs.iter().filter(|p| p.label == 1).count();
    if n_pos == 0 || n_pos == pairs.len() {
        return Err(Error::Data(
            "MP training needs both labels present".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.holdout_fraction <= 0.0 {
        return Err(Error::Argument("holdout_fraction must be in (0, 1)".into()));
    }

    let classes = lexicon.class_map();
    let feats: Vec<[f64; N_FEATURES]> = pairs
        .iter()
        .map(|p| features(&classes, &p.reference, &p.hyp))
        .collect();
    let labels: Vec<f64> = pairs.iter().map(|p| p.label as f64).collect();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rng_from(cfg.seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_holdout = ((pairs.len() as f64 * cfg.holdout_fraction).ceil() as usize)
        .clamp(1, pairs.len() - 1);
    let (train_idx, holdout_idx) = order.split_at(pairs.len() - n_holdout);

    let mut w = [0.0f64; N_FEATURES];
    let mut b = 0.0f64;
    let inv_n = 1.0 / train_idx.len() as f64;
    for _ in 0..cfg.steps {
        let mut gw = [0.0f64; N_FEATURES];
        let mut gb = 0.0f64;
        for &i in train_idx {
            let z: f64 = feats[i].iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let err = sigmoid(z) - labels[i];
            for (g, x) in gw.iter_mut().zip(&feats[i]) {
                *g += err * x;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g * inv_n;
        }
        b -= cfg.lr * gb * inv_n;
    }

    let model = MpModel {
        word_class: classes,
        weights: w.to_vec(),
        bias: b,
        holdout_auc: 0.0,
    };

    let scores: Vec<f64> = holdout_idx
        .iter()
        .map(|&i| mp_score(&model, &pairs[i].reference, &pairs[i].hyp))
        .collect();
    let hold_labels: Vec<u8> = holdout_idx.iter().map(|&i| pairs[i].label).collect();
    let auc_value = auc(&scores, &hold_labels)?;

    let model = MpModel {
        holdout_auc: auc_value,
        ..model
    };
    Ok((model, auc_value))
}

/// Rank-based AUC with midrank tie handling (ties get 0.5 credit).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Argument("auc: mismatched or empty inputs".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("auc undefined for single-class labels".into()));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    Ok((pos_rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with ties assigned the mean of their rank range.
pub(crate) fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite scores"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Generate the default synthetic labeled set: perturbed transcripts labeled
/// by the rule oracle.
pub fn gen_mp_pairs(lexicon: &Lexicon, n: usize, seed: u64) -> Vec<LabeledPair> {
    let mut rng = rng_from(seed);
    let mut pairs = Vec::with_capacity(n);
    for k in 0..n {
        let reference = crate::synth_data::sample_transcript(lexicon, (2, 6), &mut rng);
        let words: Vec<String> = reference.split_whitespace().map(String::from).collect();
        let mut hyp_words = words.clone();
        match rng.gen_range(0..8u32) {
            0 => {}
            1 => {
                // in-set synonym swap
                let i = rng.gen_range(0..hyp_words.len());
                if let Some(idx) = lexicon.word_index(&hyp_words[i]) {
                    if let Some(class) = lexicon.class_of(idx) {
                        let set = &lexicon.synonym_sets[class as usize];
                        let pick = set[rng.gen_range(0..set.len())];
                        hyp_words[i] = lexicon.words[pick as usize].clone();
                    }
                }
            }
            2 => {
                if hyp_words.len() > 1 {
                    let i = rng.gen_range(0..hyp_words.len());
                    hyp_words.remove(i);
                }
            }
            3 => {
                // replace with an arbitrary lexicon word
                let i = rng.gen_range(0..hyp_words.len());
                let w = rng.gen_range(0..lexicon.num_words());
                hyp_words[i] = lexicon.words[w].clone();
            }
            4 => {
                let i = rng.gen_range(0..=hyp_words.len());
                let w = rng.gen_range(0..lexicon.num_words());
                hyp_words.insert(i, lexicon.words[w].clone());
            }
            5 => {
                let i = rng.gen_range(0..hyp_words.len());
                hyp_words[i] = format!("qqx{}", rng.gen_range(0..100));
            }
            6 => hyp_words.reverse(),
            _ => {
                if hyp_words.len() > 1 {
                    let i = rng.gen_range(0..hyp_words.len() - 1);
                    hyp_words.swap(i, i + 1);
                }
            }
        }
        let hyp = hyp_words.join(" ");
        let label = u8::from(mp_oracle(lexicon, &reference, &hyp));
        pairs.push(LabeledPair {
            reference,
            hyp,
            label,
        });
        // keep ids unique-ish for debugging
        let _ = k;
    }
    pairs
}

/// Write pairs as JSON Lines {ref, hyp, label}.
pub fn write_mp_pairs(path: &Path, pairs: &[LabeledPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn read_mp_pairs(path: &Path) -> Result<Vec<LabeledPair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            pairs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::build_lexicon;

    fn lex() -> Lexicon {
        build_lexicon(21, 40, 8, 8, (2, 3)).unwrap()
    }

    #[test]
    fn oracle_identity_and_drop() {
        let lex = lex();
        let set0 = &lex.synonym_sets[0];
        let w0 = lex.words[set0[0] as usize].clone();
        let other = lex.words[lex.synonym_sets[1][0] as usize].clone();
        let r = format!("{w0} {other}");
        assert!(mp_oracle(&lex, &r, &r));
        assert!(!mp_oracle(&lex, &r, &w0)); // dropped a content word
    }

    #[test]
    fn oracle_accepts_in_set_synonyms() {
        let lex = lex();
        let set = lex
            .synonym_sets
            .iter()
            .find(|s| s.len() >= 2)
            .expect("some set has two members");
        let a = lex.words[set[0] as usize].clone();
        let b = lex.words[set[1] as usize].clone();
        assert!(mp_oracle(&lex, &a, &b));
    }

    #[test]
    fn oracle_ignores_function_words_and_flags_oov() {
        let lex = lex();
        let content = lex.words[lex.synonym_sets[0][0] as usize].clone();
        if let Some(&f) = lex.function_words.first() {
            let fw = lex.words[f as usize].clone();
            assert!(mp_oracle(&lex, &content, &format!("{fw} {content}")));
        }
        assert!(!mp_oracle(&lex, &content, &format!("{content} zzzoov")));
    }

    #[test]
    fn synonym_substitution_never_changes_the_label() {
        let lex = lex();
        let mut rng = rng_from(2);
        for _ in 0..50 {
            let r = crate::synth_data::sample_transcript(&lex, (2, 5), &mut rng);
            let words: Vec<String> = r.split_whitespace().map(String::from).collect();
            let mut hyp = words.clone();
            let i = rng.gen_range(0..hyp.len());
            if let Some(idx) = lex.word_index(&hyp[i]) {
                if let Some(class) = lex.class_of(idx) {
                    let set = &lex.synonym_sets[class as usize];
                    hyp[i] = lex.words[set[rng.gen_range(0..set.len())] as usize].clone();
                }
            }
            let h = hyp.join(" ");
            assert_eq!(mp_oracle(&lex, &r, &r), mp_oracle(&lex, &r, &h));
        }
    }

    #[test]
    fn auc_of_perfect_scorer_is_exactly_one() {
        let labels = [0u8, 1, 0, 1, 1, 0];
        let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let anti: Vec<f64> = labels.iter().map(|&l| 1.0 - l as f64).collect();
        assert_eq!(auc(&anti, &labels).unwrap(), 0.0);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(auc(&[0.3, 0.7], &[1, 1]).is_err());
    }

    #[test]
    fn trained_model_separates_oracle_labels() {
        let lex = lex();
        let pairs = gen_mp_pairs(&lex, 1500, 3);
        let (model, holdout) = train_mp_model(&lex, &pairs, &MpTrainConfig::default()).unwrap();
        assert!(holdout >= 0.95, "holdout AUC too low: {holdout}");
        // self-pair scores above threshold
        let r = crate::synth_data::sample_transcript(&lex, (3, 5), &mut rng_from(4));
        assert!(mp_score(&model, &r, &r) > 0.5);
        // deterministic scoring
        assert_eq!(mp_score(&model, &r, &r), mp_score(&model, &r, &r));
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        let lex = lex();
        let mut pairs = gen_mp_pairs(&lex, 1500, 5);
        let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
        let mut rng = rng_from(77);
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        for (p, &src) in pairs.iter_mut().zip(&perm) {
            p.label = labels[src];
        }
        let (_, holdout) = train_mp_model(&lex, &pairs, &MpTrainConfig::default()).unwrap();
        assert!(
            (0.4..=0.6).contains(&holdout),
            "null AUC outside [0.4, 0.6]: {holdout}"
        );
    }

    #[test]
    fn single_class_training_data_is_rejected() {
        let lex = lex();
        let mut pairs = gen_mp_pairs(&lex, 50, 3);
        for p in &mut pairs {
            p.label = 1;
        }
        assert!(train_mp_model(&lex, &pairs, &MpTrainConfig::default()).is_err());
    }

    #[test]
    fn pairs_roundtrip_jsonl() {
        let lex = lex();
        let pairs = gen_mp_pairs(&lex, 20, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_mp_pairs(&path, &pairs).unwrap();
        let back = read_mp_pairs(&path).unwrap();
        assert_eq!(back.len(), pairs.len());
        assert_eq!(back[3].reference, pairs[3].reference);
        assert_eq!(back[3].label, pairs[3].label);
    }

    use crate::rng::rng_from;
    use rand::Rng;
}
