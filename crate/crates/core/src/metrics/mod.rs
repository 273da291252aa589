//! Transcript metrics: normalization, word error rate, and the
//! meaning-preservation oracle / learned reward model.

mod mp;
mod wer;

pub(crate) use mp::midranks;

pub use mp::{
    auc, gen_mp_pairs, mp_oracle, mp_score, read_mp_pairs, train_mp_model, write_mp_pairs,
    LabeledPair, MpModel, MpTrainConfig,
};
pub use wer::{corpus_wer, normalize_text, wer, WerBreakdown};
