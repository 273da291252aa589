// throwaway: instrumented PPO loop on run5 artifacts
use asrlab::lm_core::PolicyCheckpoint;
use asrlab::metrics::{corpus_wer, wer, MpModel};
use asrlab::rlhf_ppo::*;
use asrlab::synth_data::*;
use asrlab::token_bridge::*;
use asrlab::audio_tokenizer::read_codebook;
use asrlab::train_sft::{prepare_dataset, decode_dataset, EncodedItem};
use std::path::Path;

fn sid(pairs: &[(String, String)]) -> (usize, usize, usize, f64) {
    let (mut s, mut i, mut d, mut n) = (0, 0, 0, 0);
    for (r, h) in pairs {
        let b = wer(r, h).unwrap();
        s += b.substitutions; i += b.insertions; d += b.deletions; n += b.ref_len;
    }
    (s, i, d, (s + i + d) as f64 / n as f64)
}

fn main() {
    let out = Path::new("/tmp/cal/run5");
    let lex = Lexicon::load(&out.join("data/lexicon.json")).unwrap();
    let map = VocabMap::load(&out.join("vocab_map.json")).unwrap();
    let tok = TextTokenizer::load(&out.join("tokenizer.json")).unwrap();
    let cb = read_codebook(&out.join("codebook.kmc")).unwrap();
    let sft = PolicyCheckpoint::load(&out.join("ckpt/sft_mix.ckpt")).unwrap();
    let mp = MpModel::load(&out.join("mp_model.json")).unwrap();
    let train = prepare_dataset(&load_manifest(&out.join("data/disordered_train.jsonl")).unwrap(), &cb, &map, &tok).unwrap();
    let dev = prepare_dataset(&load_manifest(&out.join("data/disordered_dev.jsonl")).unwrap(), &cb, &map, &tok).unwrap();

    let lr: f64 = std::env::var("P_LR").map(|v| v.parse().unwrap()).unwrap_or(2e-4);
    let kl: f64 = std::env::var("P_KL").map(|v| v.parse().unwrap()).unwrap_or(0.2);
    let tau: f32 = std::env::var("P_TAU").map(|v| v.parse().unwrap()).unwrap_or(0.5);
    let upd: usize = std::env::var("P_UPD").map(|v| v.parse().unwrap()).unwrap_or(60);
    let spp: usize = std::env::var("P_SPP").map(|v| v.parse().unwrap()).unwrap_or(2);
    let cfg = PpoConfig { seed: 29, lr, kl_coeff: kl, temperature: tau, samples_per_prompt: spp, ..Default::default() };
    let ctx = RewardContext { cfg: RewardConfig { gamma: 0.0, wer_clamp_delta: 1e-3, mp_source: MpSource::LearnedModel }, mp_model: Some(&mp), lexicon: Some(&lex) };
    let mut policy = sft.clone();
    let mut vh = ValueHead::zeros(policy.config.d_model);
    let mut trainer = PpoTrainer::new(&policy, cfg.clone()).unwrap();

    let pairs = decode_dataset(&policy, &dev, &tok, 24).unwrap();
    let (s, i, d, w) = sid(&pairs);
    println!("update 0: dev S={s} I={i} D={d} wer={w:.4}");

    for update in 0..upd {
        let distinct = cfg.rollouts_per_update / cfg.samples_per_prompt;
        let idxs: Vec<usize> = (0..distinct).map(|k| (update * distinct + k) % train.items.len()).collect();
        let items: Vec<&EncodedItem> = idxs.iter().flat_map(|&i| std::iter::repeat(&train.items[i]).take(cfg.samples_per_prompt)).collect();
        let trajs = rollout(&policy, &sft, &vh, &items, &cfg, &ctx, &tok, update as u64).unwrap();
        let stats = trainer.ppo_update(&mut policy, &mut vh, &trajs).unwrap();
        if (update + 1) % 15 == 0 {
            let pairs = decode_dataset(&policy, &dev, &tok, 24).unwrap();
            let (s, i, d, w) = sid(&pairs);
            let tr_pairs = decode_dataset(&policy, &train, &tok, 24).unwrap();
            let twer = corpus_wer(tr_pairs.iter().take(300).map(|(r, h)| (r.as_str(), h.as_str()))).unwrap();
            println!("update {}: dev S={s} I={i} D={d} wer={w:.4} | train wer={twer:.4} | r={:.3} kl={:.3} vloss={:.3} clip={:.2}",
                update + 1, stats.mean_reward, stats.mean_kl, stats.value_loss, stats.clip_fraction);
        }
    }
}
