//! Evaluation and reporting: per-utterance records, corpus aggregates,
//! severity slicing, MP-model/oracle agreement, and the experiment driver.

mod config;
mod experiment;

pub use config::{
    CodebookStageConfig, DataStageConfig, EvalStageConfig, ExperimentConfig, MpStageConfig,
    PretrainStageConfig, RlhfStageConfig, SftStageConfig,
};
pub use experiment::{
    build_summary, read_manifest_fingerprints, run_experiment, write_tokens_jsonl, RunSummary,
    Stage,
};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lm_core::{generate_ckpt, DecodeConfig, DecodeMode, PolicyCheckpoint};
use crate::metrics::{midranks, mp_oracle, mp_score, wer, MpModel, WerBreakdown};
use crate::synth_data::{Domain, Lexicon, Severity};
use crate::token_bridge::{TextTokenizer, EOS};
use crate::train_sft::EncodedDataset;

/// Everything measured for one evaluated utterance.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub utt_id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub wer: WerBreakdown,
    pub mp_model_score: f64,
    pub mp_oracle_label: u8,
    pub domain: Domain,
    pub severity: Severity,
}

/// Corpus-level aggregate: WER as total edits over total reference words,
/// MP% as the share of records whose model score clears 0.5.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AggregateReport {
    pub corpus_wer: f64,
    pub mp_pct: f64,
    pub n: usize,
}

fn aggregate(records: &[&EvalRecord]) -> AggregateReport {
    let edits: usize = records.iter().map(|r| r.wer.edits()).sum();
    let ref_len: usize = records.iter().map(|r| r.wer.ref_len).sum();
    let hits = records.iter().filter(|r| r.mp_model_score >= 0.5).count();
    AggregateReport {
        corpus_wer: edits as f64 / ref_len as f64,
        mp_pct: 100.0 * hits as f64 / records.len() as f64,
        n: records.len(),
    }
}

/// Greedy-decode a dataset and measure every utterance.
pub fn evaluate(
    ckpt: &PolicyCheckpoint,
    dataset: &EncodedDataset,
    tokenizer: &TextTokenizer,
    mp_model: &MpModel,
    lexicon: &Lexicon,
) -> Result<(Vec<EvalRecord>, AggregateReport)> {
    ckpt.check_compatible(dataset.vocab_map_fingerprint, dataset.codebook_fingerprint)?;
    if dataset.items.is_empty() {
        return Err(Error::Argument("evaluate: empty dataset".into()));
    }
    let decode = DecodeConfig {
        mode: DecodeMode::Greedy,
        max_new_tokens: 24,
        seed: 0,
        forbid_audio_ids: true,
    };
    let records: Vec<EvalRecord> = dataset
        .items
        .iter()
        .map(|item| {
            let out = generate_ckpt(ckpt, item.example.prompt(), &decode)?;
            let text_ids: Vec<u32> = out.ids.iter().copied().filter(|&t| t != EOS).collect();
            let hyp = tokenizer.decode(&text_ids);
            Ok(EvalRecord {
                utt_id: item.utt_id.clone(),
                wer: wer(&item.transcript, &hyp)?,
                mp_model_score: mp_score(mp_model, &item.transcript, &hyp),
                mp_oracle_label: u8::from(mp_oracle(lexicon, &item.transcript, &hyp)),
                reference: item.transcript.clone(),
                hyp,
                domain: item.domain,
                severity: item.severity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&records.iter().collect::<Vec<_>>());
    Ok((records, report))
}

/// Partition records by severity; buckets with no records are omitted.
pub fn slice_by_severity(records: &[EvalRecord]) -> BTreeMap<Severity, AggregateReport> {
    let mut buckets: BTreeMap<Severity, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.severity).or_default().push(r);
    }
    buckets
        .into_iter()
        .map(|(sev, rs)| (sev, aggregate(&rs)))
        .collect()
}

/// MP-model vs oracle agreement.
#[derive(Debug, Clone, Serialize)]
pub struct AgreementStats {
    /// Fraction of records where (score >= 0.5) equals the oracle label.
    pub accuracy: f64,
    /// Spearman rank correlation with midrank ties; None when the oracle
    /// labels are constant and the correlation is undefined.
    pub spearman_rho: Option<f64>,
    pub n: usize,
}

/// Accuracy and Spearman rho between model scores and oracle labels.
pub fn agreement(records: &[EvalRecord]) -> Result<AgreementStats> {
    if records.is_empty() {
        return Err(Error::Argument("agreement over zero records".into()));
    }
    let n = records.len();
    let correct = records
        .iter()
        .filter(|r| (r.mp_model_score >= 0.5) == (r.mp_oracle_label == 1))
        .count();
    let accuracy = correct as f64 / n as f64;

    let labels: Vec<f64> = records.iter().map(|r| r.mp_oracle_label as f64).collect();
    let constant = labels.windows(2).all(|w| w[0] == w[1]);
    let spearman_rho = if n < 2 || constant {
        None
    } else {
        let scores: Vec<f64> = records.iter().map(|r| r.mp_model_score).collect();
        Some(spearman(&scores, &labels))
    };
    Ok(AgreementStats {
        accuracy,
        spearman_rho,
        n,
    })
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = midranks(x);
    let ry = midranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx2 = 0.0;
    let mut dy2 = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        let dx = a - mx;
        let dy = b - my;
        num += dx * dy;
        dx2 += dx * dx;
        dy2 += dy * dy;
    }
    num / (dx2 * dy2).sqrt()
}

/// Records CSV (UTF-8, header row), one line per utterance.
pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "utt_id,ref,hyp,substitutions,insertions,deletions,ref_len,wer,mp_model_score,mp_oracle_label,domain,severity"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{:.6},{:.6},{},{},{}",
            r.utt_id,
            r.reference,
            r.hyp,
            r.wer.substitutions,
            r.wer.insertions,
            r.wer.deletions,
            r.wer.ref_len,
            r.wer.wer(),
            r.mp_model_score,
            r.mp_oracle_label,
            r.domain.label(),
            r.severity.label()
        )?;
    }
    Ok(())
}

/// Report CSV: a global row plus one row per populated severity bucket.
pub fn write_report_csv(path: &Path, records: &[EvalRecord], report: &AggregateReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "scope,n,corpus_wer,mp_pct")?;
    writeln!(
        f,
        "all,{},{:.6},{:.6}",
        report.n, report.corpus_wer, report.mp_pct
    )?;
    for (sev, agg) in slice_by_severity(records) {
        writeln!(
            f,
            "severity_{},{},{:.6},{:.6}",
            sev.label(),
            agg.n,
            agg.corpus_wer,
            agg.mp_pct
        )?;
    }
    let stats = agreement(records)?;
    writeln!(
        f,
        "agreement,{},{:.6},{}",
        stats.n,
        stats.accuracy,
        stats
            .spearman_rho
            .map(|r| format!("{r:.6}"))
            .unwrap_or_else(|| "undefined".into())
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, sev: Severity, edits: (usize, usize, usize), ref_len: usize, score: f64, label: u8) -> EvalRecord {
        EvalRecord {
            utt_id: id.into(),
            reference: "r".into(),
            hyp: "h".into(),
            wer: WerBreakdown {
                substitutions: edits.0,
                insertions: edits.1,
                deletions: edits.2,
                ref_len,
            },
            mp_model_score: score,
            mp_oracle_label: label,
            domain: Domain::Disordered,
            severity: sev,
        }
    }

    #[test]
    fn corpus_wer_pools_edits_over_ref_words() {
        // (S+I+D, ref_len) = (1,4) and (3,3) pools to 4/7
        let records = vec![
            rec("a", Severity::Mild, (1, 0, 0), 4, 0.9, 1),
            rec("b", Severity::Mild, (1, 1, 1), 3, 0.1, 0),
        ];
        let agg = aggregate(&records.iter().collect::<Vec<_>>());
        assert!((agg.corpus_wer - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(agg.n, 2);
        assert!((agg.mp_pct - 50.0).abs() < 1e-12);
    }

    #[test]
    fn severity_slices_partition_the_records() {
        let records = vec![
            rec("a", Severity::Mild, (0, 0, 0), 4, 0.9, 1),
            rec("b", Severity::Moderate, (2, 0, 0), 4, 0.2, 0),
            rec("c", Severity::Moderate, (0, 0, 2), 4, 0.8, 1),
            rec("d", Severity::Severe, (4, 0, 0), 4, 0.1, 0),
        ];
        let slices = slice_by_severity(&records);
        assert_eq!(slices.len(), 3);
        assert_eq!(slices[&Severity::Moderate].n, 2);
        assert!((slices[&Severity::Moderate].corpus_wer - 4.0 / 8.0).abs() < 1e-12);
        assert!((slices[&Severity::Severe].corpus_wer - 1.0).abs() < 1e-12);
        let total: usize = slices.values().map(|a| a.n).sum();
        assert_eq!(total, records.len());
        // single-bucket set equals the global aggregate
        let only_mild = vec![records[0].clone()];
        let s = slice_by_severity(&only_mild);
        assert_eq!(s.len(), 1);
        assert_eq!(s[&Severity::Mild].n, 1);
    }

    #[test]
    fn perfect_and_anti_perfect_agreement() {
        let perfect: Vec<EvalRecord> = (0..6)
            .map(|i| {
                let label = (i % 2) as u8;
                rec(&format!("u{i}"), Severity::Mild, (0, 0, 0), 3, label as f64, label)
            })
            .collect();
        let s = agreement(&perfect).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.spearman_rho, Some(1.0));

        let anti: Vec<EvalRecord> = (0..6)
            .map(|i| {
                let label = (i % 2) as u8;
                rec(&format!("u{i}"), Severity::Mild, (0, 0, 0), 3, 1.0 - label as f64, label)
            })
            .collect();
        let s = agreement(&anti).unwrap();
        assert_eq!(s.accuracy, 0.0);
        assert_eq!(s.spearman_rho, Some(-1.0));
    }

    #[test]
    fn constant_labels_leave_rho_undefined() {
        let records: Vec<EvalRecord> = (0..4)
            .map(|i| rec(&format!("u{i}"), Severity::Mild, (0, 0, 0), 3, 0.9, 1))
            .collect();
        let s = agreement(&records).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.spearman_rho, None);
    }

    #[test]
    fn adding_a_confident_record_never_lowers_mp_pct() {
        let mut records = vec![
            rec("a", Severity::Mild, (0, 0, 0), 4, 0.3, 0),
            rec("b", Severity::Mild, (0, 0, 0), 4, 0.7, 1),
        ];
        let before = aggregate(&records.iter().collect::<Vec<_>>()).mp_pct;
        records.push(rec("c", Severity::Mild, (0, 0, 0), 4, 0.8, 1));
        let after = aggregate(&records.iter().collect::<Vec<_>>()).mp_pct;
        assert!(after >= before);
    }
}
