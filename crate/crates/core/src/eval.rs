//! Micro precision/recall/F1 with NONE handling, plus multi-seed aggregation.
//!
//! Metrics are micro-averaged over the non-NONE labels: a NONE prediction on
//! a NONE gold counts toward nothing, a non-NONE prediction is a true
//! positive only when it matches the gold exactly, and gold non-NONE
//! instances that are not correctly recovered count as false negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Instance, LabelVocab};

/// Per-label true/false positive and false negative counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Evaluation result over one prediction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// Counts aligned to the vocabulary; the NONE row stays at zero.
    pub per_label: Vec<LabelCounts>,
    pub n_instances: usize,
    pub predicted_none_share: f64,
    pub gold_none_share: f64,
}

/// Mean and sample standard deviation of micro-F1 over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub n_runs: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    // 0/0 := 0 so degenerate all-NONE runs still score.
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged evaluation of aligned prediction/gold label indices.
pub fn evaluate(predictions: &[usize], golds: &[usize], vocab: &LabelVocab) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidConfig(format!(
            "{} predictions against {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let k = vocab.len();
    let none = vocab.none_index();
    let mut per_label = vec![LabelCounts::default(); k];
    let mut pred_none = 0usize;
    let mut gold_none = 0usize;
    for (&p, &g) in predictions.iter().zip(golds) {
        if p >= k || g >= k {
            return Err(Error::InvalidConfig(format!(
                "label index out of range for a {k}-label vocabulary"
            )));
        }
        if p == none {
            pred_none += 1;
        }
        if g == none {
            gold_none += 1;
        }
        if p != none && p == g {
            per_label[p].tp += 1;
        }
        if p != none && p != g {
            per_label[p].fp += 1;
        }
        if g != none && p != g {
            per_label[g].fn_ += 1;
        }
    }
    let tp: usize = per_label.iter().map(|c| c.tp).sum();
    let fp: usize = per_label.iter().map(|c| c.fp).sum();
    let fn_: usize = per_label.iter().map(|c| c.fn_).sum();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let n = predictions.len();
    Ok(EvalReport {
        micro_precision: precision,
        micro_recall: recall,
        micro_f1: f1,
        per_label,
        n_instances: n,
        predicted_none_share: ratio(pred_none, n),
        gold_none_share: ratio(gold_none, n),
    })
}

/// Gold label index per instance: the first label of its label set.
pub fn gold_indices(data: &[Instance], vocab: &LabelVocab) -> Result<Vec<usize>> {
    data.iter()
        .map(|inst| vocab.require(inst.first_label()))
        .collect()
}

/// Fraction of predictions equal to NONE.
pub fn none_share(predictions: &[usize], vocab: &LabelVocab) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions".into()));
    }
    let none = vocab.none_index();
    Ok(ratio(
        predictions.iter().filter(|p| **p == none).count(),
        predictions.len(),
    ))
}

/// Mean and sample standard deviation (n-1 denominator; 0 for a single run)
/// of micro-F1 over a set of reports.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("evaluation reports".into()));
    }
    let n = reports.len();
    let f1s: Vec<f64> = reports.iter().map(|r| r.micro_f1).collect();
    let lo = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Clamping keeps the mean inside [min, max] and identical runs at an
    // exactly zero deviation despite summation rounding.
    let mean = (f1s.iter().sum::<f64>() / n as f64).clamp(lo, hi);
    let std = if n == 1 || lo == hi {
        0.0
    } else {
        let var = f1s.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    };
    Ok(SeedAggregate {
        mean_f1: mean,
        std_f1: std,
        n_runs: n,
    })
}
