//! Evaluation and reporting: accuracies, forgetting gap, confusion matrices,
//! CSV/JSON emission.
//!
//! Argmax semantics (lowest class index wins ties) live in [`confusion_counts`]
//! and are shared with the credibility-matrix evaluation, so both views of the
//! teacher's confusion agree by construction.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::fed::RoundRecord;
use crate::nn::{self, Batch, ModelParams};

/// Index of the row maximum; ties break toward the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Raw confusion counts: `counts[true][predicted]`.
pub fn confusion_counts(params: &ModelParams, ds: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
    let batch = Batch::new(ds.features.clone(), ds.labels.clone(), ds.classes)?;
    let logits = nn::forward_logits(params, &batch)?;
    let mut counts = vec![vec![0usize; ds.classes]; ds.classes];
    for (row, &label) in logits.iter().zip(&ds.labels) {
        counts[label][argmax(row)] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Per-class recall (row-normalized diagonal of the confusion counts).
    pub class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

/// Top-1 accuracy, per-class recall and confusion counts on a test set.
pub fn evaluate(params: &ModelParams, test: &LabeledDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(CoreError::InvalidArgument("empty test set".into()));
    }
    let confusion = confusion_counts(params, test)?;
    let correct: usize = (0..test.classes).map(|k| confusion[k][k]).sum();
    let class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[k] as f64 / total as f64
            }
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        class_accuracy,
        confusion,
    })
}

/// `Acc_G - Acc_L`: global-model accuracy minus mean post-local-training
/// accuracy, both on the uniform test set.
pub fn forgetting_gap(acc_global: f64, acc_local_mean: f64) -> f64 {
    acc_global - acc_local_mean
}

/// First round index at which the accuracy series reaches `target`.
pub fn rounds_to_target(acc_series: &[f64], target: f64) -> Option<usize> {
    acc_series.iter().position(|&a| a >= target)
}

/// Per-client loss summary over one round of local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    /// Mean cross-entropy over all local batches of the round.
    pub ce: f64,
    /// Mean distillation / regularization term over all local batches.
    pub distill: f64,
}

/// Metrics recorded for one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Accuracy of the post-aggregation global model produced by this round.
    pub acc_global: f64,
    /// Accuracy of the global model the round's locals started from.
    pub acc_global_start: f64,
    /// Test accuracy of each participating client's updated local model.
    pub acc_local: Vec<f64>,
    pub acc_local_mean: f64,
    /// `acc_global_start - acc_local_mean` (the pairing of locals with the
    /// model they were initialized from).
    pub forgetting_gap: f64,
    /// Alternative pairing against the post-aggregation global model.
    pub forgetting_gap_post: f64,
    pub class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub client_losses: Vec<ClientLoss>,
}

pub const CSV_SCHEMA: &str = "fedssd.metrics.v1";

fn fmt_f64(v: f64) -> String {
    // 17 significant digits; round-trips losslessly through parse.
    format!("{v:.16e}")
}

/// Writes the per-round CSV. One header line, one row per round; re-emitting
/// identical records yields identical bytes.
pub fn emit_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let classes = records
        .first()
        .map(|r| r.metrics.class_accuracy.len())
        .unwrap_or(0);
    let mut out = String::new();
    out.push_str("schema,round,acc_global,acc_global_start,acc_local_mean,forgetting_gap,forgetting_gap_post,ce_loss,distill_loss");
    for k in 0..classes {
        out.push_str(&format!(",class_acc_{k}"));
    }
    out.push('\n');
    for rec in records {
        let m = &rec.metrics;
        let n = m.client_losses.len().max(1) as f64;
        let ce_mean = m.client_losses.iter().map(|c| c.ce).sum::<f64>() / n;
        let distill_mean = m.client_losses.iter().map(|c| c.distill).sum::<f64>() / n;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            CSV_SCHEMA,
            rec.round,
            fmt_f64(m.acc_global),
            fmt_f64(m.acc_global_start),
            fmt_f64(m.acc_local_mean),
            fmt_f64(m.forgetting_gap),
            fmt_f64(m.forgetting_gap_post),
            fmt_f64(ce_mean),
            fmt_f64(distill_mean),
        ));
        for &a in &m.class_accuracy {
            out.push(',');
            out.push_str(&fmt_f64(a));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Full results document: config echo, seeds, credibility and confusion
/// matrices for every round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDocument {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub rounds: Vec<RoundRecord>,
}

pub fn emit_json(
    records: &[RoundRecord],
    config: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let doc = RunDocument {
        schema_version: 1,
        config: config.clone(),
        rounds: records.to_vec(),
    };
    let mut file =
        fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let bytes = serde_json::to_vec_pretty(&doc)?;
    file.write_all(&bytes)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    file.write_all(b"\n")
        .map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load_json(path: &Path) -> Result<RunDocument> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
