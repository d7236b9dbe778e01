//! Selection upper bound: the fraction of samples on which at least one
//! domain-specific prompt predicts correctly. Selection is a degenerate
//! convex combination (one-hot weights), so this bounds what any
//! selection-style use of the prompts can reach; fusion proper can form new
//! representations and occasionally beat it, which shows up as a negative
//! gap.

use serde::{Deserialize, Serialize};

use crate::error::{LdpfError, Result};

/// One evaluated sample: what every per-domain prompt predicted, what fusion
/// predicted, and the fusion weights that were used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub sample_id: usize,
    pub true_class: usize,
    pub alpha: Vec<f64>,
    pub per_domain_predicted_class: Vec<usize>,
    pub fused_probabilities: Vec<f64>,
    pub fused_predicted_class: usize,
}

/// A set of evaluated samples with a consistent domain axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDump {
    rows: Vec<DumpRow>,
}

impl PredictionDump {
    pub fn new(rows: Vec<DumpRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(LdpfError::EmptyInput("prediction dump".into()));
        }
        let n_s = rows[0].per_domain_predicted_class.len();
        if n_s == 0 {
            return Err(LdpfError::Format(
                "row 0: no per-domain predictions".into(),
            ));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.per_domain_predicted_class.len() != n_s {
                return Err(LdpfError::Format(format!(
                    "row {i} (sample {}): {} per-domain predictions, expected {n_s}",
                    row.sample_id,
                    row.per_domain_predicted_class.len()
                )));
            }
            if row.alpha.len() != n_s {
                return Err(LdpfError::Format(format!(
                    "row {i} (sample {}): alpha of length {}, expected {n_s}",
                    row.sample_id,
                    row.alpha.len()
                )));
            }
            if row.fused_probabilities.is_empty() {
                return Err(LdpfError::Format(format!(
                    "row {i} (sample {}): empty fused probabilities",
                    row.sample_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[DumpRow] {
        &self.rows
    }

    pub fn num_domains(&self) -> usize {
        self.rows[0].per_domain_predicted_class.len()
    }

    /// Parse newline-delimited JSON rows; errors name the offending line.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: DumpRow = serde_json::from_str(line)
                .map_err(|e| LdpfError::Format(format!("dump row {i}: {e}")))?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("dump rows serialize"));
            out.push('\n');
        }
        out
    }
}

/// `U_sel`: fraction of samples where some per-domain prompt is correct.
pub fn selection_upper_bound(dump: &PredictionDump) -> Result<f64> {
    let hits = dump
        .rows()
        .iter()
        .filter(|r| r.per_domain_predicted_class.contains(&r.true_class))
        .count();
    Ok(hits as f64 / dump.rows().len() as f64)
}

/// Bound analysis over one dump: the selection bound, the fused accuracy,
/// each prompt's own accuracy, and the gap between bound and fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub u_sel: f64,
    pub fused_accuracy: f64,
    pub per_prompt_accuracy: Vec<f64>,
    /// `u_sel - fused_accuracy`; negative means fusion built predictions no
    /// single prompt made.
    pub gap: f64,
    pub n_samples: usize,
}

pub fn bound_report(dump: &PredictionDump) -> Result<BoundReport> {
    let n = dump.rows().len();
    let n_s = dump.num_domains();
    let u_sel = selection_upper_bound(dump)?;
    let fused = dump
        .rows()
        .iter()
        .filter(|r| r.fused_predicted_class == r.true_class)
        .count() as f64
        / n as f64;
    let per_prompt_accuracy: Vec<f64> = (0..n_s)
        .map(|s| {
            dump.rows()
                .iter()
                .filter(|r| r.per_domain_predicted_class[s] == r.true_class)
                .count() as f64
                / n as f64
        })
        .collect();
    // union bound sanity: the selection oracle dominates every single prompt
    debug_assert!(per_prompt_accuracy.iter().all(|&a| u_sel >= a - 1e-12));
    Ok(BoundReport {
        u_sel,
        fused_accuracy: fused,
        per_prompt_accuracy,
        gap: u_sel - fused,
        n_samples: n,
    })
}
