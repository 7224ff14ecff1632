//! Per-run training records.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DistillConfig;
use crate::data::write_atomically;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-example training loss over the epoch.
    pub loss: f64,
    /// Top-1 test accuracy in percent, when evaluated this epoch.
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    /// `teacher-ce`, `student-ce`, `student-kd`, `zskd`, or `finetune`.
    pub objective: String,
    pub config: DistillConfig,
    pub train_examples: usize,
    pub epochs: Vec<EpochRecord>,
    /// Accuracy after the last epoch.
    pub final_accuracy: Option<f64>,
    /// Highest accuracy seen at any evaluation, and its epoch.
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Fingerprint of the final parameters.
    pub final_fingerprint: String,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// The report with wall-clock time zeroed, for comparing runs.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    /// `epoch,loss,test_acc` with an empty cell for unevaluated epochs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,test_acc\n");
        for r in &self.epochs {
            let acc = r.test_acc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.epoch, r.loss, acc);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<TrainReport> {
        serde_json::from_str(text).map_err(|e| Error::Parameter(format!("bad report JSON: {e}")))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomically(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_atomically(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())
    }
}
