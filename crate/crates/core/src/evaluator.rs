//! Confusion matrix and one-vs-rest precision / recall / accuracy / F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::associator::{Assignment, NEW_TRACK};
use crate::error::{Error, Result};
use crate::fleet::write_file;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

fn label_of(a: &Assignment) -> &str {
    match a {
        Assignment::Vessel(v) => v,
        Assignment::NewTrack => NEW_TRACK,
    }
}

/// Confusion matrix with an explicit label order. Every true and predicted
/// label must appear in `labels`.
pub fn confusion_with_labels(
    assignments: &[(u64, Assignment)],
    truth: &BTreeMap<u64, String>,
    labels: Vec<String>,
) -> Result<ConfusionMatrix> {
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for (id, predicted) in assignments {
        let actual = truth.get(id).ok_or(Error::UnknownObjectId(*id))?;
        let missing = |l: &str| Error::InvalidConfig(format!("label {l} missing from label order"));
        let row = *index.get(actual.as_str()).ok_or_else(|| missing(actual))?;
        let col = *index
            .get(label_of(predicted))
            .ok_or_else(|| missing(label_of(predicted)))?;
        counts[row][col] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

/// Confusion matrix over the sorted union of true and predicted vessel ids,
/// with a trailing `NEW` column when any observation opened a new track.
pub fn confusion(
    assignments: &[(u64, Assignment)],
    truth: &BTreeMap<u64, String>,
) -> Result<ConfusionMatrix> {
    let mut vessels = BTreeSet::new();
    let mut any_new = false;
    for (id, predicted) in assignments {
        vessels.insert(truth.get(id).ok_or(Error::UnknownObjectId(*id))?.clone());
        match predicted {
            Assignment::Vessel(v) => {
                vessels.insert(v.clone());
            }
            Assignment::NewTrack => any_new = true,
        }
    }
    let mut labels: Vec<String> = vessels.into_iter().collect();
    if any_new {
        labels.push(NEW_TRACK.to_string());
    }
    confusion_with_labels(assignments, truth, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselMetrics {
    pub vessel_id: String,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn vessel_metrics(vessel_id: &str, tp: u64, fp: u64, fn_: u64, tn: u64) -> VesselMetrics {
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    VesselMetrics {
        vessel_id: vessel_id.to_string(),
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        accuracy: ratio((tp + tn) as f64, (tp + tn + fp + fn_) as f64),
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

/// One-vs-rest metrics for every vessel label (the `NEW` column is not a vessel).
pub fn metrics(cm: &ConfusionMatrix) -> Vec<VesselMetrics> {
    let total = cm.total();
    let n = cm.labels.len();
    cm.labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.as_str() != NEW_TRACK)
        .map(|(i, label)| {
            let tp = cm.counts[i][i];
            let row: u64 = cm.counts[i].iter().sum();
            let col: u64 = (0..n).map(|r| cm.counts[r][i]).sum();
            let (fn_, fp) = (row - tp, col - tp);
            vessel_metrics(label, tp, fp, fn_, total - tp - fp - fn_)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// Unweighted means over the given rows (zeros when empty).
pub fn macro_averages(rows: &[VesselMetrics]) -> MacroAverages {
    let mean = |f: fn(&VesselMetrics) -> f64| ratio(rows.iter().map(f).sum(), rows.len() as f64);
    MacroAverages {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        accuracy: mean(|m| m.accuracy),
        f1: mean(|m| m.f1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub decisions: u64,
    pub confusion: ConfusionMatrix,
    pub per_vessel: Vec<VesselMetrics>,
    pub macro_average: MacroAverages,
    pub metadata: RunMetadata,
}

impl EvaluationReport {
    pub fn new(cm: ConfusionMatrix, metadata: RunMetadata) -> Self {
        let per_vessel = metrics(&cm);
        EvaluationReport {
            decisions: cm.total(),
            macro_average: macro_averages(&per_vessel),
            per_vessel,
            confusion: cm,
            metadata,
        }
    }

    /// Plain-text rendering: metric table, then the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self
            .per_vessel
            .iter()
            .map(|m| m.vessel_id.len())
            .max()
            .unwrap_or(6)
            .max(13);
        let _ = writeln!(
            s,
            "{:<width$}  Precision  Recall  Accuracy  F1 score",
            "Vessel"
        );
        for m in &self.per_vessel {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.3}  {:>6.3}  {:>8.3}  {:>8.3}",
                m.vessel_id, m.precision, m.recall, m.accuracy, m.f1
            );
        }
        let a = &self.macro_average;
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.3}  {:>6.3}  {:>8.3}  {:>8.3}",
            "macro average", a.precision, a.recall, a.accuracy, a.f1
        );
        let _ = writeln!(
            s,
            "\nconfusion matrix (rows: true, columns: predicted), {} decisions",
            self.decisions
        );
        let cw = self
            .confusion
            .labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(1)
            .max(5);
        let _ = write!(s, "{:<cw$}", "");
        for l in &self.confusion.labels {
            let _ = write!(s, " {l:>cw$}");
        }
        let _ = writeln!(s);
        for (l, row) in self.confusion.labels.iter().zip(&self.confusion.counts) {
            let _ = write!(s, "{l:<cw$}");
            for c in row {
                let _ = write!(s, " {c:>cw$}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(
            s,
            "\nseed {}  config {}",
            self.metadata.seed, self.metadata.config_hash
        );
        s
    }
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn report(r: &EvaluationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(REPORT_JSON), &serde_json::to_vec_pretty(r)?)?;
    write_file(&dir.join(REPORT_TXT), r.to_text().as_bytes())
}

pub fn read_report(dir: &Path) -> Result<EvaluationReport> {
    let path = dir.join(REPORT_JSON);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
