//! Pixel-count evaluation: accuracy, Dice and sensitivity.
//!
//! Aggregates are micro-averaged (confusion counts summed over frames before
//! the formulas are applied). Macro averages are carried alongside for
//! comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Both masks empty: Dice falls back to 1.
    pub fn is_empty_pair(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

/// Which pixels a score is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EvalRegion {
    /// Every pixel of the frame.
    #[default]
    FullFrame,
    /// Only pixels inside the sequence's ROI box.
    Roi,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            actual: pred.dims(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    match c.total() {
        0 => 1.0,
        n => (c.tp + c.tn) as f64 / n as f64,
    }
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    if c.is_empty_pair() {
        return 1.0;
    }
    2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
}

/// `None` when there are no positive ground-truth pixels.
pub fn tpr(c: &ConfusionCounts) -> Option<f64> {
    match c.tp + c.fn_ {
        0 => None,
        p => Some(c.tp as f64 / p as f64),
    }
}

/// `0.8724` becomes `"87.24"`; a missing value prints as `NaN`.
pub fn format_percent(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "NaN".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MacroScores {
    pub accuracy: f64,
    pub dice: f64,
    /// Mean over frames that have positive ground truth.
    pub sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PerFrame {
    pub frame_ids: Vec<String>,
    pub accuracy: Vec<f64>,
    pub dice: Vec<f64>,
    pub sensitivity: Vec<Option<f64>>,
    /// Frames scored with the empty-empty Dice convention.
    pub empty_pair: Vec<bool>,
}

/// Scores of one configuration over a frame set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricReport {
    pub config: String,
    pub frames: usize,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub dice: f64,
    pub sensitivity: Option<f64>,
    #[serde(rename = "macro")]
    pub macro_scores: MacroScores,
    pub empty_pair_frames: usize,
    pub per_frame: PerFrame,
}

/// Scores a run from per-frame counts. Frames are sorted by id first so the
/// aggregate does not depend on input order.
pub fn evaluate_run(config: &str, frames: &[(String, ConfusionCounts)]) -> Result<MetricReport> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sorted: Vec<&(String, ConfusionCounts)> = frames.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidData(format!("frame {} listed twice", w[0].0)));
    }
    let mut counts = ConfusionCounts::default();
    let mut per_frame = PerFrame {
        frame_ids: Vec::with_capacity(sorted.len()),
        accuracy: Vec::with_capacity(sorted.len()),
        dice: Vec::with_capacity(sorted.len()),
        sensitivity: Vec::with_capacity(sorted.len()),
        empty_pair: Vec::with_capacity(sorted.len()),
    };
    for (id, c) in sorted {
        counts.add(c);
        per_frame.frame_ids.push(id.clone());
        per_frame.accuracy.push(accuracy(c));
        per_frame.dice.push(dice(c));
        per_frame.sensitivity.push(tpr(c));
        per_frame.empty_pair.push(c.is_empty_pair());
    }
    let n = per_frame.frame_ids.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let defined: Vec<f64> = per_frame.sensitivity.iter().flatten().copied().collect();
    let macro_scores = MacroScores {
        accuracy: mean(&per_frame.accuracy),
        dice: mean(&per_frame.dice),
        sensitivity: (!defined.is_empty()).then(|| mean(&defined)),
    };
    Ok(MetricReport {
        config: config.to_string(),
        frames: n,
        counts,
        accuracy: accuracy(&counts),
        dice: dice(&counts),
        sensitivity: tpr(&counts),
        macro_scores,
        empty_pair_frames: per_frame.empty_pair.iter().filter(|&&e| e).count(),
        per_frame,
    })
}

/// One row per configuration, all over the same frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AblationTable {
    pub averaging: String,
    pub rows: Vec<MetricReport>,
}

pub const CSV_HEADER: &str = "config,frames,accuracy,dice,sensitivity";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let label = if r.config.contains([',', '"']) {
                format!("\"{}\"", r.config.replace('"', "\"\""))
            } else {
                r.config.clone()
            };
            out.push_str(&format!(
                "{label},{},{},{},{}\n",
                r.frames,
                format_percent(Some(r.accuracy)),
                format_percent(Some(r.dice)),
                format_percent(r.sensitivity)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn row(&self, config: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|r| r.config == config)
    }
}

/// Builds the comparison table; every run must cover the same frame ids.
pub fn ablation_report(runs: &[(String, Vec<(String, ConfusionCounts)>)]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(runs.len());
    for (label, frames) in runs {
        let report = evaluate_run(label, frames)?;
        if let Some(first) = rows.first() {
            let first: &MetricReport = first;
            if first.per_frame.frame_ids != report.per_frame.frame_ids {
                return Err(Error::InvalidData(format!(
                    "run '{label}' covers different frames than '{}'",
                    first.config
                )));
            }
        }
        rows.push(report);
    }
    Ok(AblationTable {
        averaging: "micro".to_string(),
        rows,
    })
}
