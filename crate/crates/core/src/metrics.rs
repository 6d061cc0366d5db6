//! Confusion-matrix metrics and sequence-level evaluation.
//!
//! One prediction is made per test sequence, at its final frame, after
//! streaming every frame through the dual memories. Precision for a
//! class with no predictions is reported as `None`, never coerced to
//! zero; the macro precision averages the defined classes only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::model::{predict, IntentionLabel, ModelConfig, CLASSES};
use crate::params::ParamSet;
use crate::synth::{ClientDataset, ScenarioTag};

/// Per-class precision, confusion counts and the false-positive rate of
/// gesturing lane-keep sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; CLASSES]; CLASSES],
    pub samples: usize,
    /// How many `LK_with_SOP` sequences were seen / predicted as a lane-change.
    pub fp_candidates: usize,
    pub fp_hits: usize,
}

impl MetricsReport {
    pub fn from_predictions(
        outcomes: impl IntoIterator<Item = (IntentionLabel, ScenarioTag, IntentionLabel)>,
    ) -> Self {
        let mut report = MetricsReport {
            confusion: [[0; CLASSES]; CLASSES],
            samples: 0,
            fp_candidates: 0,
            fp_hits: 0,
        };
        for (truth, scenario, predicted) in outcomes {
            report.confusion[truth.index()][predicted.index()] += 1;
            report.samples += 1;
            if scenario == ScenarioTag::LaneKeepWithSop {
                report.fp_candidates += 1;
                if predicted != IntentionLabel::LaneKeep {
                    report.fp_hits += 1;
                }
            }
        }
        report
    }

    /// `TP / (TP + FP)` for one class; `None` when the class was never predicted.
    pub fn precision(&self, class: IntentionLabel) -> Option<f64> {
        let c = class.index();
        let predicted: usize = (0..CLASSES).map(|r| self.confusion[r][c]).sum();
        if predicted == 0 {
            None
        } else {
            Some(self.confusion[c][c] as f64 / predicted as f64)
        }
    }

    pub fn precisions(&self) -> [Option<f64>; CLASSES] {
        [
            self.precision(IntentionLabel::LaneKeep),
            self.precision(IntentionLabel::LeftLaneChange),
            self.precision(IntentionLabel::RightLaneChange),
        ]
    }

    /// Unweighted mean over classes with defined precision.
    pub fn macro_precision(&self) -> Option<f64> {
        let defined: Vec<f64> = self.precisions().iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    /// Share of gesturing lane-keep sequences misread as a lane-change.
    pub fn false_positive_rate(&self) -> Option<f64> {
        if self.fp_candidates == 0 {
            None
        } else {
            Some(self.fp_hits as f64 / self.fp_candidates as f64)
        }
    }
}

/// Streams every held-out sequence through the memories and tallies the
/// final-frame predictions of `params`.
pub fn evaluate(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    mem_cfg: &MemoryConfig,
    dataset: &ClientDataset,
) -> Result<MetricsReport> {
    if dataset.test_idx.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let width = dataset.frame_width();
    let mut outcomes = Vec::with_capacity(dataset.test_idx.len());
    for seq in dataset.test() {
        let mem = seq.final_memory(mem_cfg, width)?;
        let predicted = predict(params, model_cfg, &mem)?;
        outcomes.push((seq.label, seq.scenario, predicted));
    }
    Ok(MetricsReport::from_predictions(outcomes))
}
