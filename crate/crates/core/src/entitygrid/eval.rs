//! Per-position accuracy and edge/center discrepancy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::qa::{QAItem, Task, OPTION_LABELS};
use super::render::{CENTER_POSITIONS, EDGE_POSITIONS};
use crate::error::{Error, Result};

pub const STD_DEFINITION: &str =
    "population standard deviation over the nine per-position accuracies, each averaged over tasks with equal weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTable {
    pub correct: [usize; 9],
    pub total: [usize; 9],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `A_p` for p = 1..=9; `None` for positions without items.
    pub per_position: [Option<f64>; 9],
    pub per_task: BTreeMap<Task, TaskTable>,
    pub acc_edge: f64,
    pub acc_center: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub acc_std_definition: String,
    /// `acc_edge / acc_center`; `None` when `acc_center` is zero.
    pub d1: Option<f64>,
    /// `(acc_edge - acc_center) / acc_center`, signed.
    pub d2: Option<f64>,
    pub d2_abs: Option<f64>,
    pub items: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn partition_mean(acc: &[Option<f64>; 9], set: &[u8], name: &str) -> Result<f64> {
    let vals: Vec<f64> = set.iter().filter_map(|&p| acc[p as usize - 1]).collect();
    if vals.is_empty() {
        return Err(Error::Precondition(format!(
            "no evaluated items at {name} positions"
        )));
    }
    Ok(mean(&vals))
}

/// D1 and signed D2 from partition means.
pub fn discrepancies(acc_edge: f64, acc_center: f64) -> (Option<f64>, Option<f64>) {
    if acc_center == 0.0 {
        return (None, None);
    }
    (
        Some(acc_edge / acc_center),
        Some((acc_edge - acc_center) / acc_center),
    )
}

impl EvalReport {
    /// Builds the summary from per-position accuracies alone.
    pub fn from_position_accuracies(per_position: [Option<f64>; 9]) -> Result<Self> {
        Self::build(per_position, BTreeMap::new(), 0)
    }

    fn build(
        per_position: [Option<f64>; 9],
        per_task: BTreeMap<Task, TaskTable>,
        items: usize,
    ) -> Result<Self> {
        let acc_edge = partition_mean(&per_position, &EDGE_POSITIONS, "edge")?;
        let acc_center = partition_mean(&per_position, &CENTER_POSITIONS, "center")?;
        let present: Vec<f64> = per_position.iter().flatten().copied().collect();
        let acc_mean = mean(&present);
        let acc_std = (present.iter().map(|a| (a - acc_mean).powi(2)).sum::<f64>()
            / present.len() as f64)
            .sqrt();
        let (d1, d2) = discrepancies(acc_edge, acc_center);
        Ok(Self {
            per_position,
            per_task,
            acc_edge,
            acc_center,
            acc_mean,
            acc_std,
            acc_std_definition: STD_DEFINITION.into(),
            d1,
            d2,
            d2_abs: d2.map(f64::abs),
            items,
        })
    }
}

/// Probe positions keyed by image id, as recorded on each item.
pub fn probe_positions(items: &[QAItem]) -> BTreeMap<String, u8> {
    items
        .iter()
        .map(|i| (i.image_id.clone(), i.probe_position))
        .collect()
}

/// Scores predictions (option letters) against the items.
pub fn evaluate(
    predictions: &BTreeMap<String, String>,
    items: &[QAItem],
    position_of: &BTreeMap<String, u8>,
) -> Result<EvalReport> {
    let mut tables: BTreeMap<Task, TaskTable> = BTreeMap::new();
    for item in items {
        let pred = predictions
            .get(&item.image_id)
            .ok_or_else(|| Error::MissingPrediction(item.image_id.clone()))?;
        let p = *position_of.get(&item.image_id).ok_or_else(|| {
            Error::Precondition(format!("no probe position for {}", item.image_id))
        })?;
        if !(1..=9).contains(&p) {
            return Err(Error::Precondition(format!(
                "probe position {p} for {}",
                item.image_id
            )));
        }
        let t = tables.entry(item.task).or_insert(TaskTable {
            correct: [0; 9],
            total: [0; 9],
        });
        t.total[p as usize - 1] += 1;
        if *pred == item.answer {
            t.correct[p as usize - 1] += 1;
        }
    }
    let per_position = std::array::from_fn(|i| {
        let accs: Vec<f64> = tables
            .values()
            .filter(|t| t.total[i] > 0)
            .map(|t| t.correct[i] as f64 / t.total[i] as f64)
            .collect();
        (!accs.is_empty()).then(|| mean(&accs))
    });
    EvalReport::build(per_position, tables, items.len())
}

/// Predictions that always pick the correct option.
pub fn perfect_oracle(items: &[QAItem]) -> BTreeMap<String, String> {
    items
        .iter()
        .map(|i| (i.image_id.clone(), i.answer.clone()))
        .collect()
}

/// Predictions that always pick option `A`.
pub fn constant_oracle(items: &[QAItem]) -> BTreeMap<String, String> {
    items
        .iter()
        .map(|i| (i.image_id.clone(), OPTION_LABELS[0].to_string()))
        .collect()
}

/// Predictions correct exactly when the probe position is in `correct_at`.
pub fn profile_oracle(items: &[QAItem], correct_at: &BTreeSet<u8>) -> BTreeMap<String, String> {
    items
        .iter()
        .map(|i| {
            let pick = if correct_at.contains(&i.probe_position) {
                i.answer.clone()
            } else {
                OPTION_LABELS
                    .iter()
                    .find(|l| **l != i.answer)
                    .map(|l| l.to_string())
                    .unwrap_or_default()
            };
            (i.image_id.clone(), pick)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub option: String,
}

pub fn parse_predictions(jsonl: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line)?;
        out.insert(p.image_id, p.option);
    }
    Ok(out)
}

pub fn predictions_jsonl(predictions: &BTreeMap<String, String>) -> Result<String> {
    let mut s = String::new();
    for (id, opt) in predictions {
        s.push_str(&serde_json::to_string(&Prediction {
            image_id: id.clone(),
            option: opt.clone(),
        })?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_center_ratio() {
        let mut acc = [None; 9];
        for p in EDGE_POSITIONS {
            acc[p as usize - 1] = Some(0.5819);
        }
        for p in CENTER_POSITIONS {
            acc[p as usize - 1] = Some(0.6624);
        }
        let r = EvalReport::from_position_accuracies(acc).unwrap();
        assert!((r.d1.unwrap() - 0.8784).abs() < 5e-4);
        assert!((r.d2_abs.unwrap() - 0.1215).abs() < 5e-4);
    }

    #[test]
    fn zero_center_is_undefined() {
        let mut acc = [Some(0.3); 9];
        for p in CENTER_POSITIONS {
            acc[p as usize - 1] = Some(0.0);
        }
        let r = EvalReport::from_position_accuracies(acc).unwrap();
        assert_eq!((r.d1, r.d2), (None, None));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["d1"].is_null());
    }

    #[test]
    fn constant_accuracy() {
        let r = EvalReport::from_position_accuracies([Some(0.37); 9]).unwrap();
        assert!((r.d1.unwrap() - 1.0).abs() < 1e-15);
        assert!(r.d2.unwrap().abs() < 1e-15);
        assert!(r.acc_std < 1e-15);
    }
}
