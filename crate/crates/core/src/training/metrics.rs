use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::loss::{class_labels, TaskKind};
use super::schedule::Direction;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    RocAuc,
    AveragePrecision,
    Accuracy,
    Mae,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RocAuc => "roc-auc",
            Metric::AveragePrecision => "ap",
            Metric::Accuracy => "accuracy",
            Metric::Mae => "mae",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Metric::Mae => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }

    pub fn default_for(task: TaskKind) -> Metric {
        match task {
            TaskKind::Binary | TaskKind::Multilabel => Metric::RocAuc,
            TaskKind::Multiclass => Metric::Accuracy,
            TaskKind::Regression => Metric::Mae,
        }
    }

    /// Metrics that make sense for `task`.
    pub fn applicable(task: TaskKind) -> &'static [Metric] {
        match task {
            TaskKind::Binary | TaskKind::Multilabel => &[Metric::RocAuc, Metric::AveragePrecision, Metric::Accuracy],
            TaskKind::Multiclass => &[Metric::Accuracy],
            TaskKind::Regression => &[Metric::Mae],
        }
    }

    /// Scores `logits` against `targets` (rows aligned).
    pub fn evaluate(self, logits: &Tensor, targets: &Tensor, task: TaskKind) -> Result<f64> {
        if !Metric::applicable(task).contains(&self) {
            return Err(Error::invalid(format!("metric {self} does not apply to task {task}")));
        }
        let (rows, cols) = logits.dims2()?;
        let mismatch = || Error::shape(format!("targets {:?} for logits {:?}", targets.shape(), logits.shape()));
        match self {
            Metric::Mae => {
                if targets.shape() != logits.shape() {
                    return Err(mismatch());
                }
                Ok(mae(logits.data(), targets.data()))
            }
            Metric::Accuracy if task == TaskKind::Multiclass => {
                if targets.shape() != [rows, 1] {
                    return Err(mismatch());
                }
                let labels = class_labels(targets, cols)?;
                let hits = (0..rows)
                    .filter(|&r| argmax(&logits.data()[r * cols..(r + 1) * cols]) == labels[r])
                    .count();
                Ok(hits as f64 / rows as f64)
            }
            _ => {
                if targets.shape() != logits.shape() {
                    return Err(mismatch());
                }
                let mut per_task = Vec::new();
                for c in 0..cols {
                    let (scores, labels): (Vec<f64>, Vec<bool>) = (0..rows)
                        .filter(|&r| !targets.at2(r, c).is_nan())
                        .map(|r| (logits.at2(r, c), targets.at2(r, c) > 0.5))
                        .unzip();
                    let value = match self {
                        Metric::RocAuc => roc_auc(&scores, &labels),
                        Metric::AveragePrecision => average_precision(&scores, &labels),
                        _ => (!scores.is_empty()).then(|| {
                            let hits = scores.iter().zip(&labels).filter(|(s, l)| (**s > 0.0) == **l).count();
                            hits as f64 / scores.len() as f64
                        }),
                    };
                    per_task.extend(value);
                }
                if per_task.is_empty() {
                    return Err(Error::Dataset(format!("{self} undefined: no task has both classes")));
                }
                Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roc-auc" => Ok(Metric::RocAuc),
            "ap" => Ok(Metric::AveragePrecision),
            "accuracy" => Ok(Metric::Accuracy),
            "mae" => Ok(Metric::Mae),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half. `None` unless
/// both classes occur.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let idx = order_desc(scores);
    // walk groups of tied scores from the top, counting positive-negative
    // pairs ranked correctly
    let (mut wins, mut neg_below_seen) = (0.0, 0usize);
    let mut i = 0;
    let mut groups = Vec::new();
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let p = idx[i..j].iter().filter(|&&r| labels[r]).count();
        groups.push((p, j - i - p));
        i = j;
    }
    for &(p, n) in groups.iter().rev() {
        wins += p as f64 * (neg_below_seen as f64 + 0.5 * n as f64);
        neg_below_seen += n;
    }
    Some(wins / (pos as f64 * neg as f64))
}

/// Average precision `Σ (Rₜ − Rₜ₋₁)·Pₜ` over distinct score thresholds,
/// from the highest down. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let idx = order_desc(scores);
    let (mut tp, mut prev_recall, mut ap) = (0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            tp += labels[idx[j]] as usize;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / j as f64);
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}
