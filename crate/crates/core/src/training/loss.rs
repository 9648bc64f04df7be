use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::PhmLinear;
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

/// Prediction task, which fixes the loss and the default metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// One sigmoid logit per graph.
    Binary,
    /// Several independent sigmoid logits; NaN targets are ignored.
    Multilabel,
    /// Softmax over `out_dim` classes; the target is a class index.
    Multiclass,
    /// Mean absolute error on real targets.
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Multilabel => "multilabel-binary",
            TaskKind::Multiclass => "multiclass",
            TaskKind::Regression => "regression-mae",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TaskKind::Binary),
            "multilabel-binary" => Ok(TaskKind::Multilabel),
            "multiclass" => Ok(TaskKind::Multiclass),
            "regression-mae" => Ok(TaskKind::Regression),
            other => Err(Error::invalid(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Class indices from a `rows × 1` target tensor of integral floats.
pub fn class_labels(targets: &Tensor, classes: usize) -> Result<Vec<usize>> {
    targets
        .data()
        .iter()
        .map(|&t| {
            if t.fract() == 0.0 && t >= 0.0 && (t as usize) < classes {
                Ok(t as usize)
            } else {
                Err(Error::Dataset(format!("class label {t} is not an index below {classes}")))
            }
        })
        .collect()
}

/// Mean task loss of `logits` against `targets` (same row count).
pub fn task_loss(tape: &mut Tape, logits: Var, targets: &Tensor, kind: TaskKind) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    match kind {
        TaskKind::Binary | TaskKind::Multilabel => tape.sigmoid_bce(logits, targets),
        TaskKind::Multiclass => {
            let labels = class_labels(targets, shape[1])?;
            tape.softmax_ce(logits, &labels)
        }
        TaskKind::Regression => {
            if targets.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "regression targets {:?} for predictions {shape:?}",
                    targets.shape()
                )));
            }
            let t = tape.constant(targets.clone());
            let diff = tape.sub(logits, t)?;
            let abs = tape.abs(diff)?;
            tape.mean(abs)
        }
    }
}

/// Sum over layers of the mean `l_p` norm of each weight entry's vector of
/// algebra components.
pub fn weight_reg<'a>(
    tape: &mut Tape,
    bind: &Bindings,
    layers: impl IntoIterator<Item = &'a PhmLinear>,
    p: f64,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for layer in layers {
        let w = bind.var(layer.weights_id());
        let shape = tape.shape(w).to_vec();
        let groups = tape.reshape(w, &[shape[0], shape[1] * shape[2]])?;
        let norms = tape.group_lp_norm(groups, p)?;
        let term = tape.mean(norms)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total)
}

/// Sum over layers of `(1/n³)·Σᵢ ‖Cᵢ‖₁`.
pub fn contribution_reg<'a>(
    tape: &mut Tape,
    bind: &Bindings,
    layers: impl IntoIterator<Item = &'a PhmLinear>,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for layer in layers {
        let c = bind.var(layer.contributions_id());
        let abs = tape.abs(c)?;
        let sum = tape.sum(abs)?;
        let term = tape.scale(sum, 1.0 / (layer.n() as f64).powi(3))?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total)
}

/// Plain-value version of [`weight_reg`].
pub fn weight_reg_value<'a>(store: &ParamStore, layers: impl IntoIterator<Item = &'a PhmLinear>, p: f64) -> f64 {
    layers
        .into_iter()
        .map(|layer| {
            let w = store.value(layer.weights_id());
            let (n, cells) = (w.shape()[0], w.shape()[1] * w.shape()[2]);
            let total: f64 = (0..cells)
                .map(|c| (0..n).map(|i| w.data()[i * cells + c].abs().powf(p)).sum::<f64>().powf(1.0 / p))
                .sum();
            total / cells as f64
        })
        .sum()
}

/// Plain-value version of [`contribution_reg`].
pub fn contribution_reg_value<'a>(store: &ParamStore, layers: impl IntoIterator<Item = &'a PhmLinear>) -> f64 {
    layers
        .into_iter()
        .map(|layer| {
            let c = store.value(layer.contributions_id());
            c.data().iter().map(|v| v.abs()).sum::<f64>() / (layer.n() as f64).powi(3)
        })
        .sum()
}

/// Loss coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalties {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Norm order of the weight regularizer.
    pub p: f64,
}

/// The scalar that is minimized, plus its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub task: Var,
}

/// `task + λ1·weight_reg + λ2·contribution_reg`. Penalties with a zero
/// coefficient are not recorded.
pub fn total_loss<'a, I>(
    tape: &mut Tape,
    bind: &Bindings,
    logits: Var,
    targets: &Tensor,
    kind: TaskKind,
    layers: I,
    penalties: &Penalties,
) -> Result<LossTerms>
where
    I: IntoIterator<Item = &'a PhmLinear> + Clone,
{
    let task = task_loss(tape, logits, targets, kind)?;
    let mut total = task;
    if penalties.lambda1 > 0.0 {
        if let Some(r) = weight_reg(tape, bind, layers.clone(), penalties.p)? {
            let r = tape.scale(r, penalties.lambda1)?;
            total = tape.add(total, r)?;
        }
    }
    if penalties.lambda2 > 0.0 {
        if let Some(r) = contribution_reg(tape, bind, layers)? {
            let r = tape.scale(r, penalties.lambda2)?;
            total = tape.add(total, r)?;
        }
    }
    Ok(LossTerms { total, task })
}
