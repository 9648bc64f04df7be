//! Named parameter storage shared by layers, optimizer, and checkpoints.

use crate::autodiff::{grad_check_with, GradCheckOptions, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is; regularizers and accounting select by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Stacked PHM component weights `n × k/n × d/n`.
    PhmWeight,
    /// Stacked contribution matrices `n × n × n`.
    Contribution,
    Bias,
    Embedding,
    Dense,
    Norm,
    Temperature,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    /// Receives gradients and optimizer updates. Frozen contribution
    /// matrices are learnable-kind parameters with `trainable = false`.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        value.ensure_finite(&name)?;
        self.params.push(Param {
            name,
            value,
            role,
            trainable: trainable && role != ParamRole::Buffer,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Scalars in learnable-kind tensors (everything except buffers).
    pub fn count_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role != ParamRole::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Scalars that receive gradient updates.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Records every tensor on `tape`: trainable ones as gradient leaves,
    /// the rest as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Records every tensor as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }
}

/// Tape handles for the tensors of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Gradient-checks `f` with respect to every trainable tensor in `store`;
/// the remaining tensors enter as constants.
pub fn grad_check_store<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let trainable: Vec<Tensor> = store
        .params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.value.clone())
        .collect();
    grad_check_with(
        |tape, leaves| {
            let mut next = leaves.iter();
            let vars = store
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        *next.next().expect("one leaf per trainable tensor")
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect();
            f(tape, &Bindings { vars })
        },
        &trainable,
        opts,
    )
}
