use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::{SegmentReduce, Tape, Var};
use crate::error::{Error, Result};

/// How messages `z_uv = h_u + e_uv` are combined at the receiving node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Sum,
    Mean,
    Min,
    Max,
    /// Channelwise softmax over incoming edges of `τ·z`, used as weights
    /// on `z`. `τ` is a learnable scalar per layer.
    Softmax,
}

impl Aggregator {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
            Aggregator::Min => "min",
            Aggregator::Max => "max",
            Aggregator::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregator::Sum),
            "mean" => Ok(Aggregator::Mean),
            "min" => Ok(Aggregator::Min),
            "max" => Ok(Aggregator::Max),
            "softmax" => Ok(Aggregator::Softmax),
            other => Err(Error::invalid(format!("unknown aggregator `{other}`"))),
        }
    }
}

/// Incoming-neighbourhood aggregation. `h` is `|V| × k`, `e` (if any) is
/// `|E| × k` aligned with `src`/`dst`. Nodes without incoming edges
/// receive a zero message. `tau` is required for [`Aggregator::Softmax`].
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    tape: &mut Tape,
    h: Var,
    e: Option<Var>,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
    num_nodes: usize,
    kind: Aggregator,
    tau: Option<Var>,
) -> Result<Var> {
    let mut z = tape.gather(h, src.clone())?;
    if let Some(e) = e {
        z = tape.add(z, e)?;
    }
    let reduce = |tape: &mut Tape, z, k| tape.segment_reduce(z, dst.clone(), num_nodes, k);
    match kind {
        Aggregator::Sum => reduce(tape, z, SegmentReduce::Sum),
        Aggregator::Mean => reduce(tape, z, SegmentReduce::Mean),
        Aggregator::Min => reduce(tape, z, SegmentReduce::Min),
        Aggregator::Max => reduce(tape, z, SegmentReduce::Max),
        Aggregator::Softmax => {
            let tau = tau.ok_or_else(|| Error::invalid("softmax aggregation needs a temperature"))?;
            let logits = tape.scale_by(z, tau)?;
            let w = tape.segment_softmax(logits, dst.clone(), num_nodes)?;
            let weighted = tape.mul(w, z)?;
            reduce(tape, weighted, SegmentReduce::Sum)
        }
    }
}
