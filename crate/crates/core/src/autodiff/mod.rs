//! Reverse-mode differentiation over a fixed set of dense primitives.
//!
//! Operations are recorded on a [`Tape`] as they execute. Every primitive
//! has a hand-written adjoint; [`Tape::backward`] walks the tape in reverse
//! and returns [`Gradients`] for all nodes that depend on a gradient leaf.
//! Any primitive producing NaN or ±inf fails with
//! [`Error::NonFinite`](crate::Error::NonFinite).
//!
//! A tape is single-threaded; build one per step (or per thread).

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use tape::{BatchStats, Gradients, SegmentReduce, Tape, Var};

#[cfg(test)]
mod tests;
