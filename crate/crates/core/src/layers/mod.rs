//! Neural layers: PHM affine maps, component batch norm, dropout, dense.
//!
//! Hypercomplex embeddings are `b × (n·m)` row-major matrices whose columns
//! hold `n` consecutive blocks of `m` channels, one block per algebra
//! component. Column `i·m + j` is channel `j` of component `i`; reshaping to
//! `b × n × m` moves no data.

mod dense;
mod dropout;
mod norm;
mod phm;

pub use dense::Dense;
pub use dropout::{hc_dropout, DropoutMode};
pub use norm::{ComponentBatchNorm, RunningStatsUpdate, BN_EPS, BN_MOMENTUM};
pub use phm::{init_phm, phc_normal_sigma, PhmLinear, PhmSpec, WeightInit};

/// Train or eval behaviour for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
