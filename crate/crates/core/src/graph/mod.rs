//! Graph data, featurization, message passing, pooling, and the full model.
//!
//! A [`GraphBatch`] is the disjoint union of several graphs. Node `v` of
//! the batch belongs to graph `graph_id[v]`; directed edge `i` carries a
//! message from `src[i]` to `dst[i]`. Undirected input edges appear once in
//! each direction.

mod aggregate;
mod batch;
mod encode;
mod model;

pub use aggregate::{aggregate, Aggregator};
pub use batch::{Graph, GraphBatch, InputSchema};
pub use encode::FeatureEncoder;
pub use model::{ModelConfig, ModelOutput, PhcModel, Readout, SkipMode};
