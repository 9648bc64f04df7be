//! Dataset files and synthetic graph generators.
//!
//! Datasets are JSON Lines: one graph per line with `nodes` (per-node
//! feature arrays), `edges` (undirected `[u, v]` pairs), optional
//! `edge_feats`, and `target`.

mod dataset;
mod synthetic;

pub use dataset::{graph_to_json, parse_graph, split_indices, write_graphs, Dataset};
pub use synthetic::{
    bundled_graph, count_components, count_triangles, generate, SyntheticKind, EDGE_LABELS, MAX_NODES, MIN_NODES,
    NODE_LABELS,
};
