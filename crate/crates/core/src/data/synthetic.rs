//! Seeded generators for small labelled graphs with exactly computed
//! targets.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::training::TaskKind;

pub const MIN_NODES: usize = 6;
pub const MAX_NODES: usize = 20;
/// Categorical node labels are drawn from `0..NODE_LABELS`.
pub const NODE_LABELS: usize = 4;
pub const EDGE_LABELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// A labelled cycle; the target counts edges whose endpoints share a
    /// node label plus the edges carrying edge label 0.
    RingRegression,
    /// A random tree with a few chords; the target is the triangle count.
    TriangleCount,
    /// A random forest; the target is 1 when the number of connected
    /// components is odd.
    ComponentParity,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::RingRegression => "ring-regression",
            SyntheticKind::TriangleCount => "triangle-count",
            SyntheticKind::ComponentParity => "component-parity",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            SyntheticKind::ComponentParity => TaskKind::Binary,
            _ => TaskKind::Regression,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring-regression" => Ok(SyntheticKind::RingRegression),
            "triangle-count" => Ok(SyntheticKind::TriangleCount),
            "component-parity" => Ok(SyntheticKind::ComponentParity),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// `size` graphs of `kind`; identical for identical seeds.
pub fn generate(kind: SyntheticKind, size: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| match kind {
            SyntheticKind::RingRegression => ring(&mut rng),
            SyntheticKind::TriangleCount => chorded_tree(&mut rng),
            SyntheticKind::ComponentParity => forest(&mut rng),
        })
        .collect()
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..NODE_LABELS)).collect()
}

fn ring(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.random_range(MIN_NODES..=MAX_NODES);
    let nodes = labels(rng, n);
    let edges: Vec<(usize, usize)> = (0..n).map(|v| (v, (v + 1) % n)).collect();
    let edge_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..EDGE_LABELS)).collect();
    let target = edges
        .iter()
        .zip(&edge_labels)
        .map(|(&(u, v), &l)| usize::from(nodes[u] == nodes[v]) + usize::from(l == 0))
        .sum::<usize>();
    Graph::labeled(&nodes, &edges, Some(&edge_labels), vec![target as f64])
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|v| (rng.random_range(0..v), v)).collect()
}

fn chorded_tree(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.random_range(MIN_NODES..=MAX_NODES);
    let nodes = labels(rng, n);
    let mut edges = random_tree(rng, n);
    let chords = rng.random_range(0..=4);
    let mut adj = adjacency(n, &edges);
    let mut added = 0;
    for _ in 0..100 {
        if added == chords {
            break;
        }
        // close a path a - c - b into a triangle
        let c = rng.random_range(0..n);
        let neigh: Vec<usize> = (0..n).filter(|&u| adj[c][u]).collect();
        let (Some(&a), Some(&b)) = (neigh.choose(rng), neigh.choose(rng)) else {
            continue;
        };
        if a == b || adj[a][b] {
            continue;
        }
        adj[a][b] = true;
        adj[b][a] = true;
        edges.push((a.min(b), a.max(b)));
        added += 1;
    }
    let target = count_triangles(n, &edges) as f64;
    Graph::labeled(&nodes, &edges, None, vec![target])
}

fn forest(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.random_range(MIN_NODES..=MAX_NODES);
    let nodes = labels(rng, n);
    let edges: Vec<(usize, usize)> = random_tree(rng, n)
        .into_iter()
        .filter(|_| rng.random_bool(0.75))
        .collect();
    let parity = (count_components(n, &edges) % 2) as f64;
    Graph::labeled(&nodes, &edges, None, vec![parity])
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in edges {
        if u != v {
            adj[u][v] = true;
            adj[v][u] = true;
        }
    }
    adj
}

/// Number of vertex triples that are pairwise adjacent.
pub fn count_triangles(n: usize, edges: &[(usize, usize)]) -> usize {
    let adj = adjacency(n, edges);
    let mut count = 0;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                if adj[a][b] && adj[b][c] && adj[a][c] {
                    count += 1;
                }
            }
        }
    }
    count
}

pub fn count_components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut components = n;
    for &(u, v) in edges {
        let (ru, rv) = (root(&mut parent, u), root(&mut parent, v));
        if ru != rv {
            parent[ru] = rv;
            components -= 1;
        }
    }
    components
}

/// Fixed 8-node graph with node and edge labels, used for gradient checks.
pub fn bundled_graph() -> Graph {
    let nodes = [0, 1, 2, 3, 0, 1, 2, 3];
    let edges = [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 6), (6, 3), (6, 7)];
    let edge_labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
    Graph::labeled(&nodes, &edges, Some(&edge_labels), vec![1.5])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::graph_to_json;

    #[test]
    fn triangles_of_small_graphs() {
        let k4: Vec<(usize, usize)> = (0..4).flat_map(|a| (a + 1..4).map(move |b| (a, b))).collect();
        assert_eq!(count_triangles(4, &k4), 4);
        let k6: Vec<(usize, usize)> = (0..6).flat_map(|a| (a + 1..6).map(move |b| (a, b))).collect();
        assert_eq!(count_triangles(6, &k6), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..30 {
            assert_eq!(count_triangles(n, &random_tree(&mut rng, n)), 0);
        }
        assert_eq!(count_triangles(3, &[(0, 1), (1, 2), (2, 0), (0, 0)]), 1);
    }

    #[test]
    fn components() {
        assert_eq!(count_components(5, &[]), 5);
        assert_eq!(count_components(5, &[(0, 1), (3, 4)]), 3);
        assert_eq!(count_components(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]), 1);
    }

    #[test]
    fn generated_graphs_are_valid_and_in_range() {
        for kind in [SyntheticKind::RingRegression, SyntheticKind::TriangleCount, SyntheticKind::ComponentParity] {
            let graphs = generate(kind, 200, 3);
            assert_eq!(graphs.len(), 200);
            for g in &graphs {
                g.validate().unwrap();
                assert!((MIN_NODES..=MAX_NODES).contains(&g.num_nodes));
                assert!(g.node_cat.iter().all(|r| r.len() == 1 && r[0] < NODE_LABELS));
            }
            if kind == SyntheticKind::TriangleCount {
                assert!(graphs.iter().all(|g| g.target[0] == count_triangles(g.num_nodes, &g.edges) as f64));
                assert!(graphs.iter().any(|g| g.target[0] >= 2.0));
                assert!(graphs.iter().any(|g| g.target[0] == 0.0));
            }
            if kind == SyntheticKind::ComponentParity {
                assert!(graphs.iter().all(|g| g.target[0] == (count_components(g.num_nodes, &g.edges) % 2) as f64));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let text = |seed| {
            generate(SyntheticKind::TriangleCount, 50, seed)
                .iter()
                .map(graph_to_json)
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(text(9), text(9));
        assert_ne!(text(9), text(10));
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in [SyntheticKind::RingRegression, SyntheticKind::TriangleCount, SyntheticKind::ComponentParity] {
            assert_eq!(kind.as_str().parse::<SyntheticKind>().unwrap(), kind);
        }
        assert!("squares".parse::<SyntheticKind>().is_err());
    }
}
