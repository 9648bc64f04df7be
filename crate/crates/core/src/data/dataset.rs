use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, InputSchema};

/// Per-node or per-edge features. An array of JSON integers is read as
/// categorical indices; an array containing a number written with a
/// fraction or exponent is continuous. The object form carries both.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawFeatures {
    Categorical(Vec<usize>),
    Continuous(Vec<f64>),
    Mixed {
        #[serde(default)]
        cat: Vec<usize>,
        #[serde(default)]
        cont: Vec<f64>,
    },
}

impl RawFeatures {
    fn split(self) -> (Vec<usize>, Vec<f64>) {
        match self {
            RawFeatures::Categorical(c) => (c, Vec::new()),
            RawFeatures::Continuous(x) => (Vec::new(), x),
            RawFeatures::Mixed { cat, cont } => (cat, cont),
        }
    }

    fn join(cat: &[usize], cont: &[f64]) -> RawFeatures {
        match (cat.is_empty(), cont.is_empty()) {
            (_, true) => RawFeatures::Categorical(cat.to_vec()),
            (true, false) => RawFeatures::Continuous(cont.to_vec()),
            (false, false) => RawFeatures::Mixed {
                cat: cat.to_vec(),
                cont: cont.to_vec(),
            },
        }
    }
}

/// A class index, or a list of real values where `null` marks a missing
/// label.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawTarget {
    Class(usize),
    Values(Vec<Option<f64>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawGraph {
    nodes: Vec<RawFeatures>,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    edge_feats: Vec<RawFeatures>,
    target: RawTarget,
}

/// Parses one JSON Lines record.
pub fn parse_graph(line: &str) -> Result<Graph> {
    let raw: RawGraph = serde_json::from_str(line).map_err(|e| Error::Dataset(e.to_string()))?;
    if raw.nodes.is_empty() {
        return Err(Error::Dataset("graph has no nodes".into()));
    }
    if !raw.edge_feats.is_empty() && raw.edge_feats.len() != raw.edges.len() {
        return Err(Error::Dataset(format!(
            "{} edge feature rows for {} edges",
            raw.edge_feats.len(),
            raw.edges.len()
        )));
    }
    let num_nodes = raw.nodes.len();
    let (node_cat, node_cont) = raw.nodes.into_iter().map(RawFeatures::split).unzip();
    let (edge_cat, edge_cont) = if raw.edge_feats.is_empty() {
        (vec![Vec::new(); raw.edges.len()], vec![Vec::new(); raw.edges.len()])
    } else {
        raw.edge_feats.into_iter().map(RawFeatures::split).unzip()
    };
    let target = match raw.target {
        RawTarget::Class(c) => vec![c as f64],
        RawTarget::Values(v) => v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect(),
    };
    let g = Graph {
        num_nodes,
        node_cat,
        node_cont,
        edges: raw.edges.iter().map(|e| (e[0], e[1])).collect(),
        edge_cat,
        edge_cont,
        target,
    };
    g.validate()?;
    Ok(g)
}

/// One JSON Lines record. Targets are written as value lists.
pub fn graph_to_json(g: &Graph) -> String {
    let has_edge_feats = g.edge_cat.iter().chain(g.edge_cat.iter()).any(|r| !r.is_empty())
        || g.edge_cont.iter().any(|r| !r.is_empty());
    let raw = RawGraph {
        nodes: g.node_cat.iter().zip(&g.node_cont).map(|(c, x)| RawFeatures::join(c, x)).collect(),
        edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
        edge_feats: if has_edge_feats {
            g.edge_cat.iter().zip(&g.edge_cont).map(|(c, x)| RawFeatures::join(c, x)).collect()
        } else {
            Vec::new()
        },
        target: RawTarget::Values(g.target.iter().map(|&t| (!t.is_nan()).then_some(t)).collect()),
    };
    serde_json::to_string(&raw).expect("graph records always serialize")
}

/// Graphs of a dataset file together with the inferred feature schema.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub schema: InputSchema,
}

impl Dataset {
    pub fn from_graphs(graphs: Vec<Graph>) -> Result<Dataset> {
        let schema = InputSchema::infer(&graphs)?;
        Ok(Dataset { graphs, schema })
    }

    /// Reads a JSON Lines file. Blank lines are skipped; errors name the
    /// offending line.
    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
        let mut graphs = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let g = parse_graph(&line).map_err(|e| Error::Dataset(format!("line {}: {}", i + 1, detail(&e))))?;
            graphs.push(g);
        }
        if graphs.is_empty() {
            return Err(Error::Dataset(format!("{}: empty dataset", path.display())));
        }
        let schema = InputSchema::infer(&graphs)?;
        for (i, g) in graphs.iter().enumerate() {
            schema.check(g).map_err(|e| Error::Dataset(format!("graph {}: {}", i + 1, detail(&e))))?;
        }
        Ok(Dataset { graphs, schema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_graphs(&self.graphs, path)
    }

    /// Human-readable summary of sizes and feature layout.
    pub fn report(&self) -> String {
        let nodes: usize = self.graphs.iter().map(|g| g.num_nodes).sum();
        let directed: usize = self.graphs.iter().map(|g| g.directed_edges().len()).sum();
        let widths: Vec<usize> = self.graphs.iter().map(|g| g.target.len()).collect();
        let (tmin, tmax) = (widths.iter().min().unwrap_or(&0), widths.iter().max().unwrap_or(&0));
        let s = &self.schema;
        let mut out = String::new();
        let _ = writeln!(out, "graphs: {}", self.graphs.len());
        let _ = writeln!(out, "nodes: {nodes}");
        let _ = writeln!(out, "directed edges: {directed}");
        let _ = writeln!(out, "node categorical vocab: {:?}", s.node_vocab);
        let _ = writeln!(out, "node continuous features: {}", s.node_cont);
        let _ = writeln!(out, "edge categorical vocab: {:?}", s.edge_vocab);
        let _ = writeln!(out, "edge continuous features: {}", s.edge_cont);
        let _ = writeln!(out, "target length: {tmin}..={tmax}");
        out
    }
}

fn detail(e: &Error) -> String {
    match e {
        Error::Dataset(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn write_graphs(graphs: &[Graph], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for g in graphs {
        writeln!(f, "{}", graph_to_json(g))?;
    }
    f.flush()?;
    Ok(())
}

/// Seeded shuffle of `0..len` cut into train / validation / test parts by
/// `fractions` (rounded; the test part takes the remainder).
pub fn split_indices(len: usize, fractions: [f64; 3], seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..len).collect();
    if fractions[0] < 1.0 {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let n_train = ((fractions[0] * len as f64).round() as usize).clamp(1.min(len), len);
    let n_val = ((fractions[1] * len as f64).round() as usize).min(len - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    [idx, val, test]
}
