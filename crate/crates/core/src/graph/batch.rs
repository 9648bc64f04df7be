use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One graph with undirected edges, as read from a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    /// Per node, one vocabulary index per categorical field.
    pub node_cat: Vec<Vec<usize>>,
    /// Per node continuous features (empty inner vectors when absent).
    pub node_cont: Vec<Vec<f64>>,
    /// Undirected edges; each expands to both orientations when batched.
    pub edges: Vec<(usize, usize)>,
    pub edge_cat: Vec<Vec<usize>>,
    pub edge_cont: Vec<Vec<f64>>,
    /// Graph-level target vector, or one value per node for node tasks.
    /// Missing labels are NaN. Class labels are stored as integral floats.
    pub target: Vec<f64>,
}

impl Graph {
    /// A graph with categorical node labels (one field) and optional
    /// categorical edge labels (one field).
    pub fn labeled(labels: &[usize], edges: &[(usize, usize)], edge_labels: Option<&[usize]>, target: Vec<f64>) -> Graph {
        let num_edges = edges.len();
        Graph {
            num_nodes: labels.len(),
            node_cat: labels.iter().map(|&l| vec![l]).collect(),
            node_cont: vec![Vec::new(); labels.len()],
            edges: edges.to_vec(),
            edge_cat: match edge_labels {
                Some(l) => l.iter().map(|&x| vec![x]).collect(),
                None => vec![Vec::new(); num_edges],
            },
            edge_cont: vec![Vec::new(); num_edges],
            target,
        }
    }

    /// Checks internal consistency: endpoint bounds, one feature row per
    /// node/edge, equal field counts across rows.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset(msg));
        if self.num_nodes == 0 {
            return bad("graph has no nodes".into());
        }
        if self.node_cat.len() != self.num_nodes || self.node_cont.len() != self.num_nodes {
            return bad("node feature rows do not match node count".into());
        }
        if self.edge_cat.len() != self.edges.len() || self.edge_cont.len() != self.edges.len() {
            return bad("edge feature rows do not match edge count".into());
        }
        for &(u, v) in &self.edges {
            if u >= self.num_nodes || v >= self.num_nodes {
                return Err(Error::OutOfBounds(format!(
                    "edge [{u},{v}] with {} nodes",
                    self.num_nodes
                )));
            }
        }
        uniform_len(&self.node_cat, "node categorical")?;
        uniform_len(&self.node_cont, "node continuous")?;
        uniform_len(&self.edge_cat, "edge categorical")?;
        uniform_len(&self.edge_cont, "edge continuous")?;
        if self.node_cont.iter().chain(&self.edge_cont).flatten().any(|v| !v.is_finite()) {
            return bad("non-finite continuous feature".into());
        }
        Ok(())
    }

    /// Directed edge list with both orientations of every undirected edge.
    /// A self-loop contributes a single directed edge. Each directed edge
    /// remembers the undirected edge it came from.
    pub fn directed_edges(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            out.push((u, v, e));
            if u != v {
                out.push((v, u, e));
            }
        }
        out
    }
}

fn uniform_len<T>(rows: &[Vec<T>], what: &str) -> Result<()> {
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(Error::Dataset(format!("{what} features have inconsistent lengths")));
        }
    }
    Ok(())
}

/// Feature layout a model is built for. Vocabulary sizes bound the
/// categorical indices of every field.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InputSchema {
    pub node_vocab: Vec<usize>,
    pub node_cont: usize,
    pub edge_vocab: Vec<usize>,
    pub edge_cont: usize,
}

impl InputSchema {
    /// Smallest schema that covers every graph in `graphs`.
    pub fn infer<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Result<InputSchema> {
        let mut schema: Option<InputSchema> = None;
        for g in graphs {
            let first_len = |rows: &[Vec<usize>]| rows.first().map_or(0, Vec::len);
            let local = InputSchema {
                node_vocab: vocab(&g.node_cat, first_len(&g.node_cat)),
                node_cont: g.node_cont.first().map_or(0, Vec::len),
                edge_vocab: vocab(&g.edge_cat, first_len(&g.edge_cat)),
                edge_cont: g.edge_cont.first().map_or(0, Vec::len),
            };
            schema = Some(match schema {
                None => local,
                Some(s) => s.merge(local, g.edges.is_empty())?,
            });
        }
        schema.ok_or_else(|| Error::Dataset("empty dataset".into()))
    }

    fn merge(mut self, other: InputSchema, other_edgeless: bool) -> Result<InputSchema> {
        if self.node_vocab.len() != other.node_vocab.len() || self.node_cont != other.node_cont {
            return Err(Error::Dataset("node feature layout differs between graphs".into()));
        }
        max_into(&mut self.node_vocab, &other.node_vocab);
        // edgeless graphs carry no information about edge features
        if !other_edgeless {
            let self_edgeless = self.edge_vocab.is_empty() && self.edge_cont == 0;
            if self_edgeless {
                self.edge_vocab = other.edge_vocab;
                self.edge_cont = other.edge_cont;
            } else if self.edge_vocab.len() != other.edge_vocab.len() || self.edge_cont != other.edge_cont {
                return Err(Error::Dataset("edge feature layout differs between graphs".into()));
            } else {
                max_into(&mut self.edge_vocab, &other.edge_vocab);
            }
        }
        Ok(self)
    }

    /// `key = value` lines, read back by [`InputSchema::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "node_vocab = {}\nnode_cont = {}\nedge_vocab = {}\nedge_cont = {}\n",
            list(&self.node_vocab),
            self.node_cont,
            list(&self.edge_vocab),
            self.edge_cont
        )
    }

    pub fn from_text(text: &str) -> Result<InputSchema> {
        let bad = |line: &str| Error::invalid(format!("malformed schema line `{line}`"));
        let mut s = InputSchema::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            let v = v.trim();
            let list = || -> Result<Vec<usize>> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',').map(|x| x.trim().parse().map_err(|_| bad(line))).collect()
            };
            match k.trim() {
                "node_vocab" => s.node_vocab = list()?,
                "edge_vocab" => s.edge_vocab = list()?,
                "node_cont" => s.node_cont = v.parse().map_err(|_| bad(line))?,
                "edge_cont" => s.edge_cont = v.parse().map_err(|_| bad(line))?,
                _ => return Err(bad(line)),
            }
        }
        Ok(s)
    }

    pub fn has_edge_features(&self) -> bool {
        !self.edge_vocab.is_empty() || self.edge_cont > 0
    }

    /// Checks that `g` fits this schema (field counts and index bounds).
    pub fn check(&self, g: &Graph) -> Result<()> {
        check_rows(&g.node_cat, &self.node_vocab, "node")?;
        check_rows(&g.edge_cat, &self.edge_vocab, "edge")?;
        if g.node_cont.iter().any(|r| r.len() != self.node_cont) {
            return Err(Error::Dataset(format!("expected {} continuous node features", self.node_cont)));
        }
        if g.edge_cont.iter().any(|r| r.len() != self.edge_cont) {
            return Err(Error::Dataset(format!("expected {} continuous edge features", self.edge_cont)));
        }
        Ok(())
    }
}

fn vocab(rows: &[Vec<usize>], fields: usize) -> Vec<usize> {
    let mut v = vec![0; fields];
    for r in rows {
        for (f, &i) in r.iter().enumerate().take(fields) {
            v[f] = v[f].max(i + 1);
        }
    }
    v
}

fn max_into(a: &mut [usize], b: &[usize]) {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x = (*x).max(y));
}

fn check_rows(rows: &[Vec<usize>], vocab: &[usize], what: &str) -> Result<()> {
    for r in rows {
        if r.len() != vocab.len() {
            return Err(Error::Dataset(format!(
                "expected {} categorical {what} fields, got {}",
                vocab.len(),
                r.len()
            )));
        }
        for (f, (&i, &size)) in r.iter().zip(vocab).enumerate() {
            if i >= size {
                return Err(Error::OutOfBounds(format!(
                    "{what} field {f}: index {i} outside vocabulary of {size}"
                )));
            }
        }
    }
    Ok(())
}

/// Disjoint union of several graphs, with directed edges materialized.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub num_nodes: usize,
    pub num_graphs: usize,
    /// One index column per categorical node field.
    pub node_cat: Vec<Arc<[usize]>>,
    /// `num_nodes × c`, absent when there are no continuous node features.
    pub node_cont: Option<Tensor>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub edge_cat: Vec<Arc<[usize]>>,
    pub edge_cont: Option<Tensor>,
    /// Graph index of every node.
    pub graph_id: Arc<[usize]>,
    /// Graph-level targets (`num_graphs × t`) or node-level targets
    /// (`num_nodes × 1`), depending on `node_level`.
    pub targets: Tensor,
    pub node_level: bool,
}

impl GraphBatch {
    pub fn collate(graphs: &[&Graph], node_level: bool) -> Result<GraphBatch> {
        let first = graphs.first().ok_or_else(|| Error::invalid("cannot batch zero graphs"))?;
        let node_fields = first.node_cat.first().map_or(0, Vec::len);
        let node_cont_dim = first.node_cont.first().map_or(0, Vec::len);
        let edge_source = graphs.iter().find(|g| !g.edges.is_empty());
        let edge_fields = edge_source.map_or(0, |g| g.edge_cat[0].len());
        let edge_cont_dim = edge_source.map_or(0, |g| g.edge_cont[0].len());
        let target_dim = if node_level { 1 } else { first.target.len() };

        let mut node_cat = vec![Vec::new(); node_fields];
        let mut node_cont = Vec::new();
        let mut edge_cat = vec![Vec::new(); edge_fields];
        let mut edge_cont = Vec::new();
        let (mut src, mut dst, mut graph_id, mut targets) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            g.validate()?;
            let wrong_layout = g.node_cat.iter().any(|r| r.len() != node_fields)
                || g.node_cont.iter().any(|r| r.len() != node_cont_dim)
                || g.edge_cat.iter().any(|r| r.len() != edge_fields)
                || g.edge_cont.iter().any(|r| r.len() != edge_cont_dim);
            if wrong_layout {
                return Err(Error::Dataset(format!("graph {gi} has a different feature layout")));
            }
            let expect = if node_level { g.num_nodes } else { target_dim };
            if g.target.len() != expect {
                return Err(Error::Dataset(format!(
                    "graph {gi}: target length {} (expected {expect})",
                    g.target.len()
                )));
            }
            for v in 0..g.num_nodes {
                for (f, col) in node_cat.iter_mut().enumerate() {
                    col.push(g.node_cat[v][f]);
                }
                node_cont.extend_from_slice(&g.node_cont[v]);
                graph_id.push(gi);
            }
            for (u, v, e) in g.directed_edges() {
                src.push(offset + u);
                dst.push(offset + v);
                for (f, col) in edge_cat.iter_mut().enumerate() {
                    col.push(g.edge_cat[e][f]);
                }
                edge_cont.extend_from_slice(&g.edge_cont[e]);
            }
            targets.extend_from_slice(&g.target);
            offset += g.num_nodes;
        }
        let num_edges = src.len();
        let rows = if node_level { offset } else { graphs.len() };
        Ok(GraphBatch {
            num_nodes: offset,
            num_graphs: graphs.len(),
            node_cat: node_cat.into_iter().map(Arc::from).collect(),
            node_cont: (node_cont_dim > 0).then(|| Tensor::new(&[offset, node_cont_dim], node_cont)).transpose()?,
            src: src.into(),
            dst: dst.into(),
            edge_cat: edge_cat.into_iter().map(Arc::from).collect(),
            edge_cont: (edge_cont_dim > 0 && num_edges > 0)
                .then(|| Tensor::new(&[num_edges, edge_cont_dim], edge_cont))
                .transpose()?,
            graph_id: graph_id.into(),
            targets: Tensor::new(&[rows, target_dim], targets)?,
            node_level,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}
