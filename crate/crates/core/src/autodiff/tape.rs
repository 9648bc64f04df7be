use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied within each segment by [`Tape::segment_reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentReduce {
    Sum,
    Mean,
    Min,
    Max,
}

/// Batch statistics produced by a train-mode [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`b − 1`) variance, the quantity tracked by running averages.
    pub var_unbiased: Vec<f64>,
}

type Index = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Kron(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Select(Var, usize),
    Concat(Vec<Var>),
    TileCols(Var, usize),
    Gather(Var, Index),
    Segment {
        x: Var,
        seg: Index,
        kind: SegmentReduce,
        /// Mean: per-segment counts. Min/Max: winning row per (segment, channel).
        aux: Vec<usize>,
    },
    SegmentSoftmax(Var, Index),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GroupLpNorm(Var, f64),
    SigmoidBce {
        logits: Var,
        targets: Vec<f64>,
        count: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Nodes are appended as they are
/// computed, so every node's inputs precede it.
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every node reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn check_index(idx: &[usize], bound: usize, what: &str) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::OutOfBounds(format!(
            "{what}: index {bad} >= {bound}"
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance to a non-differentiable point (relu/abs at zero,
    /// min/max ties, zero-norm groups) seen so far on this tape.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn row_vec_dims(&self, x: Var, v: Var, name: &str) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2()?;
        if self.shape(v) != [c] {
            return Err(Error::shape(format!(
                "{name}: row vector {:?} against matrix {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok((r, c))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).kronecker(self.value(b))?;
        self.push(out, Op::Kron(a, b), &[a, b], "kron")
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push(out, Op::Div(a, b), &[a, b], "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let out = self.value(a).scale(c);
        self.push(out, Op::ScaleBy(a, s), &[a, s], "scale_by")
    }

    /// `x[i, j] + v[j]` for a matrix `x` and a vector `v`.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, c) = self.row_vec_dims(x, v, "add_row_vec")?;
        let vd = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&vd) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowVec(x, v), &[x, v], "add_row_vec")
    }

    /// `x[i, j] · v[j]` for a matrix `x` and a vector `v`.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, c) = self.row_vec_dims(x, v, "mul_row_vec")?;
        let vd = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(&vd) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRowVec(x, v), &[x, v], "mul_row_vec")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let margin = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.kink_margin = self.kink_margin.min(margin);
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a], "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a], "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let margin = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.kink_margin = self.kink_margin.min(margin);
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a], "abs")
    }

    // ----- reductions and shape -------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push(out, Op::Mean(a), &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let out = self.value(a).select(index)?;
        self.push(out, Op::Select(a, index), &[a], "select")
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match trailing extents {:?}",
                    s, tail
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// Repeats the columns of `x` (`r × m`) `times` times: `r × (times·m)`.
    /// Used to broadcast one value per channel across all algebra components.
    pub fn tile_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * m * times);
        for row in 0..r {
            let s = &src[row * m..(row + 1) * m];
            for _ in 0..times {
                out.extend_from_slice(s);
            }
        }
        let out = Tensor::new(&[r, m * times], out)?;
        self.push(out, Op::TileCols(x, times), &[x], "tile_cols")
    }

    /// Row gather: `out[i] = table[index[i]]`.
    pub fn gather(&mut self, table: Var, index: Arc<[usize]>) -> Result<Var> {
        let (rows, c) = self.value(table).dims2()?;
        check_index(&index, rows, "gather")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[index.len(), c], out)?;
        self.push(out, Op::Gather(table, index), &[table], "gather")
    }

    /// Reduces the rows of `x` (`len(seg) × c`) into `num_segments` rows.
    /// Empty segments produce zeros. Min/max ties go to the lowest row.
    pub fn segment_reduce(
        &mut self,
        x: Var,
        seg: Arc<[usize]>,
        num_segments: usize,
        kind: SegmentReduce,
    ) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if seg.len() != rows {
            return Err(Error::shape(format!(
                "segment_reduce: {} segment ids for {} rows",
                seg.len(),
                rows
            )));
        }
        check_index(&seg, num_segments, "segment_reduce")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; num_segments * c];
        let aux = match kind {
            SegmentReduce::Sum | SegmentReduce::Mean => {
                let mut counts = vec![0usize; num_segments];
                for (e, &s) in seg.iter().enumerate() {
                    counts[s] += 1;
                    for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(&src[e * c..(e + 1) * c]) {
                        *o += v;
                    }
                }
                if kind == SegmentReduce::Mean {
                    for (s, &n) in counts.iter().enumerate() {
                        if n > 0 {
                            for o in &mut out[s * c..(s + 1) * c] {
                                *o /= n as f64;
                            }
                        }
                    }
                }
                counts
            }
            SegmentReduce::Min | SegmentReduce::Max => {
                let better = |cand: f64, cur: f64| match kind {
                    SegmentReduce::Max => cand > cur,
                    _ => cand < cur,
                };
                let mut arg = vec![usize::MAX; num_segments * c];
                // runner-up per slot, for the kink margin
                let mut second = vec![f64::NAN; num_segments * c];
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        let slot = s * c + j;
                        let v = src[e * c + j];
                        if arg[slot] == usize::MAX {
                            arg[slot] = e;
                            out[slot] = v;
                        } else if better(v, out[slot]) {
                            second[slot] = out[slot];
                            arg[slot] = e;
                            out[slot] = v;
                        } else if second[slot].is_nan() || better(v, second[slot]) || v == second[slot] {
                            second[slot] = v;
                        }
                    }
                }
                let margin = out
                    .iter()
                    .zip(&second)
                    .filter(|(_, s)| !s.is_nan())
                    .fold(f64::INFINITY, |m, (b, s)| m.min((b - s).abs()));
                self.kink_margin = self.kink_margin.min(margin);
                arg
            }
        };
        let out = Tensor::new(&[num_segments, c], out)?;
        self.push(out, Op::Segment { x, seg, kind, aux }, &[x], "segment_reduce")
    }

    /// Channelwise softmax of the rows of `x` within each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if seg.len() != rows {
            return Err(Error::shape(format!(
                "segment_softmax: {} segment ids for {} rows",
                seg.len(),
                rows
            )));
        }
        check_index(&seg, num_segments, "segment_softmax")?;
        let src = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; num_segments * c];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let m = &mut max[s * c + j];
                *m = m.max(src[e * c + j]);
            }
        }
        let mut out = vec![0.0; rows * c];
        let mut denom = vec![0.0; num_segments * c];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let v = (src[e * c + j] - max[s * c + j]).exp();
                out[e * c + j] = v;
                denom[s * c + j] += v;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..c {
                out[e * c + j] /= denom[s * c + j];
            }
        }
        let out = Tensor::new(&[rows, c], out)?;
        self.push(out, Op::SegmentSoftmax(x, seg), &[x], "segment_softmax")
    }

    /// Train-mode batch normalization over the rows of `x` (`b × c`), one
    /// statistic per column: `γ · (x − μ) / sqrt(σ² + ε) + β`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c) = self.row_vec_dims(x, gamma, "batch_norm")?;
        self.row_vec_dims(x, beta, "batch_norm")?;
        if b < 2 {
            return Err(Error::invalid(format!(
                "batch_norm in train mode needs at least 2 rows, got {b}"
            )));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / b as f64 + eps).sqrt()).collect();
        let var_unbiased = var.iter().map(|v| v / (b - 1) as f64).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; b * c];
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                let h = (src[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::new(&[b, c], out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Column-wise `l_p` norm of a `g × c` matrix: `out[j] = (Σ_i |x[i,j]|^p)^(1/p)`.
    pub fn group_lp_norm(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(p >= 1.0) {
            return Err(Error::invalid(format!("l_p norm needs p >= 1, got {p}")));
        }
        let (g, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        let pow = |v: f64| match p {
            1.0 => v.abs(),
            2.0 => v * v,
            _ => v.abs().powf(p),
        };
        for i in 0..g {
            for j in 0..c {
                out[j] += pow(src[i * c + j]);
            }
        }
        match p {
            1.0 => {}
            2.0 => out.iter_mut().for_each(|o| *o = o.sqrt()),
            _ => out.iter_mut().for_each(|o| *o = o.powf(1.0 / p)),
        }
        let mut margin = out.iter().fold(f64::INFINITY, |m, &o| m.min(o));
        if p == 1.0 {
            margin = src.iter().fold(margin, |m, x| m.min(x.abs()));
        }
        self.kink_margin = self.kink_margin.min(margin);
        let out = Tensor::vector(out);
        self.push(out, Op::GroupLpNorm(x, p), &[x], "group_lp_norm")
    }

    /// Mean sigmoid cross-entropy over all entries whose target is not NaN.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(format!(
                "sigmoid_bce: logits {:?} vs targets {:?}",
                self.shape(logits),
                targets.shape()
            )));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0;
        for (&zi, &y) in z.iter().zip(targets.data()) {
            if y.is_nan() {
                continue;
            }
            total += zi.max(0.0) - zi * y + (-zi.abs()).exp().ln_1p();
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("every target is masked; the mean loss is undefined"));
        }
        let out = Tensor::scalar(total / count as f64);
        self.push(
            out,
            Op::SigmoidBce {
                logits,
                targets: targets.data().to_vec(),
                count,
            },
            &[logits],
            "sigmoid_bce",
        )
    }

    /// Mean softmax cross-entropy of `b × classes` logits against class labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, classes) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::shape(format!(
                "softmax_ce: {} labels for {} rows",
                labels.len(),
                b
            )));
        }
        if b == 0 {
            return Err(Error::invalid("softmax_ce on an empty batch"));
        }
        check_index(labels, classes, "softmax_ce label")?;
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * classes];
        let mut total = 0.0;
        for i in 0..b {
            let row = &z[i * classes..(i + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..classes {
                probs[i * classes + j] = (row[j] - m).exp() / s;
            }
            total += m + s.ln() - row[labels[i]];
        }
        let out = Tensor::scalar(total / b as f64);
        self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "softmax_ce",
        )
    }

    // ----- reverse pass ---------------------------------------------------

    /// Propagates `d loss / d v` to every node that requires a gradient.
    /// Values used more than once receive the sum of their adjoints.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::row_major(gd, n), MatRef::transposed(val(*b).data(), n), &mut da, false);
                    send(*a, Tensor::new(&[m, k], da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, MatRef::transposed(val(*a).data(), k), MatRef::row_major(gd, n), &mut db, false);
                    send(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()?),
            Op::Kron(a, b) => {
                let x = val(*a);
                let y = val(*b);
                let (ra, ca) = x.dims2()?;
                let (p, q) = y.dims2()?;
                let cols = ca * q;
                if wants(*a) {
                    let mut dx = vec![0.0; ra * ca];
                    for i in 0..ra {
                        for j in 0..ca {
                            let mut acc = 0.0;
                            for r in 0..p {
                                let grow = &gd[(i * p + r) * cols + j * q..][..q];
                                let yrow = &y.data()[r * q..(r + 1) * q];
                                acc += grow.iter().zip(yrow).map(|(u, w)| u * w).sum::<f64>();
                            }
                            dx[i * ca + j] = acc;
                        }
                    }
                    send(*a, Tensor::new(&[ra, ca], dx)?);
                }
                if wants(*b) {
                    let mut dy = vec![0.0; p * q];
                    for i in 0..ra {
                        for j in 0..ca {
                            let xv = x.data()[i * ca + j];
                            if xv == 0.0 {
                                continue;
                            }
                            for r in 0..p {
                                let grow = &gd[(i * p + r) * cols + j * q..][..q];
                                for (d, u) in dy[r * q..(r + 1) * q].iter_mut().zip(grow) {
                                    *d += xv * u;
                                }
                            }
                        }
                    }
                    send(*b, Tensor::new(&[p, q], dy)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |u, w| u * w)?);
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |u, w| u * w)?);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    send(*a, g.zip_map(bv, |u, w| u / w)?);
                }
                if wants(*b) {
                    let av = val(*a);
                    let mut db = g.zip_map(av, |u, x| u * x)?;
                    for (d, w) in db.data_mut().iter_mut().zip(bv.data()) {
                        *d = -*d / (w * w);
                    }
                    send(*b, db);
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::ScaleBy(a, s) => {
                let c = val(*s).item()?;
                if wants(*a) {
                    send(*a, g.scale(c));
                }
                if wants(*s) {
                    let ds: f64 = gd.iter().zip(val(*a).data()).map(|(u, x)| u * x).sum();
                    send(*s, Tensor::new(val(*s).shape(), vec![ds])?);
                }
            }
            Op::AddRowVec(x, v) => {
                send(*x, g.clone());
                if wants(*v) {
                    let c = val(*v).numel();
                    let mut dv = vec![0.0; c];
                    for row in gd.chunks(c.max(1)) {
                        for (d, u) in dv.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    send(*v, Tensor::vector(dv));
                }
            }
            Op::MulRowVec(x, v) => {
                let vv = val(*v).data();
                let c = vv.len();
                if wants(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(c.max(1)) {
                        for (d, w) in row.iter_mut().zip(vv) {
                            *d *= w;
                        }
                    }
                    send(*x, dx);
                }
                if wants(*v) {
                    let mut dv = vec![0.0; c];
                    for (grow, xrow) in gd.chunks(c.max(1)).zip(val(*x).data().chunks(c.max(1))) {
                        for j in 0..c {
                            dv[j] += grow[j] * xrow[j];
                        }
                    }
                    send(*v, Tensor::vector(dv));
                }
            }
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 })?),
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(*a, g.zip_map(y, |u, s| u * s * (1.0 - s))?);
            }
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |u, e| u * e)?),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |u, x| u / x)?),
            Op::Abs(a) => send(
                *a,
                g.zip_map(val(*a), |u, x| {
                    if x > 0.0 {
                        u
                    } else if x < 0.0 {
                        -u
                    } else {
                        0.0
                    }
                })?,
            ),
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                send(*a, Tensor::full(val(*a).shape(), gd[0] / n));
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
            Op::Select(a, index) => {
                let shape = val(*a).shape();
                let stride = g.numel();
                let mut d = vec![0.0; val(*a).numel()];
                d[index * stride..(index + 1) * stride].copy_from_slice(gd);
                send(*a, Tensor::new(shape, d)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        send(p, Tensor::new(val(p).shape(), gd[offset..offset + n].to_vec())?);
                    }
                    offset += n;
                }
            }
            Op::TileCols(x, times) => {
                let (r, m) = val(*x).dims2()?;
                let mut d = vec![0.0; r * m];
                for row in 0..r {
                    for t in 0..*times {
                        let src = &gd[row * m * times + t * m..][..m];
                        for (o, s) in d[row * m..(row + 1) * m].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                send(*x, Tensor::new(&[r, m], d)?);
            }
            Op::Gather(table, index) => {
                let (rows, c) = val(*table).dims2()?;
                let mut d = vec![0.0; rows * c];
                for (i, &r) in index.iter().enumerate() {
                    for (o, s) in d[r * c..(r + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                        *o += s;
                    }
                }
                send(*table, Tensor::new(&[rows, c], d)?);
            }
            Op::Segment { x, seg, kind, aux } => {
                let (rows, c) = val(*x).dims2()?;
                let mut d = vec![0.0; rows * c];
                match kind {
                    SegmentReduce::Sum | SegmentReduce::Mean => {
                        for (e, &s) in seg.iter().enumerate() {
                            let scale = if *kind == SegmentReduce::Mean {
                                1.0 / aux[s] as f64
                            } else {
                                1.0
                            };
                            for j in 0..c {
                                d[e * c + j] = gd[s * c + j] * scale;
                            }
                        }
                    }
                    SegmentReduce::Min | SegmentReduce::Max => {
                        for (slot, &e) in aux.iter().enumerate() {
                            if e != usize::MAX {
                                let j = slot % c;
                                d[e * c + j] += gd[slot];
                            }
                        }
                    }
                }
                send(*x, Tensor::new(&[rows, c], d)?);
            }
            Op::SegmentSoftmax(x, seg) => {
                let (rows, c) = val(*x).dims2()?;
                let y = node.value.data();
                let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; segments * c];
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += y[e * c + j] * gd[e * c + j];
                    }
                }
                let mut d = vec![0.0; rows * c];
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        d[e * c + j] = y[e * c + j] * (gd[e * c + j] - dot[s * c + j]);
                    }
                }
                send(*x, Tensor::new(&[rows, c], d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c) = val(*x).dims2()?;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..b {
                    for j in 0..c {
                        dgamma[j] += gd[i * c + j] * xhat[i * c + j];
                        dbeta[j] += gd[i * c + j];
                    }
                }
                if wants(*x) {
                    let bf = b as f64;
                    let mut dx = vec![0.0; b * c];
                    for i in 0..b {
                        for j in 0..c {
                            // dxhat = g·γ; sums over the batch are dbeta·γ and dgamma·γ
                            let dxh = gd[i * c + j] * gam[j];
                            dx[i * c + j] = inv_std[j] / bf
                                * (bf * dxh - dbeta[j] * gam[j] - xhat[i * c + j] * dgamma[j] * gam[j]);
                        }
                    }
                    send(*x, Tensor::new(&[b, c], dx)?);
                }
                send(*gamma, Tensor::vector(dgamma));
                send(*beta, Tensor::vector(dbeta));
            }
            Op::GroupLpNorm(x, p) => {
                let (gr, c) = val(*x).dims2()?;
                let xv = val(*x).data();
                let norms = node.value.data();
                let mut d = vec![0.0; gr * c];
                for i in 0..gr {
                    for j in 0..c {
                        let v = xv[i * c + j];
                        if norms[j] > 0.0 && v != 0.0 {
                            d[i * c + j] = gd[j]
                                * match *p {
                                    1.0 => v.signum(),
                                    2.0 => v / norms[j],
                                    _ => v.signum() * (v.abs() / norms[j]).powf(p - 1.0),
                                };
                        }
                    }
                }
                send(*x, Tensor::new(&[gr, c], d)?);
            }
            Op::SigmoidBce {
                logits,
                targets,
                count,
            } => {
                let z = val(*logits);
                let scale = gd[0] / *count as f64;
                let d = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &y)| if y.is_nan() { 0.0 } else { (sigmoid(zi) - y) * scale })
                    .collect();
                send(*logits, Tensor::new(z.shape(), d)?);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let (b, classes) = val(*logits).dims2()?;
                let scale = gd[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] -= scale;
                }
                send(*logits, Tensor::new(&[b, classes], d)?);
            }
        }
        Ok(())
    }
}
