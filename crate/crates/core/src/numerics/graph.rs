//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward pass is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{as_matrix, layer_norm_rows, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulGroups(Var, Var, usize),
    AddGroups(Var, Var, usize),
    AddTiled(Var, Var),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatGroups(Var, usize, Var, usize),
    SliceGroups(Var, usize, usize, usize),
    LayerNorm(Var, Vec<f64>),
    Silu(Var),
    Gelu(Var),
    Attention {
        qkv: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when no path reaches it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        let value = value.check_finite(what)?;
        let needs_grad = self.op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_parents(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulGroups(a, b, _)
            | Op::AddGroups(a, b, _)
            | Op::AddTiled(a, b)
            | Op::ConcatGroups(a, _, b, _) => vec![a, b],
            Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::RepeatRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::SliceGroups(a, _, _, _)
            | Op::LayerNorm(a, _)
            | Op::Silu(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Attention { qkv, .. } => vec![qkv],
        }
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("graph leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Arc<Tensor>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Result<Var> {
        self.leaf(value.into(), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::numerics::tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k), "scale")
    }

    /// `a[n×m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        let m = av.cols();
        if bv.len() != m {
            return Err(Error::Dimension(format!(
                "bias of {} entries for {m} columns",
                bv.len()
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias), "add_bias")
    }

    fn group_check(&self, a: Var, v: Var, group: usize) -> Result<(usize, usize)> {
        let (rows, m) = as_matrix(self.value(a))?;
        let (g, m2) = as_matrix(self.value(v))?;
        if m != m2 || group == 0 || g * group != rows {
            return Err(Error::Dimension(format!(
                "grouped broadcast of {:?} over {:?} with group size {group}",
                self.value(v).shape(),
                self.value(a).shape()
            )));
        }
        Ok((g, m))
    }

    /// Row `r` of `a` multiplied elementwise by row `r / group` of `v`.
    pub fn mul_groups(&mut self, a: Var, v: Var, group: usize) -> Result<Var> {
        let (_, m) = self.group_check(a, v, group)?;
        let vv = self.value(v).data();
        let mut out = self.value(a).clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            let s = &vv[(r / group) * m..(r / group + 1) * m];
            for (o, k) in row.iter_mut().zip(s) {
                *o *= k;
            }
        }
        self.push(out, Op::MulGroups(a, v, group), "mul_groups")
    }

    /// Row `r` of `a` plus row `r / group` of `v`.
    pub fn add_groups(&mut self, a: Var, v: Var, group: usize) -> Result<Var> {
        let (_, m) = self.group_check(a, v, group)?;
        let vv = self.value(v).data();
        let mut out = self.value(a).clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            let s = &vv[(r / group) * m..(r / group + 1) * m];
            for (o, k) in row.iter_mut().zip(s) {
                *o += k;
            }
        }
        self.push(out, Op::AddGroups(a, v, group), "add_groups")
    }

    /// Row `r` of `a[G·T×m]` plus row `r mod T` of `tile[T×m]`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var> {
        let (rows, m) = as_matrix(self.value(a))?;
        let (t, m2) = as_matrix(self.value(tile))?;
        if m != m2 || rows % t != 0 {
            return Err(Error::Dimension("tiled add shape mismatch".into()));
        }
        let tv = self.value(tile).data();
        let mut out = self.value(a).clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            let s = &tv[(r % t) * m..(r % t + 1) * m];
            for (o, k) in row.iter_mut().zip(s) {
                *o += k;
            }
        }
        self.push(out, Op::AddTiled(a, tile), "add_tiled")
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = as_matrix(self.value(table))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!("row index {bad} out of {n}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&tv[i * m..(i + 1) * m]);
        }
        let out = Tensor::new(vec![idx.len(), m], out)?;
        self.push(out, Op::GatherRows(table, idx.to_vec()), "gather_rows")
    }

    /// Each row of `a[G×m]` repeated `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (g, m) = as_matrix(self.value(a))?;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(g * times * m);
        for r in 0..g {
            for _ in 0..times {
                out.extend_from_slice(&av[r * m..(r + 1) * m]);
            }
        }
        let out = Tensor::new(vec![g * times, m], out)?;
        self.push(out, Op::RepeatRows(a, times), "repeat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = as_matrix(self.value(a))?;
        if start + len > m || len == 0 {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {m}",
                start + len
            )));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&av[r * m + start..r * m + start + len]);
        }
        let out = Tensor::new(vec![n, len], out)?;
        self.push(out, Op::SliceCols(a, start, len), "slice_cols")
    }

    /// Interleaves groups: for each sample `g`, `ga` rows of `a` then `gb` rows of `b`.
    pub fn concat_groups(&mut self, a: Var, ga: usize, b: Var, gb: usize) -> Result<Var> {
        let (ra, m) = as_matrix(self.value(a))?;
        let (rb, m2) = as_matrix(self.value(b))?;
        if m != m2 || ga == 0 || gb == 0 || ra % ga != 0 || rb % gb != 0 || ra / ga != rb / gb {
            return Err(Error::Dimension("concat_groups shape mismatch".into()));
        }
        let n = ra / ga;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity((ra + rb) * m);
        for s in 0..n {
            out.extend_from_slice(&av[s * ga * m..(s + 1) * ga * m]);
            out.extend_from_slice(&bv[s * gb * m..(s + 1) * gb * m]);
        }
        let out = Tensor::new(vec![ra + rb, m], out)?;
        self.push(out, Op::ConcatGroups(a, ga, b, gb), "concat_groups")
    }

    /// Rows `start..start+len` of every consecutive group of `group` rows.
    pub fn slice_groups(&mut self, a: Var, group: usize, start: usize, len: usize) -> Result<Var> {
        let (r, m) = as_matrix(self.value(a))?;
        if group == 0 || r % group != 0 || start + len > group || len == 0 {
            return Err(Error::Dimension("slice_groups shape mismatch".into()));
        }
        let n = r / group;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(n * len * m);
        for s in 0..n {
            let base = (s * group + start) * m;
            out.extend_from_slice(&av[base..base + len * m]);
        }
        let out = Tensor::new(vec![n * len, m], out)?;
        self.push(out, Op::SliceGroups(a, group, start, len), "slice_groups")
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.cols();
        if d < 2 {
            return Err(Error::Dimension(format!(
                "layer norm needs at least 2 features, got {d}"
            )));
        }
        let (y, inv) = layer_norm_rows(av.data(), d);
        let out = Tensor::new(av.shape().to_vec(), y)?;
        self.push(out, Op::LayerNorm(a, inv), "layer_norm")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        self.push(out, Op::Silu(a), "silu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    /// Multi-head self-attention over consecutive groups of `group` rows.
    ///
    /// `qkv` is `[G·T × 3d]` with queries, keys and values stacked along
    /// columns; head `h` uses columns `h·d/heads .. (h+1)·d/heads` of each.
    pub fn attention(&mut self, qkv: Var, group: usize, heads: usize) -> Result<Var> {
        let (rows, c3) = as_matrix(self.value(qkv))?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 || group == 0 || rows % group != 0 {
            return Err(Error::Dimension(format!(
                "attention over {:?} with group {group}, heads {heads}",
                self.value(qkv).shape()
            )));
        }
        let d = c3 / 3;
        let dh = d / heads;
        let t = group;
        let g = rows / group;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; g * heads * t * t];
        let mut scores = vec![0.0; t];
        for s in 0..g {
            for h in 0..heads {
                let pbase = (s * heads + h) * t * t;
                for i in 0..t {
                    let qrow = &x[(s * t + i) * c3 + h * dh..(s * t + i) * c3 + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let krow = &x[(s * t + j) * c3 + d + h * dh..(s * t + j) * c3 + d + (h + 1) * dh];
                        let mut dot = 0.0;
                        for (q, k) in qrow.iter().zip(krow) {
                            dot += q * k;
                        }
                        *sc = dot * scale;
                        max = max.max(*sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let orow = &mut out[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                    for (j, sc) in scores.iter().enumerate() {
                        let p = sc / z;
                        probs[pbase + i * t + j] = p;
                        let vrow = &x[(s * t + j) * c3 + 2 * d + h * dh..(s * t + j) * c3 + 2 * d + (h + 1) * dh];
                        for (o, v) in orow.iter_mut().zip(vrow) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(
            out,
            Op::Attention {
                qkv,
                group,
                heads,
                probs,
            },
            "attention",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a), "mean")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(a)).expect("checked in forward");
                let (_, n) = as_matrix(self.value(b)).expect("checked in forward");
                let bv = self.value_arc(b);
                let av = self.value_arc(a);
                if let Some(ga) = self.accum(grads, a) {
                    matmul_nt_acc(gout, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.accum(grads, b) {
                    matmul_tn_acc(av.data(), gout, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.accum(grads, v) {
                        g.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                }
                if let Some(g) = self.accum(grads, b) {
                    g.iter_mut().zip(gout).for_each(|(g, o)| *g -= o);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value_arc(a);
                let bv = self.value_arc(b);
                if let Some(g) = self.accum(grads, a) {
                    for ((g, o), y) in g.iter_mut().zip(gout).zip(bv.data()) {
                        *g += o * y;
                    }
                }
                if let Some(g) = self.accum(grads, b) {
                    for ((g, o), x) in g.iter_mut().zip(gout).zip(av.data()) {
                        *g += o * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, o)| *g += k * o);
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                }
                let m = self.value(bias).len();
                if let Some(g) = self.accum(grads, bias) {
                    for row in gout.chunks(m) {
                        g.iter_mut().zip(row).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::MulGroups(a, v, group) => {
                let m = self.value(a).cols();
                let av = self.value_arc(a);
                let vv = self.value_arc(v);
                if let Some(g) = self.accum(grads, a) {
                    for (r, (grow, orow)) in g.chunks_mut(m).zip(gout.chunks(m)).enumerate() {
                        let s = &vv.data()[(r / group) * m..(r / group + 1) * m];
                        for ((g, o), k) in grow.iter_mut().zip(orow).zip(s) {
                            *g += o * k;
                        }
                    }
                }
                if let Some(g) = self.accum(grads, v) {
                    for (r, (arow, orow)) in av.data().chunks(m).zip(gout.chunks(m)).enumerate() {
                        let gs = &mut g[(r / group) * m..(r / group + 1) * m];
                        for ((g, o), x) in gs.iter_mut().zip(orow).zip(arow) {
                            *g += o * x;
                        }
                    }
                }
            }
            Op::AddGroups(a, v, group) => {
                let m = self.value(a).cols();
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                }
                if let Some(g) = self.accum(grads, v) {
                    for (r, orow) in gout.chunks(m).enumerate() {
                        let gs = &mut g[(r / group) * m..(r / group + 1) * m];
                        gs.iter_mut().zip(orow).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::AddTiled(a, tile) => {
                let m = self.value(a).cols();
                let t = self.value(tile).rows();
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                }
                if let Some(g) = self.accum(grads, tile) {
                    for (r, orow) in gout.chunks(m).enumerate() {
                        let gs = &mut g[(r % t) * m..(r % t + 1) * m];
                        gs.iter_mut().zip(orow).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::GatherRows(table, ref idx) => {
                let m = self.value(table).cols();
                if let Some(g) = self.accum(grads, table) {
                    for (orow, &i) in gout.chunks(m).zip(idx) {
                        let gs = &mut g[i * m..(i + 1) * m];
                        gs.iter_mut().zip(orow).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::RepeatRows(a, times) => {
                let m = self.value(a).cols();
                if let Some(g) = self.accum(grads, a) {
                    for (r, orow) in gout.chunks(m).enumerate() {
                        let gs = &mut g[(r / times) * m..(r / times + 1) * m];
                        gs.iter_mut().zip(orow).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                let m = self.value(a).cols();
                if let Some(g) = self.accum(grads, a) {
                    for (r, orow) in gout.chunks(len).enumerate() {
                        let gs = &mut g[r * m + start..r * m + start + len];
                        gs.iter_mut().zip(orow).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::ConcatGroups(a, ga, b, gb) => {
                let m = self.value(a).cols();
                let n = self.value(a).rows() / ga;
                let tot = ga + gb;
                if let Some(g) = self.accum(grads, a) {
                    for s in 0..n {
                        let src = &gout[s * tot * m..(s * tot + ga) * m];
                        let dst = &mut g[s * ga * m..(s + 1) * ga * m];
                        dst.iter_mut().zip(src).for_each(|(g, o)| *g += o);
                    }
                }
                if let Some(g) = self.accum(grads, b) {
                    for s in 0..n {
                        let src = &gout[(s * tot + ga) * m..(s + 1) * tot * m];
                        let dst = &mut g[s * gb * m..(s + 1) * gb * m];
                        dst.iter_mut().zip(src).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::SliceGroups(a, group, start, len) => {
                let m = self.value(a).cols();
                if let Some(g) = self.accum(grads, a) {
                    for (s, src) in gout.chunks(len * m).enumerate() {
                        let base = (s * group + start) * m;
                        let dst = &mut g[base..base + len * m];
                        dst.iter_mut().zip(src).for_each(|(g, o)| *g += o);
                    }
                }
            }
            Op::LayerNorm(a, ref inv) => {
                let d = node.value.cols();
                let y = node.value.data();
                if let Some(g) = self.accum(grads, a) {
                    for (r, istd) in inv.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        let dst = &mut g[r * d..(r + 1) * d];
                        for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += istd * (gi - sum_g / d as f64 - yi * sum_gy / d as f64);
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.value_arc(a);
                if let Some(g) = self.accum(grads, a) {
                    for ((g, o), &x) in g.iter_mut().zip(gout).zip(av.data()) {
                        let s = sigmoid(x);
                        *g += o * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value_arc(a);
                if let Some(g) = self.accum(grads, a) {
                    for ((g, o), &x) in g.iter_mut().zip(gout).zip(av.data()) {
                        *g += o * gelu_grad(x);
                    }
                }
            }
            Op::Attention {
                qkv,
                group,
                heads,
                ref probs,
            } => {
                let xv = self.value_arc(qkv);
                if let Some(g) = self.accum(grads, qkv) {
                    attention_backward(xv.data(), probs, gout, g, xv.cols() / 3, group, heads);
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                if let Some(g) = self.accum(grads, a) {
                    g.iter_mut().for_each(|g| *g += gout[0] / n);
                }
            }
        }
    }
}

// Softmax-attention backward for one tape node. `x`/`gx` are `[rows × 3d]`,
// `gout` is `[rows × d]`, `probs` holds the saved `[G × heads × T × T]` weights.
fn attention_backward(x: &[f64], probs: &[f64], gout: &[f64], gx: &mut [f64], d: usize, t: usize, heads: usize) {
    let c3 = 3 * d;
    let rows = gout.len() / d;
    let dh = d / heads;
    let g = rows / t;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t];
    for s in 0..g {
        for h in 0..heads {
            let pbase = (s * heads + h) * t * t;
            let q_at = |i: usize| (s * t + i) * c3 + h * dh;
            let k_at = |j: usize| (s * t + j) * c3 + d + h * dh;
            let v_at = |j: usize| (s * t + j) * c3 + 2 * d + h * dh;
            for i in 0..t {
                let go = &gout[(s * t + i) * d + h * dh..(s * t + i) * d + (h + 1) * dh];
                let p = &probs[pbase + i * t..pbase + (i + 1) * t];
                // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                let mut dot_pp = 0.0;
                for j in 0..t {
                    let vj = v_at(j);
                    let mut acc = 0.0;
                    for (e, &o) in go.iter().enumerate() {
                        acc += o * x[vj + e];
                        gx[vj + e] += p[j] * o;
                    }
                    dp[j] = acc;
                    dot_pp += acc * p[j];
                }
                // dS_ij = p_ij (dP_ij − Σ_k p_ik dP_ik), scaled into dQ and dK.
                let qi = q_at(i);
                for j in 0..t {
                    let ds = p[j] * (dp[j] - dot_pp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = k_at(j);
                    for e in 0..dh {
                        gx[qi + e] += ds * x[kj + e];
                        gx[kj + e] += ds * x[qi + e];
                    }
                }
            }
        }
    }
}
