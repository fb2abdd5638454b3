use std::borrow::Cow;

use super::kernels::{add_into, add_scaled_into, dot, matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalar { scalar: usize, x: usize },
    Gelu(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Softmax(usize),
    CausalSoftmax(usize),
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Concat(Vec<usize>),
    Select { x: usize, index: usize },
    Reshape(usize),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it once in reverse.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    param_nodes: Vec<Option<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store; inputs come from [`Tape::leaf`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_nodes: Vec::new(),
            params: Vec::new(),
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<'a> Tape<'a> {
    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            store: Some(store),
            param_nodes: vec![None; store.len()],
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Borrows a stored parameter. Repeated calls return the same node, so
    /// every use of the tensor feeds one gradient slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(i) = self.param_nodes[id.0] {
            return Var(i);
        }
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(id);
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.param_nodes[id.0] = Some(v.0);
        self.params.push((id, v.0));
        v
    }

    /// Copies a free-standing tensor onto the tape. Its `requires_grad` flag
    /// decides whether `backward` produces a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Cow::Owned(t.data().to_vec()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// References a tensor without copying it. Never receives a gradient.
    pub fn borrowed(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("tape node shapes are consistent")
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::dim(op, s, &[])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a.0, b.0), ng))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the row-vector form of applying `b` as a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulNT(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.ng(a.0);
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::Transpose(a.0), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Sub(a.0, b.0), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a.0, b.0), ng))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a.0);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(a.0, c), ng)
    }

    /// Multiplies every entry of `x` by the one-element node `scalar`.
    pub fn mul_scalar(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(scalar), &[1]));
        }
        let s = self.scalar(scalar);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(scalar.0) || self.ng(x.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::MulScalar { scalar: scalar.0, x: x.0 }, ng))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let ng = self.ng(a.0);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu(a.0), ng)
    }

    /// Non-affine layer normalization over the last dimension.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(a.0);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::LayerNorm { x: a.0, rstd }, ng)
    }

    fn check_softmax_input(&self, a: Var) -> Result<(usize, usize)> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Argument("softmax of an empty vector".into()));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        Ok(rows_cols(self.shape(a)))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.check_softmax_input(a)?;
        let mut out = self.value(a).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(a.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(a.0), ng))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns
    /// `0..=i`; masked entries come out exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.mat_dims(a, "causal_softmax")?;
        if n != m {
            return Err(Error::dim("causal_softmax", self.shape(a), &[n, n]));
        }
        self.check_softmax_input(a)?;
        let mut out = self.value(a).to_vec();
        for r in 0..n {
            let row = &mut out[r * n..(r + 1) * n];
            softmax_in_place(&mut row[..=r]);
            row[r + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        let ng = self.ng(a.0);
        Ok(self.push(Cow::Owned(out), vec![n, n], Op::CausalSoftmax(a.0), ng))
    }

    /// Stacks rows `ids` of a 2-D `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Argument(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Argument("gather_rows needs at least one id".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table.0);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), cols],
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(Cow::Owned(out), vec![m, len], Op::SliceCols { x: a.0, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.mat_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let pn = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * pn..(r + 1) * pn]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(
            Cow::Owned(out),
            vec![m, total],
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            ng,
        ))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of nothing".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let n = out.len();
        Ok(self.push(
            Cow::Owned(out),
            vec![n],
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            ng,
        ))
    }

    /// Entry `index` of the flattened node as a one-element node.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.value(a);
        if index >= x.len() {
            return Err(Error::Argument(format!(
                "select index {index} out of range for {} entries",
                x.len()
            )));
        }
        let v = x[index];
        let ng = self.ng(a.0);
        Ok(self.push(Cow::Owned(vec![v]), vec![1], Op::Select { x: a.0, index }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a.0);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(a.0), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a.0);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits[T×V]`, over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim("cross_entropy", &[t, v], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateSample);
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let target = targets[r];
            if target >= v {
                return Err(Error::Argument(format!("target {target} outside vocabulary of {v}")));
            }
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
            for (p, z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let loss = total / count as f64;
        let ng = self.ng(logits.0);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Replays adjoints from the scalar `loss` back to every leaf that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // zero-initialised gradient buffer for input `j`, or None if `j` is constant
        macro_rules! slot {
            ($j:expr) => {{
                let j = $j;
                if nodes[j].needs_grad {
                    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if let Some(ga) = slot!(*a) {
                    matmul_nt_into(g, &nodes[*b].value, ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    matmul_tn_into(&nodes[*a].value, g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[0];
                if let Some(ga) = slot!(*a) {
                    matmul_into(g, &nodes[*b].value, ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    matmul_tn_into(g, &nodes[*a].value, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                if let Some(ga) = slot!(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_scaled_into(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut()
                        .zip(g.iter().zip(nodes[*b].value.iter()))
                        .for_each(|(o, (gv, bv))| *o += gv * bv);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut()
                        .zip(g.iter().zip(nodes[*a].value.iter()))
                        .for_each(|(o, (gv, av))| *o += gv * av);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    add_scaled_into(ga, g, *c);
                }
            }
            Op::MulScalar { scalar, x } => {
                let s = nodes[*scalar].value[0];
                if let Some(gs) = slot!(*scalar) {
                    gs[0] += dot(g, &nodes[*x].value);
                }
                if let Some(gx) = slot!(*x) {
                    add_scaled_into(gx, g, s);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(nodes[*a].value.iter()) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        *o += gv * d;
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (rows, cols) = rows_cols(&nodes[*x].shape);
                let y = &node.value;
                if let Some(gx) = slot!(*x) {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let gy = &g[span.clone()];
                        let yr = &y[span.clone()];
                        let mean_g = gy.iter().sum::<f64>() / nf;
                        let mean_gy = dot(gy, yr) / nf;
                        for ((o, &gv), &yv) in gx[span].iter_mut().zip(gy).zip(yr) {
                            *o += rstd[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let (rows, cols) = rows_cols(&nodes[*a].shape);
                let y = &node.value;
                if let Some(ga) = slot!(*a) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let gy = &g[span.clone()];
                        let yr = &y[span.clone()];
                        let inner = dot(gy, yr);
                        for ((o, &gv), &yv) in ga[span].iter_mut().zip(gy).zip(yr) {
                            *o += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = nodes[*table].shape[1];
                if let Some(gt) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let len = node.shape[1];
                if let Some(gx) = slot!(*x) {
                    for r in 0..m {
                        add_into(
                            &mut gx[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let pn = nodes[p].shape[1];
                    if let Some(gp) = slot!(p) {
                        for r in 0..m {
                            add_into(
                                &mut gp[r * pn..(r + 1) * pn],
                                &g[r * total + offset..r * total + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Select { x, index } => {
                if let Some(gx) = slot!(*x) {
                    gx[*index] += g[0];
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[*logits].shape[1];
                let scale = g[0] / *count as f64;
                if let Some(gl) = slot!(*logits) {
                    for (r, (&m, &target)) in mask.iter().zip(targets).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (o, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += scale * p;
                        }
                        row[target] -= scale;
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf node. `None` when the
    /// leaf does not require a gradient or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    /// Every borrowed parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}
