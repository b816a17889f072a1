//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`], so building a graph never
//! copies weights. [`Tape::backward`] walks the tape in reverse and returns
//! the gradient of a scalar loss with respect to every trainable parameter
//! that took part in the pass.
//!
//! Activations are rank-2 `[rows, cols]` matrices throughout; the only
//! broadcasting supported is adding a bias row ([`Tape::add_row`]).

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{NumError, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-12;

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    key_mask: Vec<bool>,
    /// `[batch, heads, seq, seq]` attention weights.
    probs: Vec<f64>,
}

enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat(Vec<Var>),
    Reshape(Var),
    Slice { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionSaved>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dropout { .. } => "dropout",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Attention(_) => "attention",
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to parameters, keyed by id.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.map.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { shape, value: Cow::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape values are finite")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Leaf that borrows a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf(Some(id)),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Leaf holding data that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: Cow::Owned(t.into_data()), op: Op::Leaf(None), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(NumError::Shape(format!(
                "bias {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(cols).flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c)).collect();
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), self.needs_grad(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), self.needs_grad(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), self.needs_grad(x))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), self.needs_grad(x))
    }

    /// Row-wise layer normalisation followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(NumError::Shape(format!(
                "layer_norm of {:?} with gamma {:?} and beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut normed = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let n = (row[c] - mean) * rs;
                normed[r * cols + c] = n;
                out[r * cols + c] = n * g[c] + b[c];
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gamma, beta, normed, rstd }, ng)
    }

    /// Selects rows of a `[n, d]` table; serves both embedding lookup and
    /// picking positions out of a flattened activation matrix.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(table));
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumError::Shape(format!("row index {bad} out of range for {:?}", self.shape(table))));
        }
        if rows.is_empty() {
            return Err(NumError::Shape("gather with no rows".into()));
        }
        let t = self.value(table);
        let out = rows.iter().flat_map(|&r| t[r * d..(r + 1) * d].iter().copied()).collect();
        self.push(vec![rows.len(), d], out, Op::Gather { table, rows: rows.to_vec() }, self.needs_grad(table))
    }

    /// Mean cross-entropy of `[n, classes]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(logits));
        if targets.len() != n {
            return Err(NumError::Shape(format!("{} targets for logits {:?}", targets.len(), self.shape(logits))));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumError::Shape(format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        probs.chunks_mut(c).for_each(softmax_in_place);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -(probs[r * c + t].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / n as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        self.push(vec![1], vec![loss], op, self.needs_grad(logits))
    }

    /// Inverted dropout. Callers skip this entirely outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, self.needs_grad(x))
    }

    /// Concatenates rank-2 values with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumError::Shape("concat of nothing".into()))?;
        let rows = rows_cols(self.shape(*first)).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(NumError::Shape(format!(
                    "concat of {:?} and {:?}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(vec![rows, total], out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NumError::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x), self.needs_grad(x))
    }

    /// Contiguous flat range `[start, start + numel(shape))` viewed as `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let total = self.value(x).len();
        if start + len > total || len == 0 {
            return Err(NumError::Shape(format!(
                "slice [{start}, {}) out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let out = self.value(x)[start..start + len].to_vec();
        self.push(shape.to_vec(), out, Op::Slice { x, start }, self.needs_grad(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), self.needs_grad(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), self.needs_grad(x))
    }

    /// Fused multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, hidden]`; `key_mask[b * seq + j]`
    /// is false for padding keys, which receive zero weight. Every sequence
    /// needs at least one valid key.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() || shape.len() != 2 {
            return Err(NumError::Shape(format!(
                "attention of {:?}, {:?}, {:?}",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let hidden = shape[1];
        if shape[0] != batch * seq || key_mask.len() != batch * seq || heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(NumError::Shape(format!(
                "attention layout batch={batch} seq={seq} heads={heads} does not fit {shape:?}"
            )));
        }
        for b in 0..batch {
            if !key_mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(NumError::Contract(format!("sequence {b} has no valid attention keys")));
            }
        }
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * hidden];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * hidden + off..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if key_mask[b * seq + j] {
                            let kj = &ks[(b * seq + j) * hidden + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                            p[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..seq {
                        if key_mask[b * seq + j] {
                            p[j] = (p[j] - max).exp();
                            z += p[j];
                        } else {
                            p[j] = 0.0;
                        }
                    }
                    let o = &mut out[(b * seq + i) * hidden + off..][..dh];
                    for j in 0..seq {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vj = &vs[(b * seq + j) * hidden + off..][..dh];
                            for (oo, vv) in o.iter_mut().zip(vj) {
                                *oo += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        let saved = AttentionSaved { q, k, v, batch, seq, heads, key_mask: key_mask.to_vec(), probs };
        self.push(shape, out, Op::Attention(Box::new(saved)), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, contrib: Vec<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf(Some(id)) => {
                    out.map.insert(*id, g);
                }
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.needs_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt(&g, self.value(*b), &mut da, m, n, k);
                        acc(*a, da);
                    }
                    if self.needs_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn(self.value(*a), &g, &mut db, m, k, n);
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(x, bias) => {
                    let cols = self.value(*bias).len();
                    if self.needs_grad(*bias) {
                        let mut db = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        acc(*bias, db);
                    }
                    acc(*x, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs_grad(*a) {
                        acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    }
                    if self.needs_grad(*b) {
                        acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
                Op::Relu(x) => {
                    let xs = self.value(*x);
                    acc(*x, g.iter().zip(xs).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Gelu(x) => {
                    let xs = self.value(*x);
                    let d = g
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| {
                            let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                            let t = inner.tanh();
                            let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                        })
                        .collect();
                    acc(*x, d);
                }
                Op::Softmax(x) => {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = &node.value;
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dr[c] = yr[c] * (gr[c] - dotp);
                        }
                    }
                    acc(*x, d);
                }
                Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let gm = self.value(*gamma);
                    if self.needs_grad(*gamma) {
                        let mut dg = vec![0.0; cols];
                        for (gr, nr) in g.chunks(cols).zip(normed.chunks(cols)) {
                            dg.iter_mut().zip(gr.iter().zip(nr)).for_each(|(d, (a, b))| *d += a * b);
                        }
                        acc(*gamma, dg);
                    }
                    if self.needs_grad(*beta) {
                        let mut db = vec![0.0; cols];
                        for gr in g.chunks(cols) {
                            db.iter_mut().zip(gr).for_each(|(d, a)| *d += a);
                        }
                        acc(*beta, db);
                    }
                    if self.needs_grad(*x) {
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let gr = &g[r * cols..(r + 1) * cols];
                            let nr = &normed[r * cols..(r + 1) * cols];
                            let dn: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                            let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                            let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for c in 0..cols {
                                dx[r * cols + c] = rstd[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::Gather { table, rows } => {
                    let (_, d) = rows_cols(self.shape(*table));
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (i, &r) in rows.iter().enumerate() {
                        dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                    acc(*table, dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let (n, c) = rows_cols(self.shape(*logits));
                    let scale = g[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * c + t] -= scale;
                    }
                    acc(*logits, d);
                }
                Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
                Op::Concat(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let w = rows_cols(self.shape(p)).1;
                        if self.needs_grad(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            acc(p, d);
                        }
                        off += w;
                    }
                }
                Op::Reshape(x) => acc(*x, g),
                Op::Slice { x, start } => {
                    let mut d = vec![0.0; self.value(*x).len()];
                    d[*start..*start + g.len()].copy_from_slice(&g);
                    acc(*x, d);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
                Op::Attention(saved) => {
                    let (dq, dk, dv) = attention_backward(self, saved, &g);
                    acc(saved.q, dq);
                    acc(saved.k, dk);
                    acc(saved.v, dv);
                }
            }
        }
        Ok(out)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn attention_backward(tape: &Tape<'_>, s: &AttentionSaved, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (qs, ks, vs) = (tape.value(s.q), tape.value(s.k), tape.value(s.v));
    let hidden = tape.shape(s.q)[1];
    let (batch, seq, heads) = (s.batch, s.seq, s.heads);
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; qs.len()];
    let mut dk = vec![0.0; ks.len()];
    let mut dv = vec![0.0; vs.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let p = &s.probs[((b * heads + h) * seq + i) * seq..][..seq];
                let gi = &g[(b * seq + i) * hidden + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..seq {
                    if !s.key_mask[b * seq + j] {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vs[(b * seq + j) * hidden + off..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    weighted += p[j] * dp[j];
                    let dvj = &mut dv[(b * seq + j) * hidden + off..][..dh];
                    dvj.iter_mut().zip(gi).for_each(|(d, a)| *d += p[j] * a);
                }
                let qi_base = (b * seq + i) * hidden + off;
                for j in 0..seq {
                    if !s.key_mask[b * seq + j] {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_base = (b * seq + j) * hidden + off;
                    for c in 0..dh {
                        dq[qi_base + c] += ds * ks[kj_base + c];
                        dk[kj_base + c] += ds * qs[qi_base + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, shape, data) in values {
            s.add(*n, Tensor::new(shape.clone(), data.clone()).unwrap().with_requires_grad(true)).unwrap();
        }
        s
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
    }

    #[test]
    fn sum_gives_ones() {
        let store = store_with(&[("p", vec![2, 3], vec![0.5; 6])]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ParamId(0));
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let store = store_with(&[("p", vec![2], vec![1.0, -2.0])]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ParamId(0));
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let store = store_with(&[("p", vec![2], vec![1.0, 2.0])]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ParamId(0));
        assert!(matches!(tape.backward(p), Err(NumError::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = store_with(&[("a", vec![1, 2], vec![1.0, 2.0]), ("b", vec![2, 1], vec![3.0, 4.0])]);
        store.set_trainable(ParamId(1), false);
        let mut tape = Tape::new();
        let a = tape.param(&store, ParamId(0));
        let b = tape.param(&store, ParamId(1));
        let y = tape.matmul(a, b).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &[3.0, 4.0]);
        assert!(g.get(ParamId(1)).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 1.7 - 9.0).collect()).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 5], vec![1.0, 4.0, -2.0, 8.0, 0.5, 3.0, 3.1, 2.9, 3.05, 2.95]).unwrap());
        let g = tape.constant(Tensor::ones(&[5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 10]));
        let l = tape.cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((tape.scalar(l) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn slice_and_concat_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 6], (0..6).map(f64::from).collect()).unwrap());
        let s = tape.slice(x, 2, &[2, 2]).unwrap();
        assert_eq!(tape.value(s), &[2.0, 3.0, 4.0, 5.0]);
        assert!(tape.slice(x, 4, &[3]).is_err());
        let a = tape.constant(Tensor::zeros(&[2, 1]));
        let c = tape.concat(&[s, a]).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(tape.value(c), &[2.0, 3.0, 0.0, 4.0, 5.0, 0.0]);
    }

    #[test]
    fn attention_ignores_masked_keys() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let y = tape.attention(q, q, v, 1, 3, 1, &[true, true, false]).unwrap();
        // every output is a convex combination of the first two value rows
        for row in tape.value(y).chunks(2) {
            assert!(row[0] >= 1.0 && row[0] <= 3.0);
        }
    }
}
