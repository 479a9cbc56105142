//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix. Parameters live in a
//! [`ParamStore`] and are borrowed, not copied, by the tape.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    decay: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values
            .iter()
            .map(|m| Mat::zeros(m.raw_dim()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key columns a query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` sees columns `0..=i + offset`.
    Causal {
        offset: usize,
    },
}

impl Mask {
    fn allows(self, row: usize, col: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal { offset } => col <= row + offset,
        }
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax with masked entries set to exactly zero.
pub fn softmax_rows(x: &Mat, mask: Mask) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    for (i, (row, mut orow)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if mask.allows(i, j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if mask.allows(i, j) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        if sum > 0.0 {
            orow.mapv_inplace(|v| v / sum);
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with `1 × m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (row, mut hrow) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, &v) in hrow.iter_mut().zip(row.iter()) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var, mask: Mask) -> Var {
        let out = softmax_rows(self.value(x), mask);
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::ColSlice { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts must match");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in out.outer_iter_mut().zip(ids) {
            row.assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits`; returns a `1 × 1` value.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits), Mask::None);
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Sum of `1 × 1` values.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total: f64 = parts.iter().map(|&v| self.value(v)[[0, 0]]).sum();
        self.push(
            Mat::from_elem((1, 1), total),
            Op::Sum(parts.to_vec()),
            parts,
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter in
    /// the store (zeros for parameters not on the tape).
    pub fn backward(&self, loss: Var) -> Vec<Mat> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = self.params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out[id.0] += &g,
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        let bv = self.value(*b);
                        let ga = grad_slot(&mut grads, *a, self.value(*a).dim());
                        general_mat_mul(1.0, &g, &bv.t(), 1.0, ga);
                    }
                    if needs(*b) {
                        let av = self.value(*a);
                        let gb = grad_slot(&mut grads, *b, self.value(*b).dim());
                        general_mat_mul(1.0, &av.t(), &g, 1.0, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if needs(*a) {
                        let bv = self.value(*b);
                        let ga = grad_slot(&mut grads, *a, self.value(*a).dim());
                        general_mat_mul(1.0, &g, bv, 1.0, ga);
                    }
                    if needs(*b) {
                        let av = self.value(*a);
                        let gb = grad_slot(&mut grads, *b, self.value(*b).dim());
                        general_mat_mul(1.0, &g.t(), av, 1.0, gb);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        *grad_slot(&mut grads, *a, g.dim()) += &g;
                    }
                    if needs(*b) {
                        *grad_slot(&mut grads, *b, g.dim()) += &g;
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(*a) {
                        *grad_slot(&mut grads, *a, g.dim()) += &g;
                    }
                    if needs(*row) {
                        let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        *grad_slot(&mut grads, *row, (1, g.ncols())) += &col_sum;
                    }
                }
                Op::Scale(a, s) => {
                    grad_slot(&mut grads, *a, g.dim()).scaled_add(*s, &g);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let mut local = av.mapv(gelu_grad);
                    local *= &g;
                    *grad_slot(&mut grads, *a, g.dim()) += &local;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let m = g.ncols() as f64;
                    if needs(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        *grad_slot(&mut grads, *gamma, (1, g.ncols())) += &gg;
                    }
                    if needs(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        *grad_slot(&mut grads, *beta, (1, g.ncols())) += &gb;
                    }
                    if needs(*x) {
                        let gam = self.value(*gamma);
                        let dxhat = &g * gam;
                        let mut dx = Mat::zeros(g.raw_dim());
                        for (i, mut row) in dx.outer_iter_mut().enumerate() {
                            let dh = dxhat.row(i);
                            let xh = xhat.row(i);
                            let mean_dh = dh.sum() / m;
                            let mean_dhx =
                                dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                            for ((o, &d), &h) in row.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                                *o = inv_std[i] * (d - mean_dh - h * mean_dhx);
                            }
                        }
                        *grad_slot(&mut grads, *x, g.dim()) += &dx;
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut dx = Mat::zeros(g.raw_dim());
                    for ((yrow, grow), mut drow) in
                        y.outer_iter().zip(g.outer_iter()).zip(dx.outer_iter_mut())
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    *grad_slot(&mut grads, *x, g.dim()) += &dx;
                }
                Op::ColSlice { x, start } => {
                    let dim = self.value(*x).dim();
                    let gx = grad_slot(&mut grads, *x, dim);
                    let mut view = gx.slice_mut(s![.., *start..*start + g.ncols()]);
                    view += &g;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let dim = self.value(p).dim();
                        if needs(p) {
                            *grad_slot(&mut grads, p, dim) += &g.slice(s![.., at..at + dim.1]);
                        }
                        at += dim.1;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let dim = self.value(p).dim();
                        if needs(p) {
                            *grad_slot(&mut grads, p, dim) += &g.slice(s![at..at + dim.0, ..]);
                        }
                        at += dim.0;
                    }
                }
                Op::Gather { table, ids } => {
                    let dim = self.value(*table).dim();
                    let gt = grad_slot(&mut grads, *table, dim);
                    for (grow, &id) in g.outer_iter().zip(ids) {
                        let mut trow = gt.row_mut(id);
                        trow += &grow;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    grad_slot(&mut grads, *logits, d.dim()).scaled_add(up, &d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if needs(p) {
                            *grad_slot(&mut grads, p, (1, 1)) += &g;
                        }
                    }
                }
            }
        }
        out
    }
}

fn grad_slot(grads: &mut [Option<Mat>], v: Var, dim: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(dim))
}
