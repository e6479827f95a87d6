//! Reverse-mode gradient tape over dense matrices.
//!
//! Every forward pass records onto a fresh [`Tape`]. Leaves are either
//! parameters (which receive gradients) or constants (which never do). The
//! tape is append-only, so node order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::linalg::{solve_lower_in_place, solve_lower_transpose_in_place};
use crate::tensor::{dot, DenseMatrix, SparseCsr};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SpMM(Arc<SparseCsr>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        softmax: DenseMatrix,
    },
    TriSolveRows {
        x: Var,
        factor: Var,
    },
    SqDistToCenters {
        x: Var,
        centers: Var,
    },
    GatAggregate {
        wh: Var,
        att: Var,
        structure: Arc<SparseCsr>,
        slope: f64,
        pre: Vec<f64>,
        alpha: Vec<f64>,
    },
    DistanceMargin {
        dists: Vec<Var>,
        chosen: Vec<usize>,
        labels: Vec<usize>,
        hinge: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf that
/// influenced it. Constant leaves never appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<Var, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &DenseMatrix)> {
        self.grads.iter().map(|(&v, g)| (v, g))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.nodes[v.0].op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf(LeafKind::Param), true)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf(LeafKind::Constant), false)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn spmm(&mut self, adj: &Arc<SparseCsr>, x: Var) -> Result<Var> {
        let value = adj.spmm(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpMM(Arc::clone(adj), x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `x` scaled by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let value = self.value(x).scale(factor);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| leaky(v, slope));
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of {rows}"),
            ));
        }
        let value = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`, as a 1x1 node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != targets.len() {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("{} logit rows for {} targets", l.rows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("target {bad} with {} classes", l.cols()),
            ));
        }
        let mut softmax = DenseMatrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for (s, &v) in softmax.row_mut(i).iter_mut().zip(row) {
                *s = (v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            DenseMatrix::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
            rg,
        ))
    }

    /// Row-wise `L⁻¹·x_i` for a constant lower-triangular factor `L`.
    pub fn tri_solve_rows(&mut self, x: Var, factor: Var) -> Result<Var> {
        if self.requires_grad(factor) {
            return Err(Error::Contract(
                "tri_solve_rows does not differentiate through the factor".into(),
            ));
        }
        let l = self.value(factor);
        let xv = self.value(x);
        if l.rows() != l.cols() || l.cols() != xv.cols() {
            return Err(Error::shape(
                "tri_solve_rows",
                format!(
                    "factor {}x{} for rows of width {}",
                    l.rows(),
                    l.cols(),
                    xv.cols()
                ),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            solve_lower_in_place(l, value.row_mut(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::TriSolveRows { x, factor }, rg))
    }

    /// Squared Euclidean distance of every row of `x` to every row of `centers`.
    pub fn sq_dist_to_centers(&mut self, x: Var, centers: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(centers);
        if xv.cols() != cv.cols() {
            return Err(Error::shape(
                "sq_dist_to_centers",
                format!("rows of width {} vs centers of width {}", xv.cols(), cv.cols()),
            ));
        }
        let value = DenseMatrix::from_fn(xv.rows(), cv.rows(), |i, c| {
            xv.row(i)
                .iter()
                .zip(cv.row(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        });
        let rg = self.rg(&[x, centers]);
        Ok(self.push(value, Op::SqDistToCenters { x, centers }, rg))
    }

    /// Single-head graph attention aggregation over the sparsity pattern of
    /// `structure` (values ignored). `att` is `1 x 2d`: source half then
    /// neighbor half.
    pub fn gat_aggregate(
        &mut self,
        wh: Var,
        att: Var,
        structure: &Arc<SparseCsr>,
        slope: f64,
    ) -> Result<Var> {
        let whv = self.value(wh);
        let attv = self.value(att);
        let (pre, alpha) = gat_attention(whv, attv, structure, slope)?;
        let mut value = DenseMatrix::zeros(whv.rows(), whv.cols());
        for i in 0..structure.rows() {
            let (idx, _) = structure.row(i);
            let base = structure.offsets()[i];
            let out = value.row_mut(i);
            for (k, &j) in idx.iter().enumerate() {
                let a = alpha[base + k];
                for (o, &v) in out.iter_mut().zip(whv.row(j)) {
                    *o += a * v;
                }
            }
        }
        let rg = self.rg(&[wh, att]);
        Ok(self.push(
            value,
            Op::GatAggregate {
                wh,
                att,
                structure: Arc::clone(structure),
                slope,
                pre,
                alpha,
            },
            rg,
        ))
    }

    /// Mean over rows of the hinge
    /// `max(0, margin + d[chosen_i][i, y_i] + log Σ_l Σ_{j≠y_i} exp(-d[l][i, j]))`
    /// where `dists[l]` holds the per-layer distance matrix (rows x classes).
    pub fn distance_margin(
        &mut self,
        dists: &[Var],
        chosen: &[usize],
        labels: &[usize],
        margin: f64,
    ) -> Result<Var> {
        let Some(&first) = dists.first() else {
            return Err(Error::Contract("distance_margin needs at least one layer".into()));
        };
        let (m, c) = self.value(first).shape();
        if m == 0 {
            return Err(Error::Contract("distance_margin over zero rows".into()));
        }
        if dists.iter().any(|&d| self.value(d).shape() != (m, c)) {
            return Err(Error::shape("distance_margin", "layer distance shapes differ"));
        }
        if chosen.len() != m || labels.len() != m {
            return Err(Error::shape(
                "distance_margin",
                format!("{m} rows, {} selections, {} labels", chosen.len(), labels.len()),
            ));
        }
        if chosen.iter().any(|&l| l >= dists.len()) || labels.iter().any(|&y| y >= c) {
            return Err(Error::Contract("selection or label out of range".into()));
        }
        let layers = dists.len();
        let mut hinge = Vec::with_capacity(m);
        let mut weights = vec![0.0; m * layers * c];
        let mut total = 0.0;
        let mut terms = Vec::with_capacity(layers * c);
        for i in 0..m {
            let y = labels[i];
            terms.clear();
            for &d in dists {
                let row = self.value(d).row(i);
                for (j, &v) in row.iter().enumerate() {
                    if j != y {
                        terms.push(-v);
                    }
                }
            }
            let lse = if terms.is_empty() {
                f64::NEG_INFINITY
            } else {
                log_sum_exp(&terms)
            };
            let s = margin + self.value(dists[chosen[i]]).get(i, y) + lse;
            hinge.push(s);
            if s > 0.0 {
                total += s;
                let w = &mut weights[i * layers * c..(i + 1) * layers * c];
                for (l, &d) in dists.iter().enumerate() {
                    let row = self.value(d).row(i);
                    for (j, &v) in row.iter().enumerate() {
                        if j != y {
                            w[l * c + j] = (-v - lse).exp();
                        }
                    }
                }
            }
        }
        let rg = self.rg(dists);
        Ok(self.push(
            DenseMatrix::scalar(total / m as f64),
            Op::DistanceMargin {
                dists: dists.to_vec(),
                chosen: chosen.to_vec(),
                labels: labels.to_vec(),
                hinge,
                weights,
            },
            rg,
        ))
    }

    /// Sign pattern of every non-smooth point on the tape (activation inputs
    /// and hinge arguments). Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let sign = |v: f64| -> i8 {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        };
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    sig.extend(self.value(*x).as_slice().iter().map(|&v| sign(v)));
                }
                Op::GatAggregate { pre, .. } => sig.extend(pre.iter().map(|&v| sign(v))),
                Op::DistanceMargin { hinge, .. } => sig.extend(hinge.iter().map(|&v| sign(v))),
                _ => {}
            }
        }
        sig
    }

    /// Gradients of the 1x1 node `root` with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown tape node {}", root.0)));
        }
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DenseMatrix::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(LeafKind::Param) => {
                    out.grads.insert(Var(idx), g);
                }
                Op::Leaf(LeafKind::Constant) => {}
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.requires_grad(*b) {
                        let db = g.t_matmul(self.value(*a))?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::SpMM(adj, x) => {
                    let dx = adj.transpose().spmm(&g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.hadamard(self.value(*a))?)?;
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        accumulate(&mut grads, *bias, g.sum_rows())?;
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s))?,
                Op::AddScalar(x) => accumulate(&mut grads, *x, g)?,
                Op::MulScalar(x, s) => {
                    let factor = self.value(*s).item()?;
                    if self.requires_grad(*s) {
                        let ds = dot(g.as_slice(), self.value(*x).as_slice());
                        accumulate(&mut grads, *s, DenseMatrix::scalar(ds))?;
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g.scale(factor))?;
                    }
                }
                Op::Relu(x) => {
                    let dx = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LeakyRelu(x, slope) => {
                    let dx = zip_map(&g, self.value(*x), |gv, xv| gv * leaky_slope(xv, *slope));
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::GatherRows(x, idx) => {
                    let src = self.value(*x);
                    let mut dx = DenseMatrix::zeros(src.rows(), src.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SumAll(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, DenseMatrix::filled(r, c, g.item()?))?;
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    softmax,
                } => {
                    let scale = g.item()?;
                    let mut dl = softmax.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let v = dl.get(i, t);
                        dl.set(i, t, v - 1.0);
                    }
                    accumulate(&mut grads, *logits, dl.scale(scale))?;
                }
                Op::TriSolveRows { x, factor } => {
                    let l = self.value(*factor);
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        solve_lower_transpose_in_place(l, dx.row_mut(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SqDistToCenters { x, centers } => {
                    let xv = self.value(*x);
                    let cv = self.value(*centers);
                    let mut dx = DenseMatrix::zeros(xv.rows(), xv.cols());
                    let mut dc = DenseMatrix::zeros(cv.rows(), cv.cols());
                    for i in 0..xv.rows() {
                        for c in 0..cv.rows() {
                            let w = 2.0 * g.get(i, c);
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..xv.cols() {
                                let diff = w * (xv.get(i, k) - cv.get(c, k));
                                dx.row_mut(i)[k] += diff;
                                dc.row_mut(c)[k] -= diff;
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, dx)?;
                    }
                    if self.requires_grad(*centers) {
                        accumulate(&mut grads, *centers, dc)?;
                    }
                }
                Op::GatAggregate {
                    wh,
                    att,
                    structure,
                    slope,
                    pre,
                    alpha,
                } => {
                    let (dwh, datt) = gat_backward(
                        &g,
                        self.value(*wh),
                        self.value(*att),
                        structure,
                        *slope,
                        pre,
                        alpha,
                    );
                    if self.requires_grad(*wh) {
                        accumulate(&mut grads, *wh, dwh)?;
                    }
                    if self.requires_grad(*att) {
                        accumulate(&mut grads, *att, datt)?;
                    }
                }
                Op::DistanceMargin {
                    dists,
                    chosen,
                    labels,
                    hinge,
                    weights,
                } => {
                    let upstream = g.item()?;
                    let (m, c) = self.value(dists[0]).shape();
                    let layers = dists.len();
                    let per_row = upstream / m as f64;
                    let mut dd: Vec<DenseMatrix> =
                        (0..layers).map(|_| DenseMatrix::zeros(m, c)).collect();
                    for i in 0..m {
                        if hinge[i] <= 0.0 {
                            continue;
                        }
                        let y = labels[i];
                        let w = &weights[i * layers * c..(i + 1) * layers * c];
                        for (l, d) in dd.iter_mut().enumerate() {
                            let row = d.row_mut(i);
                            for j in 0..c {
                                if j != y {
                                    row[j] -= per_row * w[l * c + j];
                                }
                            }
                        }
                        let v = dd[chosen[i]].get(i, y);
                        dd[chosen[i]].set(i, y, v + per_row);
                    }
                    for (d, dv) in dists.iter().zip(dd) {
                        if self.requires_grad(*d) {
                            accumulate(&mut grads, *d, dv)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zip_map(g: &DenseMatrix, x: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = g
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(&gv, &xv)| f(gv, xv))
        .collect();
    DenseMatrix::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

#[inline]
fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Derivative convention: 0 exactly at the kink.
#[inline]
fn leaky_slope(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        slope
    } else {
        0.0
    }
}

/// Max-shifted `log Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Pre-activation scores and attention weights, both in CSR order of `structure`.
pub fn gat_attention(
    wh: &DenseMatrix,
    att: &DenseMatrix,
    structure: &SparseCsr,
    slope: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = wh.shape();
    if att.shape() != (1, 2 * d) {
        return Err(Error::shape(
            "gat_aggregate",
            format!("attention {}x{} for width {d}", att.rows(), att.cols()),
        ));
    }
    if structure.rows() != n || structure.cols() != n {
        return Err(Error::shape(
            "gat_aggregate",
            format!("structure {}x{} for {n} nodes", structure.rows(), structure.cols()),
        ));
    }
    let (a_src, a_nbr) = att.as_slice().split_at(d);
    let src: Vec<f64> = (0..n).map(|i| dot(a_src, wh.row(i))).collect();
    let nbr: Vec<f64> = (0..n).map(|i| dot(a_nbr, wh.row(i))).collect();
    let mut pre = Vec::with_capacity(structure.nnz());
    let mut alpha = Vec::with_capacity(structure.nnz());
    for i in 0..n {
        let (idx, _) = structure.row(i);
        if idx.is_empty() {
            return Err(Error::Contract(format!(
                "attention neighborhood of node {i} is empty"
            )));
        }
        let start = alpha.len();
        for &j in idx {
            let p = src[i] + nbr[j];
            pre.push(p);
            alpha.push(leaky(p, slope));
        }
        let row = &mut alpha[start..];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for a in row.iter_mut() {
            *a = (*a - max).exp();
            total += *a;
        }
        for a in row.iter_mut() {
            *a /= total;
        }
    }
    Ok((pre, alpha))
}

fn gat_backward(
    g: &DenseMatrix,
    wh: &DenseMatrix,
    att: &DenseMatrix,
    structure: &SparseCsr,
    slope: f64,
    pre: &[f64],
    alpha: &[f64],
) -> (DenseMatrix, DenseMatrix) {
    let (n, d) = wh.shape();
    let (a_src, a_nbr) = att.as_slice().split_at(d);
    let mut dwh = DenseMatrix::zeros(n, d);
    let mut d_src = vec![0.0; n];
    let mut d_nbr = vec![0.0; n];
    let mut dalpha = Vec::new();
    for i in 0..n {
        let (idx, _) = structure.row(i);
        let base = structure.offsets()[i];
        let gi = g.row(i);
        dalpha.clear();
        dalpha.extend(idx.iter().map(|&j| dot(gi, wh.row(j))));
        let mean: f64 = idx
            .iter()
            .enumerate()
            .map(|(k, _)| alpha[base + k] * dalpha[k])
            .sum();
        for (k, &j) in idx.iter().enumerate() {
            let a = alpha[base + k];
            for (dw, &gv) in dwh.row_mut(j).iter_mut().zip(gi) {
                *dw += a * gv;
            }
            let de = a * (dalpha[k] - mean);
            let dp = de * leaky_slope(pre[base + k], slope);
            d_src[i] += dp;
            d_nbr[j] += dp;
        }
    }
    let mut datt = DenseMatrix::zeros(1, 2 * d);
    for i in 0..n {
        let row = wh.row(i);
        let out = dwh.row_mut(i);
        for k in 0..d {
            out[k] += d_src[i] * a_src[k] + d_nbr[i] * a_nbr[k];
        }
        let da = datt.as_mut_slice();
        for k in 0..d {
            da[k] += d_src[i] * row[k];
            da[d + k] += d_nbr[i] * row[k];
        }
    }
    (dwh, datt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_broadcast_input() {
        // loss = sum(W·x) with x constant: dW[i][k] = x[k]
        let mut t = Tape::new();
        let w = t.param(mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let x = t.constant(mat(&[&[0.5], &[-1.0], &[2.0]]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(
            grads.get(w).unwrap(),
            &mat(&[&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0]])
        );
        assert!(!grads.contains(x));
    }

    #[test]
    fn squared_norm_gradient_is_twice_weights() {
        let wv = mat(&[&[1.0, -2.0], &[0.25, 3.0]]);
        let mut t = Tape::new();
        let w = t.param(wv.clone());
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &wv.scale(2.0));
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut t = Tape::new();
        let w = t.param(DenseMatrix::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_leaves_never_receive_gradients() {
        let mut t = Tape::new();
        let w = t.param(mat(&[&[1.0, 2.0]]));
        let c = t.constant(mat(&[&[3.0, 4.0]]));
        let prod = t.mul(w, c).unwrap();
        let both = t.add(prod, c).unwrap();
        let loss = t.sum_all(both);
        let grads = t.backward(loss).unwrap();
        assert!(grads.contains(w));
        assert!(!grads.contains(c));
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::new();
        let w = t.param(mat(&[&[0.3, -0.7], &[1.1, 0.2]]));
        let x = t.constant(mat(&[&[1.0, 2.0], &[-3.0, 0.5]]));
        let h = t.matmul(x, w).unwrap();
        let r = t.relu(h);
        let loss = t.cross_entropy_sum(r, &[0, 1]).unwrap();
        assert_eq!(t.backward(loss).unwrap(), t.backward(loss).unwrap());
    }

    #[test]
    fn relu_gradient_is_zero_at_kink() {
        let mut t = Tape::new();
        let x = t.param(mat(&[&[0.0, 1.0, -1.0]]));
        let r = t.relu(x);
        let l = t.leaky_relu(x, 0.2);
        let s = t.add(r, l).unwrap();
        let loss = t.sum_all(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &mat(&[&[0.0, 2.0, 0.2]]));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let z = t.param(DenseMatrix::zeros(3, 4));
        let loss = t.cross_entropy_sum(z, &[0, 1, 3]).unwrap();
        assert!((t.value(loss).item().unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tri_solve_rejects_trainable_factor() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::zeros(2, 2));
        let l = t.param(DenseMatrix::identity(2));
        assert!(t.tri_solve_rows(x, l).is_err());
    }

    #[test]
    fn gat_requires_nonempty_neighborhoods() {
        let mut t = Tape::new();
        let wh = t.param(DenseMatrix::zeros(2, 1));
        let att = t.param(DenseMatrix::zeros(1, 2));
        let structure = Arc::new(SparseCsr::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap());
        assert!(t.gat_aggregate(wh, att, &structure, 0.2).is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
