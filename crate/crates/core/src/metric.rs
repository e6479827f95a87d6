//! Per-layer class prototypes and pooled-covariance Mahalanobis distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamId, ParamSet};
use crate::tensor::linalg::{cholesky, solve_lower_in_place};
use crate::tensor::{log_sum_exp, DenseMatrix, Tape, Var};

/// Affine maps `h̃ = h·Wᵀ + b`, one per layer or a single shared one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTransforms {
    maps: Vec<(ParamId, ParamId)>,
    shared: bool,
}

impl LayerTransforms {
    pub fn init(
        num_layers: usize,
        dim: usize,
        shared: bool,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let count = if shared { 1 } else { num_layers };
        let maps = (0..count)
            .map(|l| {
                let tag = if shared { "shared".to_string() } else { l.to_string() };
                (
                    params.push(format!("tf.{tag}.w"), glorot_uniform(dim, dim, rng)),
                    params.push(format!("tf.{tag}.b"), DenseMatrix::zeros(1, dim)),
                )
            })
            .collect();
        Self { maps, shared }
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Parameter handles `(W, b)` used for layer `l`.
    pub fn map_for(&self, l: usize) -> (ParamId, ParamId) {
        if self.shared {
            self.maps[0]
        } else {
            self.maps[l]
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &[Var], stack: &[Var]) -> Result<Vec<Var>> {
        if !self.shared && stack.len() != self.maps.len() {
            return Err(Error::shape(
                "transform_stack",
                format!("{} layers for {} transforms", stack.len(), self.maps.len()),
            ));
        }
        stack
            .iter()
            .enumerate()
            .map(|(l, &h)| {
                let (w, b) = self.map_for(l);
                transform_layer(tape, h, bound[w.0], bound[b.0])
            })
            .collect()
    }
}

/// `h·Wᵀ + b`
pub fn transform_layer(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let hw = tape.matmul_t(h, w)?;
    tape.add_row(hw, b)
}

fn check_train(h: &DenseMatrix, labels: &[usize], train: &[usize]) -> Result<()> {
    if labels.len() != h.rows() {
        return Err(Error::shape(
            "moments",
            format!("{} labels for {} rows", labels.len(), h.rows()),
        ));
    }
    if let Some(&i) = train.iter().find(|&&i| i >= h.rows()) {
        return Err(Error::shape("moments", format!("train node {i} out of {} rows", h.rows())));
    }
    Ok(())
}

/// Class means over the train rows and the per-class counts.
pub fn class_means(
    h: &DenseMatrix,
    labels: &[usize],
    train: &[usize],
    num_classes: usize,
) -> Result<(DenseMatrix, Vec<usize>)> {
    check_train(h, labels, train)?;
    let mut sums = DenseMatrix::zeros(num_classes, h.cols());
    let mut counts = vec![0usize; num_classes];
    for &i in train {
        let y = labels[i];
        counts[y] += 1;
        for (s, &v) in sums.row_mut(y).iter_mut().zip(h.row(i)) {
            *s += v;
        }
    }
    finish_means(sums, &counts)
}

fn finish_means(mut sums: DenseMatrix, counts: &[usize]) -> Result<(DenseMatrix, Vec<usize>)> {
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Moment(format!("class {c} has no train node")));
    }
    for (c, &k) in counts.iter().enumerate() {
        for v in sums.row_mut(c) {
            *v /= k as f64;
        }
    }
    Ok((sums, counts.to_vec()))
}

/// `(1 / (N - 1)) Σ_i (h_i - μ_{y_i})(h_i - μ_{y_i})ᵀ` over the train rows.
pub fn pooled_covariance(
    h: &DenseMatrix,
    labels: &[usize],
    train: &[usize],
    means: &DenseMatrix,
) -> Result<DenseMatrix> {
    check_train(h, labels, train)?;
    if train.len() < 2 {
        return Err(Error::Moment(format!(
            "pooled covariance needs at least 2 train nodes, got {}",
            train.len()
        )));
    }
    let d = h.cols();
    let mut k = DenseMatrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for &i in train {
        for ((o, &v), &m) in diff.iter_mut().zip(h.row(i)).zip(means.row(labels[i])) {
            *o = v - m;
        }
        add_outer(&mut k, &diff, 1.0);
    }
    let k = k.scale(1.0 / (train.len() - 1) as f64);
    Ok(symmetrize(&k))
}

/// `(S - Σ_c N_c μ_c μ_cᵀ) / (N - 1)` from the raw second moment `S = Σ h hᵀ`.
pub fn pooled_covariance_from_moments(
    second_moment: &DenseMatrix,
    means: &DenseMatrix,
    counts: &[usize],
) -> Result<DenseMatrix> {
    let n: usize = counts.iter().sum();
    if n < 2 {
        return Err(Error::Moment(format!(
            "pooled covariance needs at least 2 train nodes, got {n}"
        )));
    }
    let mut k = second_moment.clone();
    for (c, &nc) in counts.iter().enumerate() {
        add_outer(&mut k, means.row(c), -(nc as f64));
    }
    Ok(symmetrize(&k.scale(1.0 / (n - 1) as f64)))
}

fn add_outer(k: &mut DenseMatrix, v: &[f64], w: f64) {
    let d = v.len();
    for a in 0..d {
        let va = w * v[a];
        if va == 0.0 {
            continue;
        }
        for (o, &vb) in k.row_mut(a).iter_mut().zip(v) {
            *o += va * vb;
        }
    }
}

fn symmetrize(k: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(k.rows(), k.cols(), |a, b| 0.5 * (k.get(a, b) + k.get(b, a)))
}

/// Ridge `ε = max(1e-6, 1e-4·trace(K)/d)` and the Cholesky factor of
/// `K + ε·I`, growing `ε` tenfold up to three times if factorization fails.
pub fn regularize_and_factor(k: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let d = k.rows();
    if k.cols() != d || d == 0 {
        return Err(Error::shape("regularize_and_factor", format!("{}x{}", d, k.cols())));
    }
    if !k.is_finite() {
        return Err(Error::Numerical("covariance has non-finite entries".into()));
    }
    let sym = symmetrize(k);
    let mut eps = (1e-4 * sym.trace() / d as f64).max(1e-6);
    for attempt in 0..=3 {
        if attempt > 0 {
            eps *= 10.0;
        }
        let mut reg = sym.clone();
        for i in 0..d {
            reg.set(i, i, reg.get(i, i) + eps);
        }
        if let Some(l) = cholesky(&reg)? {
            return Ok((eps, l));
        }
    }
    Err(Error::Numerical(format!(
        "covariance not positive definite after regularization up to {eps:e}"
    )))
}

/// `(x - μ)ᵀ (L Lᵀ)⁻¹ (x - μ)` via one triangular solve.
pub fn mahalanobis(x: &[f64], mu: &[f64], factor: &DenseMatrix) -> f64 {
    let mut z: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    solve_lower_in_place(factor, &mut z);
    z.iter().map(|v| v * v).sum()
}

/// Softmax of the negated distances.
pub fn layer_class_probs(distances: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = distances.iter().map(|d| -d).collect();
    let lse = log_sum_exp(&neg);
    neg.iter().map(|v| (v - lse).exp()).collect()
}

/// Prototype statistics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub means: DenseMatrix,
    pub counts: Vec<usize>,
    pub covariance: DenseMatrix,
    pub eps: f64,
    /// Lower Cholesky factor `L` of `K + ε·I`.
    pub factor: DenseMatrix,
    /// Rows `L⁻¹·μ_c`, so distances become plain squared norms after whitening.
    pub whitened_means: DenseMatrix,
}

impl LayerMoments {
    pub fn new(means: DenseMatrix, counts: Vec<usize>, covariance: DenseMatrix) -> Result<Self> {
        let (eps, factor) = regularize_and_factor(&covariance)?;
        let mut whitened_means = means.clone();
        for c in 0..whitened_means.rows() {
            solve_lower_in_place(&factor, whitened_means.row_mut(c));
        }
        Ok(Self {
            means,
            counts,
            covariance,
            eps,
            factor,
            whitened_means,
        })
    }

    /// Distances from each row of `h` to every class prototype (`rows x C`).
    pub fn distances(&self, h: &DenseMatrix) -> DenseMatrix {
        let c = self.means.rows();
        let mut out = DenseMatrix::zeros(h.rows(), c);
        let mut z = vec![0.0; h.cols()];
        for i in 0..h.rows() {
            z.copy_from_slice(h.row(i));
            solve_lower_in_place(&self.factor, &mut z);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = z
                    .iter()
                    .zip(self.whitened_means.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        out
    }
}

/// Moments of every layer, stamped with the epoch whose parameters produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub layers: Vec<LayerMoments>,
    pub epoch: usize,
}

impl ClassMoments {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Distances of the selected rows at every layer, off the tape.
    pub fn distance_tensor(&self, transformed: &[DenseMatrix], rows: &[usize]) -> Result<DistanceTensor> {
        if transformed.len() != self.layers.len() {
            return Err(Error::shape(
                "distance_tensor",
                format!("{} layers for {} moment sets", transformed.len(), self.layers.len()),
            ));
        }
        let layers = transformed
            .iter()
            .zip(&self.layers)
            .map(|(h, m)| m.distances(&h.select_rows(rows)))
            .collect();
        Ok(DistanceTensor { layers })
    }

    /// Distances of the selected rows at every layer, recorded on the tape
    /// with the moments as constant leaves.
    pub fn distances_on_tape(&self, tape: &mut Tape, transformed: &[Var], rows: &[usize]) -> Result<Vec<Var>> {
        if transformed.len() != self.layers.len() {
            return Err(Error::shape(
                "distances_on_tape",
                format!("{} layers for {} moment sets", transformed.len(), self.layers.len()),
            ));
        }
        transformed
            .iter()
            .zip(&self.layers)
            .map(|(&h, m)| {
                let picked = tape.gather_rows(h, rows)?;
                let factor = tape.constant(m.factor.clone());
                let centers = tape.constant(m.whitened_means.clone());
                let z = tape.tri_solve_rows(picked, factor)?;
                tape.sq_dist_to_centers(z, centers)
            })
            .collect()
    }
}

/// Per-layer `rows x C` distance matrices over some node list.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTensor {
    pub layers: Vec<DenseMatrix>,
}

impl DistanceTensor {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_rows(&self) -> usize {
        self.layers.first().map_or(0, DenseMatrix::rows)
    }

    /// Class probabilities of row `i`, one vector per layer.
    pub fn probs(&self, i: usize) -> Vec<Vec<f64>> {
        self.layers.iter().map(|d| layer_class_probs(d.row(i))).collect()
    }
}

/// Single-pass accumulator of per-class sums and the raw second moment.
///
/// Rows are shifted by the first row seen before accumulating; the
/// finalized statistics are unchanged but cancellation in `Σ h hᵀ - Σ N μ μᵀ`
/// stays small when embeddings sit far from the origin.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    shift: Option<Vec<f64>>,
    sums: DenseMatrix,
    counts: Vec<usize>,
    second: DenseMatrix,
    buf: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            shift: None,
            sums: DenseMatrix::zeros(num_classes, dim),
            counts: vec![0; num_classes],
            second: DenseMatrix::zeros(dim, dim),
            buf: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        let shift = self.shift.get_or_insert_with(|| row.to_vec());
        for ((b, &v), &s) in self.buf.iter_mut().zip(row).zip(shift.iter()) {
            *b = v - s;
        }
        for (s, &b) in self.sums.row_mut(label).iter_mut().zip(&self.buf) {
            *s += b;
        }
        self.counts[label] += 1;
        let buf = std::mem::take(&mut self.buf);
        add_outer(&mut self.second, &buf, 1.0);
        self.buf = buf;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn finalize(self) -> Result<LayerMoments> {
        let shift = self.shift.unwrap_or_else(|| vec![0.0; self.buf.len()]);
        let (shifted_means, counts) = finish_means(self.sums, &self.counts)?;
        let cov = pooled_covariance_from_moments(&self.second, &shifted_means, &counts)?;
        let mut means = shifted_means;
        for c in 0..means.rows() {
            for (m, &s) in means.row_mut(c).iter_mut().zip(&shift) {
                *m += s;
            }
        }
        LayerMoments::new(means, counts, cov)
    }
}

/// One pass over the train rows of every transformed layer.
pub fn moments_epoch_pass(
    transformed: &[DenseMatrix],
    labels: &[usize],
    train: &[usize],
    num_classes: usize,
    epoch: usize,
) -> Result<ClassMoments> {
    let layers = transformed
        .iter()
        .enumerate()
        .map(|(l, h)| {
            check_train(h, labels, train)?;
            let mut acc = MomentAccumulator::new(num_classes, h.cols());
            for &i in train {
                acc.push(h.row(i), labels[i]);
            }
            acc.finalize()
                .map_err(|e| Error::Moment(format!("layer {l}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassMoments { layers, epoch })
}

/// The two-pass reference path: class means, then centered covariance.
pub fn moments_batch(
    transformed: &[DenseMatrix],
    labels: &[usize],
    train: &[usize],
    num_classes: usize,
    epoch: usize,
) -> Result<ClassMoments> {
    let layers = transformed
        .iter()
        .map(|h| {
            let (means, counts) = class_means(h, labels, train, num_classes)?;
            let cov = pooled_covariance(h, labels, train, &means)?;
            LayerMoments::new(means, counts, cov)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassMoments { layers, epoch })
}
