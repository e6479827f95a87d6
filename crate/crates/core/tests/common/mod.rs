#![allow(dead_code)]

use metselect::graph::Graph;
use metselect::tensor::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Erdős–Rényi graph with uniform features in [-1, 1] and round-robin labels.
pub fn random_graph(n: usize, classes: usize, features: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::from_fn(n, features, |_, _| rng.random_range(-1.0..1.0));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|i| i % classes).collect();
    Graph::new(x, edges, labels, classes).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `A Aᵀ + I`, comfortably positive definite.
pub fn random_pd(d: usize, rng: &mut impl Rng) -> DenseMatrix {
    let a = random_matrix(d, d, rng);
    let mut k = a.matmul_t(&a).unwrap();
    for i in 0..d {
        k.set(i, i, k.get(i, i) + 1.0);
    }
    k
}

/// Gauss-Jordan inverse with partial pivoting, independent of the library's Cholesky path.
pub fn invert(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = DenseMatrix::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap();
        for k in 0..n {
            let (a, b) = (m.get(col, k), m.get(pivot, k));
            m.set(col, k, b);
            m.set(pivot, k, a);
            let (a, b) = (inv.get(col, k), inv.get(pivot, k));
            inv.set(col, k, b);
            inv.set(pivot, k, a);
        }
        let p = m.get(col, col);
        for k in 0..n {
            m.set(col, k, m.get(col, k) / p);
            inv.set(col, k, inv.get(col, k) / p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m.get(r, col);
            for k in 0..n {
                m.set(r, k, m.get(r, k) - f * m.get(col, k));
                inv.set(r, k, inv.get(r, k) - f * inv.get(col, k));
            }
        }
    }
    inv
}

/// `(x - μ)ᵀ K⁻¹ (x - μ)` through an explicit inverse.
pub fn explicit_mahalanobis(x: &[f64], mu: &[f64], k_inv: &DenseMatrix) -> f64 {
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for a in 0..diff.len() {
        for b in 0..diff.len() {
            total += diff[a] * k_inv.get(a, b) * diff[b];
        }
    }
    total
}
