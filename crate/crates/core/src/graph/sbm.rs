use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::DenseMatrix;

/// Stochastic block model with class-shifted Gaussian features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub n: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Length of each class-mean offset.
    pub mu_sig: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_in) || !prob(self.p_out) {
            return Err(Error::Config(format!(
                "edge probabilities ({}, {}) must lie in [0, 1]",
                self.p_in, self.p_out
            )));
        }
        if self.classes == 0 || self.n < self.classes {
            return Err(Error::Config(format!(
                "need n >= classes >= 1, got n = {}, classes = {}",
                self.n, self.classes
            )));
        }
        if !(self.mu_sig >= 0.0) {
            return Err(Error::Config(format!("mu_sig {} must be >= 0", self.mu_sig)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Labels are assigned round-robin (`i mod classes`); each unordered pair is
/// joined with probability `p_in` (same label) or `p_out`. Node features are
/// `mu_sig · u_y + N(0, I)` for a random unit direction `u_y` per class.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;

    let directions: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();

    let mut edges = Vec::new();
    for u in 0..spec.n {
        for v in u + 1..spec.n {
            let p = if labels[u] == labels[v] {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut features = DenseMatrix::zeros(spec.n, f);
    for (i, &y) in labels.iter().enumerate() {
        for (x, &u) in features.row_mut(i).iter_mut().zip(&directions[y]) {
            let noise: f64 = rng.sample(StandardNormal);
            *x = spec.mu_sig * u + noise;
        }
    }

    Graph::new(features, edges, labels, spec.classes)
}
