//! Attributed graphs, dataset I/O, adjacency normalization, synthetic
//! generation, splits and homophily.

mod io;
mod normalize;
mod sbm;
mod splits;

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, SparseCsr};

pub use io::{load_dataset, load_dataset_with, save_dataset};
pub use normalize::normalize_adjacency;
pub use sbm::{generate_sbm, SbmSpec};
pub use splits::{make_splits, Split, SplitFractions, SplitSet};

/// Undirected node-labelled graph with a dense feature matrix.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted; self-loops are
/// never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: DenseMatrix,
    edges: Vec<(usize, usize)>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Graph {
    pub fn new(
        features: DenseMatrix,
        edges: Vec<(usize, usize)>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Contract(format!(
                "label {y} of node {i} outside [0, {num_classes})"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Contract("features contain non-finite values".into()));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Contract(format!("edge ({u}, {v}) outside {n} nodes")));
            }
            if u == v {
                return Err(Error::Contract(format!("self-loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self {
            features,
            edges: canon,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edge_set(&self) -> HashSet<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    /// Same nodes, features and labels with a different edge list.
    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            edges,
            self.labels.clone(),
            self.num_classes,
        )
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Symmetric 0/1 adjacency, optionally with the identity added.
    pub fn adjacency(&self, self_loops: bool) -> SparseCsr {
        let n = self.num_nodes();
        let mut triplets = Vec::with_capacity(2 * self.edges.len() + n);
        for &(u, v) in &self.edges {
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        if self_loops {
            triplets.extend((0..n).map(|i| (i, i, 1.0)));
        }
        SparseCsr::from_triplets(n, n, triplets).expect("graph invariants give a valid adjacency")
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation of the node ids".into()));
        }
        let mut features = DenseMatrix::zeros(n, self.feature_dim());
        let mut labels = vec![0; n];
        for i in 0..n {
            features.row_mut(perm[i]).copy_from_slice(self.features.row(i));
            labels[perm[i]] = self.labels[i];
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(features, edges, labels, self.num_classes)
    }
}

/// Fraction of edges whose endpoints share a label.
pub fn edge_label_homophily(g: &Graph) -> Result<f64> {
    if g.num_edges() == 0 {
        return Err(Error::Undefined("edge homophily of a graph without edges".into()));
    }
    let same = g
        .edges()
        .iter()
        .filter(|&&(u, v)| g.labels()[u] == g.labels()[v])
        .count();
    Ok(same as f64 / g.num_edges() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(edges: Vec<(usize, usize)>, labels: Vec<usize>) -> Result<Graph> {
        let n = labels.len();
        let c = labels.iter().max().map_or(1, |m| m + 1);
        Graph::new(DenseMatrix::zeros(n, 2), edges, labels, c)
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(toy(vec![(0, 0)], vec![0, 1]).is_err());
        assert!(toy(vec![(0, 2)], vec![0, 1]).is_err());
        assert!(toy(vec![(0, 1), (1, 0)], vec![0, 1]).is_err());
        assert!(Graph::new(DenseMatrix::zeros(2, 1), vec![], vec![0, 3], 2).is_err());
        assert!(Graph::new(DenseMatrix::filled(2, 1, f64::NAN), vec![], vec![0, 1], 2).is_err());
    }

    #[test]
    fn homophily_extremes() {
        let same = toy(vec![(0, 1), (1, 2)], vec![0, 0, 0]).unwrap();
        assert_eq!(edge_label_homophily(&same).unwrap(), 1.0);
        let cross = toy(vec![(0, 2), (0, 3), (1, 2), (1, 3)], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(edge_label_homophily(&cross).unwrap(), 0.0);
        let empty = toy(vec![], vec![0, 1]).unwrap();
        assert!(matches!(edge_label_homophily(&empty), Err(Error::Undefined(_))));
    }

    #[test]
    fn homophily_is_permutation_invariant() {
        let g = toy(vec![(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)], vec![0, 1, 1, 0]).unwrap();
        let p = g.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(
            edge_label_homophily(&g).unwrap(),
            edge_label_homophily(&p).unwrap()
        );
    }
}
