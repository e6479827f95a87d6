use crate::graph::Graph;
use crate::tensor::SparseCsr;

/// `D^{-1/2}·A·D^{-1/2}` over the symmetric adjacency, with `A + I` when
/// `self_loops` is set. Rows of isolated nodes stay empty.
pub fn normalize_adjacency(g: &Graph, self_loops: bool) -> SparseCsr {
    let adj = g.adjacency(self_loops);
    let inv_sqrt: Vec<f64> = adj
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut values = Vec::with_capacity(adj.nnz());
    for r in 0..adj.rows() {
        let (idx, vals) = adj.row(r);
        for (&c, &v) in idx.iter().zip(vals) {
            values.push(v * inv_sqrt[r] * inv_sqrt[c]);
        }
    }
    SparseCsr::new(
        adj.rows(),
        adj.cols(),
        adj.offsets().to_vec(),
        adj.indices().to_vec(),
        values,
    )
    .expect("same structure as the adjacency")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    fn graph(n: usize, edges: Vec<(usize, usize)>) -> Graph {
        Graph::new(DenseMatrix::zeros(n, 1), edges, vec![0; n], 1).unwrap()
    }

    #[test]
    fn single_edge() {
        let a = normalize_adjacency(&graph(2, vec![(0, 1)]), false).to_dense();
        assert_eq!(a, DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        // D = diag(2, 2) with the self-loop
        let a = normalize_adjacency(&graph(2, vec![(0, 1)]), true).to_dense();
        assert!(a.max_abs_diff(&DenseMatrix::filled(2, 2, 0.5)) < 1e-15);
    }

    #[test]
    fn triangle_off_diagonals_are_half() {
        let a = normalize_adjacency(&graph(3, vec![(0, 1), (1, 2), (0, 2)]), false).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((a.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_rows_are_zero() {
        let a = normalize_adjacency(&graph(3, vec![(0, 1)]), false);
        assert_eq!(a.row(2).0.len(), 0);
        let a = normalize_adjacency(&graph(3, vec![(0, 1)]), true);
        assert_eq!(a.get(2, 2), 1.0);
    }
}
