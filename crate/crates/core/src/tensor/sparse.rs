use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Compressed sparse row matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCsr {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCsr {
    /// Validates the CSR invariants before taking ownership of the buffers.
    pub fn new(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != rows + 1 {
            return Err(Error::shape(
                "csr",
                format!("{} offsets for {rows} rows", offsets.len()),
            ));
        }
        if offsets[0] != 0 || offsets[rows] != indices.len() || indices.len() != values.len() {
            return Err(Error::shape(
                "csr",
                "offsets do not span the index/value buffers",
            ));
        }
        for r in 0..rows {
            if offsets[r] > offsets[r + 1] {
                return Err(Error::Contract(format!("csr offsets decrease at row {r}")));
            }
            let row = &indices[offsets[r]..offsets[r + 1]];
            for (k, &c) in row.iter().enumerate() {
                if c >= cols {
                    return Err(Error::Contract(format!(
                        "csr column {c} out of range in row {r}"
                    )));
                }
                if k > 0 && row[k - 1] >= c {
                    return Err(Error::Contract(format!(
                        "csr columns unsorted or duplicated in row {r}"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are an error.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (k, &(r, c, v)) in triplets.iter().enumerate() {
            if r >= rows || c >= cols {
                return Err(Error::Contract(format!(
                    "triplet ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if k > 0 && triplets[k - 1].0 == r && triplets[k - 1].1 == c {
                return Err(Error::Contract(format!("duplicate entry ({r}, {c})")));
            }
            offsets[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self::new(rows, cols, offsets, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            offsets: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[r]..self.offsets[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let offsets = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // rows visited in order, so each transposed row comes out sorted
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                let slot = next[c];
                indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            offsets,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// `self · x`
    pub fn spmm(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != x.rows() {
            return Err(Error::shape(
                "spmm",
                format!(
                    "{}x{} sparse times {}x{} dense",
                    self.rows,
                    self.cols,
                    x.rows(),
                    x.cols()
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, x.cols());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let o = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (acc, &xv) in o.iter_mut().zip(x.row(c)) {
                    *acc += v * xv;
                }
            }
        }
        Ok(out)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_structure() {
        assert!(SparseCsr::new(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(SparseCsr::new(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(SparseCsr::new(1, 2, vec![0, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseCsr::new(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(SparseCsr::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let a = SparseCsr::from_triplets(2, 3, vec![(0, 2, 1.5), (1, 0, -2.0), (0, 0, 3.0)]).unwrap();
        let t = a.transpose();
        assert_eq!(t.to_dense(), a.to_dense().transpose());
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn spmm_shape_error() {
        let a = SparseCsr::identity(3);
        assert!(a.spmm(&DenseMatrix::zeros(2, 2)).is_err());
    }
}
