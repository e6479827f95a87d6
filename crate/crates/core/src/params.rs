use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{DenseMatrix, Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices. Bound onto a fresh tape every forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(DenseMatrix::len).sum()
    }

    /// Registers every parameter as a tape leaf; the returned vector is indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Per-parameter gradients, zero-filled for parameters the loss did not reach.
    pub fn collect_grads(&self, bound: &[Var], grads: &Gradients) -> Vec<DenseMatrix> {
        self.values
            .iter()
            .zip(bound)
            .map(|(v, &var)| {
                grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| DenseMatrix::zeros(v.rows(), v.cols()))
            })
            .collect()
    }
}

/// Glorot-uniform matrix: entries in `±sqrt(6 / (rows + cols))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}
