//! Training objectives over the per-node selected layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamId, ParamSet};
use crate::tensor::{DenseMatrix, Tape, Var};

/// One linear classifier `h·V_l + c_l` per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoders {
    maps: Vec<(ParamId, ParamId)>,
}

impl Decoders {
    pub fn init(
        num_layers: usize,
        dim: usize,
        num_classes: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let maps = (0..num_layers)
            .map(|l| {
                (
                    params.push(format!("dec.{l}.w"), glorot_uniform(dim, num_classes, rng)),
                    params.push(format!("dec.{l}.b"), DenseMatrix::zeros(1, num_classes)),
                )
            })
            .collect();
        Self { maps }
    }

    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn map_for(&self, l: usize) -> (ParamId, ParamId) {
        self.maps[l]
    }

    /// Logits of decoder `l` for rows `h`.
    pub fn logits(&self, tape: &mut Tape, bound: &[Var], l: usize, h: Var) -> Result<Var> {
        let (w, b) = self.maps[l];
        let z = tape.matmul(h, bound[w.0])?;
        tape.add_row(z, bound[b.0])
    }

    /// Off-tape logits of decoder `l`.
    pub fn logits_value(&self, params: &ParamSet, l: usize, h: &DenseMatrix) -> Result<DenseMatrix> {
        let (w, b) = self.maps[l];
        h.matmul(params.get(w))?.add_row(params.get(b))
    }
}

/// Mean over `nodes` of the cross-entropy of the decoder of each node's
/// selected layer applied to that layer's embedding. `selections` and
/// `labels` are aligned with `nodes`.
pub fn personalized_ce_loss(
    tape: &mut Tape,
    bound: &[Var],
    stack: &[Var],
    decoders: &Decoders,
    nodes: &[usize],
    selections: &[usize],
    labels: &[usize],
) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::Contract("loss over an empty node set".into()));
    }
    if selections.len() != nodes.len() || labels.len() != nodes.len() {
        return Err(Error::shape(
            "personalized_ce_loss",
            format!("{} nodes, {} selections, {} labels", nodes.len(), selections.len(), labels.len()),
        ));
    }
    if stack.len() != decoders.num_layers() {
        return Err(Error::shape(
            "personalized_ce_loss",
            format!("{} layers for {} decoders", stack.len(), decoders.num_layers()),
        ));
    }
    if let Some(&l) = selections.iter().find(|&&l| l >= stack.len()) {
        return Err(Error::Contract(format!("selected layer {l} out of range")));
    }
    let mut total: Option<Var> = None;
    for (l, &h) in stack.iter().enumerate() {
        let (rows, targets): (Vec<usize>, Vec<usize>) = nodes
            .iter()
            .zip(selections)
            .zip(labels)
            .filter(|((_, &s), _)| s == l)
            .map(|((&i, _), &y)| (i, y))
            .unzip();
        if rows.is_empty() {
            continue;
        }
        let picked = tape.gather_rows(h, &rows)?;
        let logits = decoders.logits(tape, bound, l, picked)?;
        let part = tape.cross_entropy_sum(logits, &targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    let total = total.expect("at least one node contributes");
    Ok(tape.scale(total, 1.0 / nodes.len() as f64))
}

/// Mean hinge `max(0, α + d_y at the selected layer + log Σ_{l, j≠y} exp(-d_j at l))`.
/// `dists[l]` holds the distances of the loss rows at layer `l`.
pub fn distance_margin_loss(
    tape: &mut Tape,
    dists: &[Var],
    selections: &[usize],
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    tape.distance_margin(dists, selections, labels, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_sum_exp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_c() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoders::init(2, 3, 4, &mut params, &mut rng);
        for v in params.values_mut() {
            *v = DenseMatrix::zeros(v.rows(), v.cols());
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.constant(glorot_uniform(5, 3, &mut rng));
        let loss = personalized_ce_loss(&mut tape, &bound, &[h, h], &dec, &[0, 2, 4], &[0, 1, 1], &[3, 0, 2]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut params = ParamSet::new();
        let dec = Decoders::init(1, 2, 2, &mut params, &mut ChaCha8Rng::seed_from_u64(0));
        *params.get_mut(ParamId(0)) = DenseMatrix::identity(2).scale(100.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.constant(DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let loss = personalized_ce_loss(&mut tape, &bound, &[h], &dec, &[0, 1], &[0, 0], &[0, 1]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-40);
    }

    #[test]
    fn matches_per_node_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let dec = Decoders::init(3, 4, 3, &mut params, &mut rng);
        for v in params.values_mut() {
            *v = glorot_uniform(v.rows(), v.cols(), &mut rng);
        }
        let hs: Vec<DenseMatrix> = (0..3).map(|_| glorot_uniform(10, 4, &mut rng).scale(2.0)).collect();
        let nodes: Vec<usize> = (0..10).collect();
        let sel = [0, 2, 1, 1, 0, 2, 2, 0, 1, 0];
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let stack: Vec<Var> = hs.iter().map(|h| tape.constant(h.clone())).collect();
        let loss = personalized_ce_loss(&mut tape, &bound, &stack, &dec, &nodes, &sel, &labels).unwrap();

        let mut oracle = 0.0;
        for i in 0..10 {
            let logits = dec.logits_value(&params, sel[i], &hs[sel[i]].select_rows(&[i])).unwrap();
            oracle += log_sum_exp(logits.row(0)) - logits.get(0, labels[i]);
        }
        oracle /= 10.0;
        assert!((tape.value(loss).item().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn selection_out_of_range_is_rejected() {
        let mut params = ParamSet::new();
        let dec = Decoders::init(1, 2, 2, &mut params, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = tape.constant(DenseMatrix::zeros(2, 2));
        assert!(personalized_ce_loss(&mut tape, &bound, &[h], &dec, &[0], &[1], &[0]).is_err());
    }

    #[test]
    fn distance_margin_closed_forms() {
        let mut tape = Tape::new();
        // all distances 0, C = 2, two layers: two wrong-class terms
        let d0 = tape.constant(DenseMatrix::zeros(3, 2));
        let d1 = tape.constant(DenseMatrix::zeros(3, 2));
        let loss = distance_margin_loss(&mut tape, &[d0, d1], &[0, 1, 1], &[0, 1, 0], 1.0).unwrap();
        assert!((tape.value(loss).item().unwrap() - (1.0 + 2f64.ln())).abs() < 1e-15);

        let far = tape.constant(DenseMatrix::from_rows(&[[0.0, f64::INFINITY]]).unwrap());
        let loss = distance_margin_loss(&mut tape, &[far], &[0], &[0], 1.0).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn distance_margin_matches_per_node_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds: Vec<DenseMatrix> = (0..3).map(|_| glorot_uniform(6, 4, &mut rng).map(|v| v.abs() * 4.0)).collect();
        let sel = [0, 1, 2, 2, 1, 0];
        let labels = [3, 0, 1, 2, 3, 0];
        let mut tape = Tape::new();
        let vars: Vec<Var> = ds.iter().map(|d| tape.param(d.clone())).collect();
        let loss = distance_margin_loss(&mut tape, &vars, &sel, &labels, 0.5).unwrap();
        let mut oracle = 0.0;
        for i in 0..6 {
            let wrong: Vec<f64> = ds
                .iter()
                .flat_map(|d| (0..4).filter(|&j| j != labels[i]).map(move |j| -d.get(i, j)))
                .collect();
            oracle += (0.5 + ds[sel[i]].get(i, labels[i]) + log_sum_exp(&wrong)).max(0.0);
        }
        assert!((tape.value(loss).item().unwrap() - oracle / 6.0).abs() < 1e-10);
    }
}
