//! Model assembly and the epoch loop with stale moments and validation
//! snapshots.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, GraphOperators};
use crate::error::{Error, Result};
use crate::eval::micro_f1;
use crate::graph::{Graph, Split};
use crate::loss::{distance_margin_loss, personalized_ce_loss, Decoders};
use crate::metric::{moments_epoch_pass, ClassMoments, DistanceTensor, LayerTransforms};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::select::{select_nodes, Policy};
use crate::tensor::{argmax, DenseMatrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Distance,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Distance => "distance",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "distance" => Ok(LossKind::Distance),
            other => Err(Error::Config(format!("unknown loss {other:?}, expected ce|distance"))),
        }
    }
}

/// How a trained model turns a node's selected layer into a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    /// The linear decoder of the selected layer.
    Decoder,
    /// The nearest class prototype at the selected layer.
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub policy: Policy,
    pub eq4_literal: bool,
    pub shared_transform: bool,
    /// Weight of an extra distance-margin term added to the cross-entropy loss.
    pub aux_distance_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ce,
            margin: 1.0,
            epochs: 500,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            policy: Policy::MetSelect,
            eq4_literal: false,
            shared_transform: false,
            aux_distance_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.aux_distance_weight >= 0.0) {
            return Err(Error::Config("aux_distance_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether the moment machinery and distance decoding are in play. The
    /// final-layer baseline always trains with cross-entropy on layer `L`.
    pub fn decode(&self) -> Decode {
        if self.policy != Policy::Final && self.loss == LossKind::Distance {
            Decode::Prototype
        } else {
            Decode::Decoder
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Encoder, per-layer transforms and decoders over one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub transforms: LayerTransforms,
    pub decoders: Decoders,
    pub params: ParamSet,
    pub num_classes: usize,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub stack: Vec<Var>,
    pub transformed: Vec<Var>,
}

impl Model {
    pub fn init(enc: &EncoderConfig, num_classes: usize, shared_transform: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::init(enc, &mut params, &mut rng)?;
        let layers = enc.depth + 1;
        let transforms = LayerTransforms::init(layers, enc.hidden, shared_transform, &mut params, &mut rng);
        let decoders = Decoders::init(layers, enc.hidden, num_classes, &mut params, &mut rng);
        Ok(Self {
            encoder,
            transforms,
            decoders,
            params,
            num_classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.encoder.depth()
    }

    /// Records the layer stack and, when `with_transforms` is set, the
    /// transformed stack.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        ops: &GraphOperators,
        features: &DenseMatrix,
        with_transforms: bool,
    ) -> Result<Forward> {
        let x = tape.constant(features.clone());
        let stack = self.encoder.forward(tape, bound, ops, x)?;
        let transformed = if with_transforms {
            self.transforms.apply(tape, bound, &stack)?
        } else {
            Vec::new()
        };
        Ok(Forward { stack, transformed })
    }

    /// Layer values and transformed layer values without keeping a tape.
    pub fn embed(&self, ops: &GraphOperators, features: &DenseMatrix) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &bound, ops, features, true)?;
        let take = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((take(&f.stack), take(&f.transformed)))
    }

    /// Selected layers and predicted classes for `nodes`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        stack: &[DenseMatrix],
        transformed: &[DenseMatrix],
        moments: Option<&ClassMoments>,
        policy: Policy,
        literal: bool,
        decode: Decode,
        nodes: &[usize],
    ) -> Result<Prediction> {
        let depth = self.depth();
        let needs_distances = policy.uses_moments() || decode == Decode::Prototype;
        let dists = if needs_distances {
            let m = moments.ok_or_else(|| Error::Contract("prediction needs class moments".into()))?;
            Some(m.distance_tensor(transformed, nodes)?)
        } else {
            None
        };
        let layers = match (&dists, policy) {
            (Some(d), p) if p != Policy::Final => select_nodes(p, d, None, literal),
            _ => vec![depth; nodes.len()],
        };
        let classes = match decode {
            Decode::Prototype => {
                let d = dists.as_ref().expect("prototype decoding computed distances");
                layers
                    .iter()
                    .enumerate()
                    .map(|(r, &l)| argmax(&d.layers[l].row(r).iter().map(|v| -v).collect::<Vec<_>>()))
                    .collect()
            }
            Decode::Decoder => {
                let mut out = vec![0; nodes.len()];
                for (l, h) in stack.iter().enumerate() {
                    let rows: Vec<usize> = (0..nodes.len()).filter(|&r| layers[r] == l).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let ids: Vec<usize> = rows.iter().map(|&r| nodes[r]).collect();
                    let logits = self.decoders.logits_value(&self.params, l, &h.select_rows(&ids))?;
                    for (k, &r) in rows.iter().enumerate() {
                        out[r] = argmax(logits.row(k));
                    }
                }
                out
            }
        };
        Ok(Prediction { layers, classes })
    }
}

/// Per-node selections and class predictions, aligned with the queried nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub layers: Vec<usize>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_f1: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    /// Parameters of the best validation epoch.
    pub model: Model,
    /// Moments computed from the snapshot parameters (absent for the
    /// final-layer baseline).
    pub moments: Option<ClassMoments>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub sec_per_epoch: f64,
}

impl TrainedModel {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "train_f1", "val_f1"])?;
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.train_f1),
                format!("{:?}", r.val_f1),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains on `split.train`, choosing the snapshot by validation micro-F1
/// (earliest epoch on ties).
///
/// Each epoch selects training layers with the moments of the previous
/// epoch (a bootstrap pass provides them for epoch 1), takes the loss and
/// its gradient, computes this epoch's moments from the same forward pass,
/// scores train and validation nodes with those parameters and moments, and
/// finally applies the Adam step.
pub fn train(g: &Graph, split: &Split, enc: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    enc.validate()?;
    split.validate(g)?;
    if enc.input_dim != g.feature_dim() {
        return Err(Error::Config(format!(
            "encoder input width {} but features have {} columns",
            enc.input_dim,
            g.feature_dim()
        )));
    }
    let missing = split.missing_train_classes(g);
    if !missing.is_empty() {
        return Err(Error::Split(format!("classes {missing:?} have no train node")));
    }

    let ops = GraphOperators::new(g, enc.self_loops);
    let features = g.features();
    let labels = g.labels();
    let c = g.num_classes();
    let mut model = Model::init(enc, c, cfg.shared_transform, cfg.seed)?;
    let depth = model.depth();
    let train_nodes = &split.train;
    let train_labels: Vec<usize> = train_nodes.iter().map(|&i| labels[i]).collect();
    let eval_nodes: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    let n_train = split.train.len();

    let uses_moments = cfg.policy.uses_moments();
    let decode = cfg.decode();
    let mut moments = if uses_moments {
        let (_, transformed) = model.embed(&ops, features).map_err(Error::at_epoch(0))?;
        Some(moments_epoch_pass(&transformed, labels, train_nodes, c, 0).map_err(Error::at_epoch(0))?)
    } else {
        None
    };

    let mut adam = Adam::new(cfg.adam(), &model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamSet, Option<ClassMoments>)> = None;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let at = Error::at_epoch(epoch);
        let step = (|| -> Result<(f64, Vec<DenseMatrix>, Option<ClassMoments>, Prediction)> {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let fwd = model.forward(&mut tape, &bound, &ops, features, uses_moments)?;

            let loss = match moments.as_ref() {
                None => {
                    let sel = vec![depth; n_train];
                    personalized_ce_loss(&mut tape, &bound, &fwd.stack, &model.decoders, train_nodes, &sel, &train_labels)?
                }
                Some(m) => {
                    let needs_tape_dists = decode == Decode::Prototype || cfg.aux_distance_weight > 0.0;
                    let (tape_dists, tensor) = if needs_tape_dists {
                        let d = m.distances_on_tape(&mut tape, &fwd.transformed, train_nodes)?;
                        let tensor = DistanceTensor {
                            layers: d.iter().map(|&v| tape.value(v).clone()).collect(),
                        };
                        (d, tensor)
                    } else {
                        let values: Vec<DenseMatrix> = fwd.transformed.iter().map(|&v| tape.value(v).clone()).collect();
                        (Vec::new(), m.distance_tensor(&values, train_nodes)?)
                    };
                    let sel = select_nodes(cfg.policy, &tensor, Some(&train_labels), cfg.eq4_literal);
                    match cfg.loss {
                        LossKind::Distance => distance_margin_loss(&mut tape, &tape_dists, &sel, &train_labels, cfg.margin)?,
                        LossKind::Ce => {
                            let ce = personalized_ce_loss(&mut tape, &bound, &fwd.stack, &model.decoders, train_nodes, &sel, &train_labels)?;
                            if cfg.aux_distance_weight > 0.0 {
                                let aux = distance_margin_loss(&mut tape, &tape_dists, &sel, &train_labels, cfg.margin)?;
                                let aux = tape.scale(aux, cfg.aux_distance_weight);
                                tape.add(ce, aux)?
                            } else {
                                ce
                            }
                        }
                    }
                }
            };
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss_value}")));
            }
            let grads = model.params.collect_grads(&bound, &tape.backward(loss)?);

            let stack: Vec<DenseMatrix> = fwd.stack.iter().map(|&v| tape.value(v).clone()).collect();
            let transformed: Vec<DenseMatrix> = fwd.transformed.iter().map(|&v| tape.value(v).clone()).collect();
            let fresh = if uses_moments {
                Some(moments_epoch_pass(&transformed, labels, train_nodes, c, epoch)?)
            } else {
                None
            };
            let pred = model.predict(&stack, &transformed, fresh.as_ref(), cfg.policy, cfg.eq4_literal, decode, &eval_nodes)?;
            Ok((loss_value, grads, fresh, pred))
        })();
        let (loss_value, grads, fresh, pred) = step.map_err(at)?;

        let mut full = vec![0usize; g.num_nodes()];
        for (&i, &y) in eval_nodes.iter().zip(&pred.classes) {
            full[i] = y;
        }
        let train_f1 = micro_f1(&full, labels, &split.train)?;
        let val_f1 = if split.val.is_empty() {
            train_f1
        } else {
            micro_f1(&full, labels, &split.val)?
        };
        history.push(EpochRecord {
            epoch,
            loss: loss_value,
            train_f1,
            val_f1,
        });
        if best.as_ref().is_none_or(|b| val_f1 > b.0) {
            best = Some((val_f1, epoch, model.params.clone(), fresh.clone()));
        }
        adam.step(&mut model.params, &grads).map_err(Error::at_epoch(epoch))?;
        moments = fresh;
    }

    let sec_per_epoch = started.elapsed().as_secs_f64() / cfg.epochs as f64;
    let (_, best_epoch, params, best_moments) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainedModel {
        model,
        moments: best_moments,
        best_epoch,
        history,
        config: cfg.clone(),
        sec_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Arch;
    use crate::graph::{generate_sbm, make_splits, SbmSpec, SplitFractions};

    fn small() -> (Graph, Split) {
        let g = generate_sbm(&SbmSpec {
            n: 60,
            classes: 3,
            p_in: 0.2,
            p_out: 0.02,
            feature_dim: 6,
            mu_sig: 2.0,
            seed: 1,
        })
        .unwrap();
        let s = make_splits(&g, SplitFractions::default(), 1, 0).unwrap().remove(0);
        (g, s)
    }

    fn cfg(policy: Policy, loss: LossKind, epochs: usize) -> TrainConfig {
        TrainConfig {
            policy,
            loss,
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_config_error() {
        let (g, s) = small();
        let enc = EncoderConfig::new(Arch::Gcn, 2, 8, 6);
        assert!(matches!(train(&g, &s, &enc, &cfg(Policy::MetSelect, LossKind::Ce, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_is_best_and_earliest() {
        let (g, s) = small();
        let enc = EncoderConfig::new(Arch::Gcn, 2, 8, 6);
        for policy in [Policy::Final, Policy::MetSelect] {
            let t = train(&g, &s, &enc, &cfg(policy, LossKind::Ce, 40)).unwrap();
            assert_eq!(t.history.len(), 40);
            let best = t.history[t.best_epoch - 1].val_f1;
            assert!(t.history.iter().all(|r| r.val_f1 <= best));
            assert!(t.history[..t.best_epoch - 1].iter().all(|r| r.val_f1 < best));
            assert_eq!(t.moments.is_some(), policy != Policy::Final);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (g, s) = small();
        let enc = EncoderConfig::new(Arch::Gat, 2, 8, 6);
        let c = cfg(Policy::MetSelect, LossKind::Distance, 15);
        let a = train(&g, &s, &enc, &c).unwrap();
        let b = train(&g, &s, &enc, &c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.moments, b.moments);
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let (g, s) = small();
        let enc = EncoderConfig::new(Arch::Gcn, 2, 8, 6);
        for (policy, loss) in [(Policy::Final, LossKind::Ce), (Policy::MetSelect, LossKind::Ce), (Policy::MetSelect, LossKind::Distance)] {
            let t = train(&g, &s, &enc, &cfg(policy, loss, 60)).unwrap();
            let first = t.history[0].loss;
            let last = t.history.last().unwrap().loss;
            assert!(last < first, "{policy} {loss}: {first} -> {last}");
        }
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let (g, s) = small();
        let enc = EncoderConfig::new(Arch::Gin, 1, 4, 6);
        let t = train(&g, &s, &enc, &cfg(Policy::MetSelectMax, LossKind::Ce, 5)).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("h.csv");
        t.write_history_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("epoch,loss,train_f1,val_f1\n"));
    }
}
