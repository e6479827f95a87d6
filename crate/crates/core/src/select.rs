//! Per-node layer selection policies.
//!
//! Every rule scans layers in increasing order and only moves on a strict
//! improvement, so ties resolve to the smaller layer index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::DistanceTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "final")]
    Final,
    #[serde(rename = "metselect")]
    MetSelect,
    #[serde(rename = "metselect-max")]
    MetSelectMax,
}

impl Policy {
    pub fn uses_moments(self) -> bool {
        self != Policy::Final
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Final => "final",
            Policy::MetSelect => "metselect",
            Policy::MetSelectMax => "metselect-max",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Policy::Final),
            "metselect" => Ok(Policy::MetSelect),
            "metselect-max" => Ok(Policy::MetSelectMax),
            other => Err(Error::Config(format!(
                "unknown policy {other:?}, expected final|metselect|metselect-max"
            ))),
        }
    }
}

#[derive(Clone, Copy)]
enum Dir {
    Max,
    Min,
}

fn arg_opt(scores: impl IntoIterator<Item = f64>, dir: Dir) -> usize {
    let mut best = 0;
    let mut best_score = None;
    for (l, s) in scores.into_iter().enumerate() {
        let better = match (best_score, dir) {
            (None, _) => true,
            (Some(b), Dir::Max) => s > b,
            (Some(b), Dir::Min) => s < b,
        };
        if better {
            best = l;
            best_score = Some(s);
        }
    }
    best
}

fn row_max(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn row_min(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Inference rule over per-layer probability rows `probs[l][c]`.
///
/// Default: the layer whose most likely class is most probable.
/// `literal`: the layer holding the smallest probability of all.
pub fn select_inference(probs: &[Vec<f64>], literal: bool) -> usize {
    if literal {
        arg_opt(probs.iter().map(|p| row_min(p)), Dir::Min)
    } else {
        arg_opt(probs.iter().map(|p| row_max(p)), Dir::Max)
    }
}

/// Training rule given the true label `y`.
///
/// Default: the layer where `y` is most probable. `literal`: where it is least probable.
pub fn select_training(probs: &[Vec<f64>], y: usize, literal: bool) -> usize {
    let dir = if literal { Dir::Min } else { Dir::Max };
    arg_opt(probs.iter().map(|p| p[y]), dir)
}

/// Inversion of the matching MetSelect rule: the same score with the
/// optimization direction swapped. `y` selects the training variant.
pub fn select_max_distance(probs: &[Vec<f64>], y: Option<usize>, literal: bool) -> usize {
    match (y, literal) {
        (Some(y), false) => arg_opt(probs.iter().map(|p| p[y]), Dir::Min),
        (Some(y), true) => arg_opt(probs.iter().map(|p| p[y]), Dir::Max),
        (None, false) => arg_opt(probs.iter().map(|p| row_max(p)), Dir::Min),
        (None, true) => arg_opt(probs.iter().map(|p| row_min(p)), Dir::Max),
    }
}

/// The last layer, for every node.
pub fn select_final(depth: usize, num_nodes: usize) -> Vec<usize> {
    vec![depth; num_nodes]
}

/// Layer per row of `dists` under `policy`. Passing `labels` (aligned with
/// the rows) switches MetSelect and its inversion to the training rule.
pub fn select_nodes(
    policy: Policy,
    dists: &DistanceTensor,
    labels: Option<&[usize]>,
    literal: bool,
) -> Vec<usize> {
    let rows = dists.num_rows();
    let depth = dists.num_layers().saturating_sub(1);
    (0..rows)
        .map(|i| {
            let y = labels.map(|ys| ys[i]);
            match policy {
                Policy::Final => depth,
                Policy::MetSelect => {
                    let probs = dists.probs(i);
                    match y {
                        Some(y) => select_training(&probs, y, literal),
                        None => select_inference(&probs, literal),
                    }
                }
                Policy::MetSelectMax => select_max_distance(&dists.probs(i), y, literal),
            }
        })
        .collect()
}

/// Share of nodes per layer `0..=depth`.
pub fn layer_histogram(selections: &[usize], depth: usize) -> Result<Vec<f64>> {
    if selections.is_empty() {
        return Err(Error::Undefined("layer histogram of an empty node set".into()));
    }
    let mut counts = vec![0usize; depth + 1];
    for &l in selections {
        if l > depth {
            return Err(Error::Contract(format!("selected layer {l} beyond depth {depth}")));
        }
        counts[l] += 1;
    }
    let n = selections.len() as f64;
    Ok(counts.into_iter().map(|k| k as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    #[test]
    fn single_layer_always_zero() {
        let p = vec![vec![0.3, 0.7]];
        assert_eq!(select_inference(&p, false), 0);
        assert_eq!(select_inference(&p, true), 0);
        assert_eq!(select_training(&p, 1, false), 0);
        assert_eq!(select_max_distance(&p, None, false), 0);
        assert_eq!(select_max_distance(&p, Some(0), true), 0);
    }

    #[test]
    fn dominant_layer_wins() {
        let p = vec![vec![0.9, 0.1], vec![0.6, 0.4]];
        assert_eq!(select_inference(&p, false), 0);
        assert_eq!(select_max_distance(&p, None, false), 1);
        // literal reading picks the layer holding the smallest probability
        assert_eq!(select_inference(&p, true), 0);
        assert_eq!(select_training(&p, 1, false), 1);
        assert_eq!(select_training(&p, 1, true), 0);
    }

    #[test]
    fn ties_go_to_smaller_layer() {
        let p = vec![vec![0.5, 0.5]; 3];
        assert_eq!(select_training(&p, 0, false), 0);
        assert_eq!(select_training(&p, 0, true), 0);
        assert_eq!(select_inference(&p, false), 0);
        assert_eq!(select_max_distance(&p, Some(1), false), 0);
    }

    #[test]
    fn final_and_histograms() {
        assert_eq!(select_final(2, 3), vec![2, 2, 2]);
        assert_eq!(select_final(0, 1), vec![0]);
        assert_eq!(layer_histogram(&[2, 2, 2], 2).unwrap(), vec![0.0, 0.0, 1.0]);
        let uniform: Vec<usize> = (0..300).map(|i| i % 3).collect();
        for share in layer_histogram(&uniform, 2).unwrap() {
            assert!((share - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(layer_histogram(&[], 2).is_err());
        assert!(layer_histogram(&[3], 2).is_err());
    }

    #[test]
    fn final_policy_ignores_distances() {
        let t = DistanceTensor {
            layers: vec![DenseMatrix::zeros(4, 2); 3],
        };
        assert_eq!(select_nodes(Policy::Final, &t, None, false), vec![2; 4]);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [Policy::Final, Policy::MetSelect, Policy::MetSelectMax] {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("best".parse::<Policy>().is_err());
    }
}
