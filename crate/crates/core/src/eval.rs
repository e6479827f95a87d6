//! Accuracy metrics, split aggregation and end-to-end evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::GraphOperators;
use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::metric::moments_epoch_pass;
use crate::select::{layer_histogram, Policy};
use crate::train::{Decode, Model, TrainedModel};

/// Fraction of `mask` nodes whose prediction equals the label. With one
/// label per node this is plain accuracy.
pub fn micro_f1(predictions: &[usize], labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Undefined("micro-F1 over an empty mask".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "micro_f1",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut correct = 0usize;
    for &i in mask {
        if i >= labels.len() {
            return Err(Error::shape("micro_f1", format!("mask node {i} out of range")));
        }
        correct += usize::from(predictions[i] == labels[i]);
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// Metrics of one trained model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: usize,
    pub policy: Policy,
    pub train_f1: f64,
    pub val_f1: f64,
    pub test_f1: f64,
    /// Share of test nodes per selected layer.
    pub histogram: Vec<f64>,
    pub best_epoch: usize,
    pub sec_per_epoch: f64,
}

/// Reports of every split of one configuration, with its settings echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BTreeMap<String, String>,
    pub splits: Vec<SplitReport>,
}

/// Scores `model` on every mask of `split` with a fresh forward pass.
/// Moments are recomputed from the model's own parameters on the train mask.
pub fn evaluate_model(
    model: &Model,
    decode: Decode,
    g: &Graph,
    split: &Split,
    policy: Policy,
    literal: bool,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let ops = GraphOperators::new(g, model.encoder.config().self_loops);
    let (stack, transformed) = model.embed(&ops, g.features())?;
    let moments = if policy.uses_moments() || decode == Decode::Prototype {
        Some(moments_epoch_pass(&transformed, g.labels(), &split.train, g.num_classes(), 0)?)
    } else {
        None
    };
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();
    let pred = model.predict(&stack, &transformed, moments.as_ref(), policy, literal, decode, &nodes)?;
    let labels = g.labels();
    let score = |mask: &[usize]| -> Result<f64> {
        if mask.is_empty() {
            Ok(f64::NAN)
        } else {
            micro_f1(&pred.classes, labels, mask)
        }
    };
    let test_layers: Vec<usize> = split.test.iter().map(|&i| pred.layers[i]).collect();
    let histogram = if test_layers.is_empty() {
        vec![f64::NAN; model.depth() + 1]
    } else {
        layer_histogram(&test_layers, model.depth())?
    };
    Ok((score(&split.train)?, score(&split.val)?, score(&split.test)?, histogram))
}

/// Evaluates the snapshot of `trained` under `policy`.
pub fn evaluate(trained: &TrainedModel, g: &Graph, split: &Split, split_index: usize, policy: Policy) -> Result<SplitReport> {
    let (train_f1, val_f1, test_f1, histogram) = evaluate_model(
        &trained.model,
        trained.config.decode(),
        g,
        split,
        policy,
        trained.config.eq4_literal,
    )?;
    Ok(SplitReport {
        split: split_index,
        policy,
        train_f1,
        val_f1,
        test_f1,
        histogram,
        best_epoch: trained.best_epoch,
        sec_per_epoch: trained.sec_per_epoch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Undefined("aggregate of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Aggregate { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAggregates {
    pub train: Aggregate,
    pub val: Aggregate,
    pub test: Aggregate,
}

pub fn aggregate_splits(reports: &[SplitReport]) -> Result<SplitAggregates> {
    let col = |f: fn(&SplitReport) -> f64| aggregate(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(SplitAggregates {
        train: col(|r| r.train_f1)?,
        val: col(|r| r.val_f1)?,
        test: col(|r| r.test_f1)?,
    })
}

/// Mean over datasets of (best method on that dataset − this method).
/// `table[m][d]` is method `m` on dataset `d`.
pub fn delta_max(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = table.first() else {
        return Ok(Vec::new());
    };
    let datasets = first.len();
    if datasets == 0 {
        return Err(Error::Undefined("delta-from-max over zero datasets".into()));
    }
    if table.iter().any(|row| row.len() != datasets) {
        return Err(Error::shape("delta_max", "ragged method table"));
    }
    let maxima: Vec<f64> = (0..datasets)
        .map(|d| table.iter().map(|row| row[d]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(table
        .iter()
        .map(|row| row.iter().zip(&maxima).map(|(v, m)| m - v).sum::<f64>() / datasets as f64)
        .collect())
}
