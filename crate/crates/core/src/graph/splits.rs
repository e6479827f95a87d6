use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Node ids of one train/val/test partition, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub type SplitSet = Vec<Split>;

impl Split {
    /// Checks ids in range, pairwise disjoint masks and a train set that
    /// covers at least two classes.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        let n = g.num_nodes();
        let mut seen = vec![false; n];
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in ids {
                if i >= n {
                    return Err(Error::Split(format!("{name} id {i} outside {n} nodes")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Split(format!("node {i} appears twice across masks")));
                }
            }
        }
        let classes: BTreeSet<usize> = self.train.iter().map(|&i| g.labels()[i]).collect();
        if classes.len() < 2 {
            return Err(Error::Split(format!(
                "train mask covers {} class(es), need at least 2",
                classes.len()
            )));
        }
        Ok(())
    }

    /// Classes with no node in the train mask.
    pub fn missing_train_classes(&self, g: &Graph) -> Vec<usize> {
        let mut present = vec![false; g.num_classes()];
        for &i in &self.train {
            present[g.labels()[i]] = true;
        }
        (0..g.num_classes()).filter(|&c| !present[c]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Stratified random splits.
///
/// Each class is shuffled and node `k` of a class of size `n_c` gets the
/// key `(k + 0.5) / n_c`; sorting all nodes by key (random tiebreak) and
/// cutting at the requested sizes keeps every class close to the global
/// fractions while the total sizes are exact. The first node of every class
/// sorts ahead of all others, and a nonzero train fraction is raised to at
/// least one node per class, so tiny graphs still get a usable train mask.
pub fn make_splits(
    g: &Graph,
    fractions: SplitFractions,
    n_splits: usize,
    seed: u64,
) -> Result<SplitSet> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(*f >= 0.0)) || train + val + test > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({train}, {val}, {test}) must be nonnegative and sum to at most 1"
        )));
    }
    let n = g.num_nodes();
    let mut n_train = ((train * n as f64).round() as usize).min(n);
    if train > 0.0 {
        let present = g.labels().iter().collect::<BTreeSet<_>>().len();
        n_train = n_train.max(present);
    }
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let n_test = ((test * n as f64).round() as usize).min(n - n_train - n_val);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
    for (i, &y) in g.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(n);
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let nc = members.len() as f64;
            for (k, &i) in members.iter().enumerate() {
                let key = if k == 0 { -1.0 } else { (k as f64 + 0.5) / nc };
                keyed.push((key, rng.random(), i));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

        let take = |range: std::ops::Range<usize>| {
            let mut ids = order[range].to_vec();
            ids.sort_unstable();
            ids
        };
        let split = Split {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..n_train + n_val + n_test),
        };
        let missing = split.missing_train_classes(g);
        if !missing.is_empty() {
            return Err(Error::Split(format!(
                "split {s}: classes {missing:?} have no train node"
            )));
        }
        split.validate(g)?;
        out.push(split);
    }
    Ok(out)
}
