//! Budgeted edge-flip poisoning of the training graph.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attack {
    #[serde(rename = "random", alias = "random-flip")]
    RandomFlip,
    #[serde(rename = "greedy", alias = "hetero-greedy")]
    HeteroGreedy,
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attack::RandomFlip => "random",
            Attack::HeteroGreedy => "greedy",
        })
    }
}

impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random-flip" => Ok(Attack::RandomFlip),
            "greedy" | "hetero-greedy" => Ok(Attack::HeteroGreedy),
            other => Err(Error::Config(format!("unknown attack {other:?}, expected random|greedy"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub attack: Attack,
    /// Fraction `p` of the original edge count to flip.
    pub budget: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.budget) {
            return Err(Error::Config(format!("budget {} outside [0, 0.5]", self.budget)));
        }
        Ok(())
    }

    /// `round(p·|E|)` flips.
    pub fn flips(&self, num_edges: usize) -> usize {
        (self.budget * num_edges as f64).round() as usize
    }
}

/// Toggles each unordered pair: present edges are removed, absent ones added.
pub fn toggle_pairs(g: &Graph, pairs: &[(usize, usize)]) -> Result<Graph> {
    let mut edges = g.edge_set();
    for &(u, v) in pairs {
        if u == v {
            return Err(Error::Attack(format!("self-pair ({u}, {u})")));
        }
        let key = (u.min(v), u.max(v));
        if !edges.remove(&key) {
            edges.insert(key);
        }
    }
    g.with_edges(edges.into_iter().collect())
}

fn random_pairs(
    n: usize,
    count: usize,
    taken: &mut HashSet<(usize, usize)>,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let total = n * n.saturating_sub(1) / 2;
    if taken.len() + count > total {
        return Err(Error::Attack(format!(
            "{count} more flips requested but only {} of {total} pairs remain",
            total - taken.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if taken.insert(key) {
            out.push(key);
        }
    }
    Ok(out)
}

/// Flips `round(p·|E|)` distinct uniformly random pairs.
pub fn random_flip_attack(g: &Graph, spec: &AttackSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = random_pairs(g.num_nodes(), spec.flips(g.num_edges()), &mut HashSet::new(), &mut rng)?;
    toggle_pairs(g, &pairs)
}

/// Label-aware flips using only the labels visible in `train_labels`
/// (`None` for every non-train node).
///
/// Alternates between adding a random absent edge joining two train nodes
/// of different labels and deleting a random present edge joining two train
/// nodes of the same label, starting with an addition. Once one category is
/// used up the other continues alone; once both are, the remaining budget
/// goes to random flips of untouched pairs.
pub fn hetero_greedy_attack(g: &Graph, spec: &AttackSpec, train_labels: &[Option<usize>]) -> Result<Graph> {
    spec.validate()?;
    let n = g.num_nodes();
    if train_labels.len() != n {
        return Err(Error::shape(
            "hetero_greedy_attack",
            format!("{} labels for {n} nodes", train_labels.len()),
        ));
    }
    let budget = spec.flips(g.num_edges());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let present = g.edge_set();
    let known: Vec<(usize, usize)> = train_labels
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.map(|y| (i, y)))
        .collect();

    let mut adds = Vec::new();
    for (a, &(u, yu)) in known.iter().enumerate() {
        for &(v, yv) in &known[a + 1..] {
            if yu != yv && !present.contains(&(u, v)) {
                adds.push((u, v));
            }
        }
    }
    let mut deletes: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .copied()
        .filter(|&(u, v)| matches!((train_labels[u], train_labels[v]), (Some(a), Some(b)) if a == b))
        .collect();
    adds.shuffle(&mut rng);
    deletes.shuffle(&mut rng);

    let mut chosen = Vec::with_capacity(budget);
    let (mut ai, mut di) = (0, 0);
    let mut want_add = true;
    while chosen.len() < budget && (ai < adds.len() || di < deletes.len()) {
        let take_add = (want_add && ai < adds.len()) || di >= deletes.len();
        if take_add {
            chosen.push(adds[ai]);
            ai += 1;
        } else {
            chosen.push(deletes[di]);
            di += 1;
        }
        want_add = !want_add;
    }
    let mut taken: HashSet<(usize, usize)> = chosen.iter().copied().collect();
    let rest = budget - chosen.len();
    chosen.extend(random_pairs(n, rest, &mut taken, &mut rng)?);
    toggle_pairs(g, &chosen)
}

/// Labels of the train nodes only.
pub fn mask_labels(g: &Graph, train: &[usize]) -> Vec<Option<usize>> {
    let mut out = vec![None; g.num_nodes()];
    for &i in train {
        out[i] = Some(g.labels()[i]);
    }
    out
}

/// Applies `spec` to `g`, revealing only the labels of `train`.
pub fn poison(g: &Graph, spec: &AttackSpec, train: &[usize]) -> Result<Graph> {
    match spec.attack {
        Attack::RandomFlip => random_flip_attack(g, spec),
        Attack::HeteroGreedy => hetero_greedy_attack(g, spec, &mask_labels(g, train)),
    }
}
