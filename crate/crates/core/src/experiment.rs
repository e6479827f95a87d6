//! Sweep runner: dataset preparation, per-cell training with an optional
//! learning-rate sweep, poisoning, and CSV/JSON result files.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{Arch, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{aggregate, delta_max, evaluate, RunReport, SplitReport};
use crate::graph::{generate_sbm, load_dataset_with, make_splits, Graph, SbmSpec, Split, SplitFractions};
use crate::poison::{poison, Attack, AttackSpec};
use crate::select::Policy;
use crate::train::{train, LossKind, TrainConfig};

/// Learning rates tried by [`LrSetting::Sweep`], in tie-break order.
pub const LR_GRID: [f64; 2] = [0.01, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Directory with `features.csv`, `labels.csv`, `edges.csv` and an
    /// optional `splits.json`.
    Path(PathBuf),
    /// Synthetic graphs; split `k` is drawn from a fresh graph with seed
    /// `spec.seed + k`.
    Sbm(SbmSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSetting {
    Fixed(f64),
    Sweep(SweepTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepTag {
    #[serde(rename = "sweep")]
    Sweep,
}

impl LrSetting {
    pub fn candidates(self) -> Vec<f64> {
        match self {
            LrSetting::Fixed(lr) => vec![lr],
            LrSetting::Sweep(_) => LR_GRID.to_vec(),
        }
    }
}

impl fmt::Display for LrSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSetting::Fixed(lr) => write!(f, "{lr}"),
            LrSetting::Sweep(_) => f.write_str("sweep"),
        }
    }
}

impl FromStr for LrSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "sweep" {
            return Ok(LrSetting::Sweep(SweepTag::Sweep));
        }
        match s.parse::<f64>() {
            Ok(lr) if lr > 0.0 && lr.is_finite() => Ok(LrSetting::Fixed(lr)),
            _ => Err(Error::Config(format!("learning rate {s:?} is neither a positive number nor \"sweep\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSweep {
    pub attack: Attack,
    pub budgets: Vec<f64>,
}

/// One experiment manifest. `train.lr`, `train.seed` and `train.policy` are
/// overwritten per cell by `lr`, `seed + split` and each entry of `policies`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset label in result rows; defaults to the directory name or "sbm".
    pub name: Option<String>,
    pub dataset: Option<DatasetSource>,
    pub arch: Arch,
    pub hidden: usize,
    pub self_loops: bool,
    pub gat_slope: f64,
    pub policies: Vec<Policy>,
    pub depths: Vec<usize>,
    pub lr: LrSetting,
    pub splits: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub poison: Option<PoisonSweep>,
    /// Record wall-clock seconds per epoch. Off by default so reruns are byte-identical.
    pub timing: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            dataset: None,
            arch: Arch::Gcn,
            hidden: 32,
            self_loops: false,
            gat_slope: 0.2,
            policies: vec![Policy::MetSelect],
            depths: vec![2],
            lr: LrSetting::Fixed(0.01),
            splits: 10,
            seed: 0,
            train: TrainConfig::default(),
            poison: None,
            timing: false,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            return Err(Error::Config("no dataset given (path or sbm spec)".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        if self.depths.is_empty() {
            return Err(Error::Config("at least one depth is required".into()));
        }
        if self.depths.contains(&0) {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if self.splits == 0 {
            return Err(Error::Config("at least one split is required".into()));
        }
        if let LrSetting::Fixed(lr) = self.lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("learning rate {lr} must be > 0")));
            }
        }
        if let Some(p) = &self.poison {
            if p.budgets.is_empty() {
                return Err(Error::Config("poison sweep without budgets".into()));
            }
            for &budget in &p.budgets {
                AttackSpec { attack: p.attack, budget, seed: 0 }.validate()?;
            }
        }
        self.train.validate()
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match &self.dataset {
            Some(DatasetSource::Path(p)) => p
                .file_name()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
            _ => "sbm".into(),
        }
    }

    fn budgets(&self) -> Vec<Option<f64>> {
        match &self.poison {
            Some(p) => p.budgets.iter().map(|&b| Some(b)).collect(),
            None => vec![None],
        }
    }
}

/// A graph together with the split evaluated on it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: Graph,
    pub split: Split,
}

/// One instance per split index.
pub fn prepare_instances(cfg: &ExperimentConfig) -> Result<Vec<Instance>> {
    match &cfg.dataset {
        None => Err(Error::Config("no dataset given".into())),
        Some(DatasetSource::Sbm(spec)) => (0..cfg.splits)
            .map(|k| {
                let spec = SbmSpec {
                    seed: spec.seed + k as u64,
                    ..spec.clone()
                };
                let graph = generate_sbm(&spec)?;
                let split = make_splits(&graph, SplitFractions::default(), 1, cfg.seed + k as u64)?.remove(0);
                Ok(Instance { graph, split })
            })
            .collect(),
        Some(DatasetSource::Path(dir)) => {
            let (graph, splits) = load_dataset_with(dir, SplitFractions::default(), cfg.splits, cfg.seed)?;
            if splits.len() < cfg.splits {
                return Err(Error::Split(format!(
                    "{} requests {} splits but the dataset has {}",
                    dir.display(),
                    cfg.splits,
                    splits.len()
                )));
            }
            Ok(splits
                .into_iter()
                .take(cfg.splits)
                .map(|split| Instance {
                    graph: graph.clone(),
                    split,
                })
                .collect())
        }
    }
}

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub policy: Policy,
    pub depth: usize,
    pub budget: Option<f64>,
}

impl CellKey {
    fn order(&self, other: &Self) -> Ordering {
        let b = |x: Option<f64>| x.unwrap_or(-1.0);
        b(self.budget)
            .total_cmp(&b(other.budget))
            .then(self.depth.cmp(&other.depth))
            .then(self.policy.cmp(&other.policy))
    }
}

/// Results of one cell at its chosen learning rate.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    pub lr: f64,
    /// Mean validation micro-F1 per learning rate tried.
    pub lr_scores: Vec<(f64, f64)>,
    pub reports: Vec<SplitReport>,
    pub histories: Vec<Vec<crate::train::EpochRecord>>,
}

impl CellResult {
    pub fn mean_test(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.test_f1))
    }

    pub fn mean_train(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.train_f1))
    }

    pub fn mean_val(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.val_f1))
    }

    /// Test-node layer shares averaged over splits.
    pub fn mean_histogram(&self) -> Vec<f64> {
        let len = self.reports.first().map_or(0, |r| r.histogram.len());
        (0..len)
            .map(|l| mean(self.reports.iter().map(|r| r.histogram[l])))
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Loss actually optimized: the final-layer baseline always uses cross-entropy.
pub fn effective_loss(policy: Policy, loss: LossKind) -> LossKind {
    if policy == Policy::Final {
        LossKind::Ce
    } else {
        loss
    }
}

/// Trains and evaluates every split of one cell for each candidate learning
/// rate and keeps the rate with the best mean validation micro-F1 (ties go
/// to the earlier candidate).
pub fn run_cell(cfg: &ExperimentConfig, instances: &[Instance], key: CellKey) -> Result<CellResult> {
    let mut best: Option<CellResult> = None;
    let mut lr_scores = Vec::new();
    for lr in cfg.lr.candidates() {
        let mut reports = Vec::with_capacity(instances.len());
        let mut histories = Vec::with_capacity(instances.len());
        for (k, inst) in instances.iter().enumerate() {
            let g = &inst.graph;
            let enc = EncoderConfig {
                self_loops: cfg.self_loops,
                gat_slope: cfg.gat_slope,
                ..EncoderConfig::new(cfg.arch, key.depth, cfg.hidden, g.feature_dim())
            };
            let tc = TrainConfig {
                lr,
                seed: cfg.seed + k as u64,
                policy: key.policy,
                ..cfg.train.clone()
            };
            let trained = train(g, &inst.split, &enc, &tc).map_err(|e| at_split(k, lr, e))?;
            let mut report = evaluate(&trained, g, &inst.split, k, key.policy).map_err(|e| at_split(k, lr, e))?;
            if !cfg.timing {
                report.sec_per_epoch = 0.0;
            }
            reports.push(report);
            histories.push(trained.history);
        }
        let val = mean(reports.iter().map(|r| r.val_f1));
        lr_scores.push((lr, val));
        if best.as_ref().is_none_or(|b| val > b.mean_val()) {
            best = Some(CellResult {
                key,
                lr,
                lr_scores: Vec::new(),
                reports,
                histories,
            });
        }
    }
    let mut best = best.ok_or_else(|| Error::Config("no learning rate to try".into()))?;
    best.lr_scores = lr_scores;
    Ok(best)
}

fn at_split(k: usize, lr: f64, e: Error) -> Error {
    Error::Contract(format!("split {k}, lr {lr}: {e}"))
}

/// Poisons every instance at `budget` with per-split seeds `seed + k`.
pub fn poison_instances(instances: &[Instance], attack: Attack, budget: f64, seed: u64) -> Result<Vec<Instance>> {
    instances
        .iter()
        .enumerate()
        .map(|(k, inst)| {
            let spec = AttackSpec {
                attack,
                budget,
                seed: seed + k as u64,
            };
            Ok(Instance {
                graph: poison(&inst.graph, &spec, &inst.split.train)?,
                split: inst.split.clone(),
            })
        })
        .collect()
}

/// Every cell of the sweep in key order. Failing cells are returned as
/// errors next to their key instead of aborting the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<(CellKey, Result<CellResult>)>> {
    cfg.validate()?;
    let clean = prepare_instances(cfg)?;
    let mut out = Vec::new();
    for budget in cfg.budgets() {
        let poisoned = match (budget, &cfg.poison) {
            (Some(b), Some(p)) => poison_instances(&clean, p.attack, b, cfg.seed),
            _ => Ok(clean.clone()),
        };
        for &depth in &cfg.depths {
            for &policy in &cfg.policies {
                let key = CellKey { policy, depth, budget };
                let result = match &poisoned {
                    Ok(instances) => run_cell(cfg, instances, key),
                    Err(e) => Err(Error::Attack(e.to_string())),
                };
                out.push((key, result));
            }
        }
    }
    out.sort_by(|a, b| a.0.order(&b.0));
    Ok(out)
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub policy: String,
    pub split: usize,
    pub train_f1: f64,
    pub val_f1: f64,
    pub test_f1: f64,
    pub sec_per_epoch: f64,
    pub loss: String,
    pub depth: usize,
    pub hidden: usize,
    pub lr: f64,
    pub self_loops: bool,
    pub eq4_literal: bool,
    pub poison: String,
    pub budget: f64,
    pub seed: u64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistogramRow {
    dataset: String,
    model: String,
    policy: String,
    loss: String,
    depth: usize,
    poison: String,
    budget: f64,
    layer: usize,
    proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoisonRow {
    budget: f64,
    policy: String,
    train_f1: f64,
    test_f1: f64,
}

/// What a finished sweep left on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub cells: usize,
    /// `(cell label, error)` for every cell that failed.
    pub failures: Vec<(String, String)>,
}

impl ExperimentOutcome {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

fn cell_label(cfg: &ExperimentConfig, key: &CellKey) -> String {
    let mut s = format!(
        "{}_{}_{}_{}_d{}",
        cfg.dataset_name(),
        cfg.arch,
        key.policy,
        effective_loss(key.policy, cfg.train.loss),
        key.depth
    );
    if let (Some(b), Some(p)) = (key.budget, &cfg.poison) {
        s.push_str(&format!("_{}{b}", p.attack));
    }
    s
}

fn echo(cfg: &ExperimentConfig, key: &CellKey, lr: f64) -> BTreeMap<String, String> {
    let t = &cfg.train;
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("dataset", cfg.dataset_name());
    put("model", cfg.arch.to_string());
    put("policy", key.policy.to_string());
    put("loss", effective_loss(key.policy, t.loss).to_string());
    put("depth", key.depth.to_string());
    put("hidden", cfg.hidden.to_string());
    put("self_loops", cfg.self_loops.to_string());
    put("lr", lr.to_string());
    put("lr_setting", cfg.lr.to_string());
    put("epochs", t.epochs.to_string());
    put("margin", t.margin.to_string());
    put("eq4_literal", t.eq4_literal.to_string());
    put("shared_transform", t.shared_transform.to_string());
    put("aux_distance_weight", t.aux_distance_weight.to_string());
    put("splits", cfg.splits.to_string());
    put("seed", cfg.seed.to_string());
    put("poison", poison_name(cfg));
    put("budget", key.budget.unwrap_or(0.0).to_string());
    m
}

fn poison_name(cfg: &ExperimentConfig) -> String {
    cfg.poison.as_ref().map_or_else(|| "none".to_string(), |p| p.attack.to_string())
}

fn rows_for(cfg: &ExperimentConfig, cell: &CellResult) -> Vec<ResultRow> {
    cell.reports
        .iter()
        .map(|r| ResultRow {
            dataset: cfg.dataset_name(),
            model: cfg.arch.to_string(),
            policy: cell.key.policy.to_string(),
            split: r.split,
            train_f1: r.train_f1,
            val_f1: r.val_f1,
            test_f1: r.test_f1,
            sec_per_epoch: r.sec_per_epoch,
            loss: effective_loss(cell.key.policy, cfg.train.loss).to_string(),
            depth: cell.key.depth,
            hidden: cfg.hidden,
            lr: cell.lr,
            self_loops: cfg.self_loops,
            eq4_literal: cfg.train.eq4_literal,
            poison: poison_name(cfg),
            budget: cell.key.budget.unwrap_or(0.0),
            seed: cfg.seed + r.split as u64,
            best_epoch: r.best_epoch,
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the sweep and writes into `out`:
/// `results.csv`, `histograms.csv`, `reports.json`, `lr_scores.csv`,
/// `history/<cell>_split<k>.csv`, `summary.csv`, plus `poison.csv` for
/// poison sweeps and `errors.csv` when a cell failed.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    let cells = run_sweep(cfg)?;
    create_dir(out)?;
    let history_dir = out.join("history");
    create_dir(&history_dir)?;

    let mut results = Vec::new();
    let mut histograms = Vec::new();
    let mut poison_rows = Vec::new();
    let mut reports = Vec::new();
    let mut lr_rows = Vec::new();
    let mut failures = Vec::new();
    for (key, result) in &cells {
        let label = cell_label(cfg, key);
        let cell = match result {
            Ok(cell) => cell,
            Err(e) => {
                failures.push((label, e.to_string()));
                continue;
            }
        };
        results.extend(rows_for(cfg, cell));
        for (layer, proportion) in cell.mean_histogram().into_iter().enumerate() {
            histograms.push(HistogramRow {
                dataset: cfg.dataset_name(),
                model: cfg.arch.to_string(),
                policy: key.policy.to_string(),
                loss: effective_loss(key.policy, cfg.train.loss).to_string(),
                depth: key.depth,
                poison: poison_name(cfg),
                budget: key.budget.unwrap_or(0.0),
                layer,
                proportion,
            });
        }
        if let Some(budget) = key.budget {
            poison_rows.push(PoisonRow {
                budget,
                policy: key.policy.to_string(),
                train_f1: cell.mean_train(),
                test_f1: cell.mean_test(),
            });
        }
        for &(lr, val) in &cell.lr_scores {
            lr_rows.push((label.clone(), lr, val));
        }
        for (k, history) in cell.histories.iter().enumerate() {
            write_csv(&history_dir.join(format!("{label}_split{k}.csv")), history)?;
        }
        reports.push(RunReport {
            config: echo(cfg, key, cell.lr),
            splits: cell.reports.clone(),
        });
    }

    write_csv(&out.join("results.csv"), &results)?;
    write_csv(&out.join("histograms.csv"), &histograms)?;
    if cfg.poison.is_some() {
        write_csv(&out.join("poison.csv"), &poison_rows)?;
    }
    {
        let path = out.join("lr_scores.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["cell", "lr", "mean_val_f1"])?;
        for (label, lr, val) in &lr_rows {
            w.write_record([label.clone(), lr.to_string(), val.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let json_path = out.join("reports.json");
    fs::write(&json_path, serde_json::to_string_pretty(&reports)? + "\n").map_err(|e| Error::io(&json_path, e))?;

    let errors_path = out.join("errors.csv");
    if failures.is_empty() {
        if errors_path.exists() {
            fs::remove_file(&errors_path).map_err(|e| Error::io(&errors_path, e))?;
        }
    } else {
        let mut w = csv::Writer::from_path(&errors_path)?;
        w.write_record(["cell", "error"])?;
        for (label, msg) in &failures {
            w.write_record([label, msg])?;
        }
        w.flush().map_err(|e| Error::io(&errors_path, e))?;
    }
    if !results.is_empty() {
        emit_summary(out)?;
    }
    Ok(ExperimentOutcome {
        cells: cells.len(),
        failures,
    })
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub model: String,
    pub policy: String,
    pub loss: String,
    pub depth: usize,
    pub poison: String,
    pub budget: f64,
    pub lr: f64,
    pub splits: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    /// Test micro-F1 in percent as `mean±std`.
    pub test_cell: String,
    pub delta_max: f64,
}

/// Reads `results.csv` in `dir`, writes `summary.csv` (one row per method
/// and dataset, mean and sample std over splits, delta from the per-dataset
/// best test mean averaged over the datasets the method ran on) and returns
/// the rows.
pub fn emit_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join("results.csv");
    let mut reader = csv::Reader::from_path(&path)?;
    let rows: Vec<ResultRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let summary = summarize_rows(&rows)?;
    write_csv(&dir.join("summary.csv"), &summary)?;
    Ok(summary)
}

type MethodKey = (String, String, String, usize, String, u64, u64);

/// Groups result rows into summary rows; see [`emit_summary`].
pub fn summarize_rows(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Undefined("no result rows to summarize".into()));
    }
    // method key excludes the dataset; f64 fields keyed by bit pattern
    let method = |r: &ResultRow| -> MethodKey {
        (
            r.model.clone(),
            r.policy.clone(),
            r.loss.clone(),
            r.depth,
            r.poison.clone(),
            r.budget.to_bits(),
            r.lr.to_bits(),
        )
    };
    let mut groups: BTreeMap<(String, MethodKey), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.dataset.clone(), method(r))).or_default().push(r);
    }

    let mut out = Vec::new();
    for ((dataset, _), members) in &groups {
        let col = |f: fn(&ResultRow) -> f64| aggregate(&members.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (train, val, test) = (col(|r| r.train_f1)?, col(|r| r.val_f1)?, col(|r| r.test_f1)?);
        let first = members[0];
        out.push(SummaryRow {
            dataset: dataset.clone(),
            model: first.model.clone(),
            policy: first.policy.clone(),
            loss: first.loss.clone(),
            depth: first.depth,
            poison: first.poison.clone(),
            budget: first.budget,
            lr: first.lr,
            splits: members.len(),
            train_mean: train.mean,
            train_std: train.std,
            val_mean: val.mean,
            val_std: val.std,
            test_mean: test.mean,
            test_std: test.std,
            test_cell: format!("{:.2}±{:.2}", 100.0 * test.mean, 100.0 * test.std),
            delta_max: 0.0,
        });
    }

    // per dataset, delta of every method present; then average per method
    let mut per_method: BTreeMap<MethodKey, Vec<f64>> = BTreeMap::new();
    let datasets: Vec<String> = {
        let mut d: Vec<String> = out.iter().map(|r| r.dataset.clone()).collect();
        d.dedup();
        d
    };
    let keys: Vec<MethodKey> = groups.keys().map(|(_, m)| m.clone()).collect();
    for d in &datasets {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| &out[i].dataset == d).collect();
        let table: Vec<Vec<f64>> = idx.iter().map(|&i| vec![out[i].test_mean]).collect();
        for (&i, delta) in idx.iter().zip(delta_max(&table)?) {
            per_method.entry(keys[i].clone()).or_default().push(delta);
        }
    }
    for (row, key) in out.iter_mut().zip(&keys) {
        let deltas = &per_method[key];
        row.delta_max = deltas.iter().sum::<f64>() / deltas.len() as f64;
    }
    Ok(out)
}
