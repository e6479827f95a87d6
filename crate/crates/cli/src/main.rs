use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metselect::encoder::Arch;
use metselect::experiment::{emit_summary, run_experiment, DatasetSource, ExperimentConfig, LrSetting, PoisonSweep};
use metselect::graph::{generate_sbm, make_splits, save_dataset, SbmSpec, SplitFractions};
use metselect::poison::Attack;
use metselect::select::Policy;
use metselect::train::LossKind;

#[derive(Parser)]
#[command(name = "metselect", version, about = "Per-node GNN layer selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy at one depth and write results.
    Train(RunArgs),
    /// Every policy x depth cell of the configuration.
    Sweep(RunArgs),
    /// Sweep over poisoning budgets (default: greedy attack, budgets 0,0.1,0.25,0.5).
    Poison(RunArgs),
    /// Rebuild summary.csv from results.csv in a results directory.
    Summarize {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic graph in the dataset directory format.
    GenSbm {
        #[arg(long, value_name = "SPEC.json")]
        sbm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON experiment manifest; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "sbm")]
    dataset: Option<PathBuf>,
    #[arg(long, value_name = "SPEC.json")]
    sbm: Option<PathBuf>,
    /// Dataset label used in result rows.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    model: Option<Arch>,
    #[arg(long, value_delimiter = ',')]
    select: Option<Vec<Policy>>,
    #[arg(long)]
    eq4_literal: bool,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, value_delimiter = ',')]
    depth: Option<Vec<usize>>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    self_loops: bool,
    /// 0.01, 0.001 or "sweep".
    #[arg(long)]
    lr: Option<LrSetting>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "seeds")]
    splits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    aux_distance_weight: Option<f64>,
    #[arg(long)]
    shared_transform: bool,
    #[arg(long)]
    poison: Option<Attack>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record seconds per epoch (makes result files run-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Train,
    Sweep,
    Poison,
}

type BoxResult<T> = Result<T, Box<dyn std::error::Error>>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> BoxResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn build_config(args: &RunArgs, mode: Mode) -> BoxResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &args.dataset {
        cfg.dataset = Some(DatasetSource::Path(dir.clone()));
    }
    if let Some(path) = &args.sbm {
        cfg.dataset = Some(DatasetSource::Sbm(read_json::<SbmSpec>(path)?));
        if args.name.is_none() && cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
    }
    if args.name.is_some() {
        cfg.name = args.name.clone();
    }
    if let Some(arch) = args.model {
        cfg.arch = arch;
    }
    if let Some(p) = &args.select {
        cfg.policies = p.clone();
    }
    if let Some(d) = &args.depth {
        cfg.depths = d.clone();
    }
    if let Some(h) = args.hidden {
        cfg.hidden = h;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(k) = args.splits {
        cfg.splits = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(loss) = args.loss {
        cfg.train.loss = loss;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = args.margin {
        cfg.train.margin = m;
    }
    if let Some(w) = args.aux_distance_weight {
        cfg.train.aux_distance_weight = w;
    }
    cfg.self_loops |= args.self_loops;
    cfg.train.eq4_literal |= args.eq4_literal;
    cfg.train.shared_transform |= args.shared_transform;
    cfg.timing |= args.timing;
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }

    if args.poison.is_some() || args.budgets.is_some() || mode == Mode::Poison {
        let current = cfg.poison.take();
        let attack = args
            .poison
            .or(current.as_ref().map(|p| p.attack))
            .unwrap_or(Attack::HeteroGreedy);
        let budgets = args
            .budgets
            .clone()
            .or(current.map(|p| p.budgets))
            .unwrap_or_else(|| vec![0.0, 0.1, 0.25, 0.5]);
        cfg.poison = Some(PoisonSweep { attack, budgets });
        if mode == Mode::Poison && args.select.is_none() && args.config.is_none() {
            cfg.policies = vec![Policy::Final, Policy::MetSelect];
        }
    }
    if mode == Mode::Train && (cfg.policies.len() != 1 || cfg.depths.len() != 1) {
        return Err("train takes exactly one --select policy and one --depth; use sweep for more".into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, mode: Mode) -> BoxResult<bool> {
    let cfg = build_config(args, mode)?;
    let out = cfg.out.clone().ok_or("--out is required")?;
    let outcome = run_experiment(&cfg, &out)?;
    for (cell, err) in &outcome.failures {
        eprintln!("cell {cell} failed: {err}");
    }
    println!(
        "{} of {} cells succeeded; results in {}",
        outcome.cells - outcome.failures.len(),
        outcome.cells,
        out.display()
    );
    Ok(outcome.success())
}

fn gen_sbm(spec: &Path, out: &Path, splits: usize, seed: u64) -> BoxResult<()> {
    let spec: SbmSpec = read_json(spec)?;
    let g = generate_sbm(&spec)?;
    let s = make_splits(&g, SplitFractions::default(), splits, seed)?;
    save_dataset(&g, Some(&s), out)?;
    println!(
        "{} nodes, {} edges, {} classes written to {}",
        g.num_nodes(),
        g.num_edges(),
        g.num_classes(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run(a, Mode::Train),
        Command::Sweep(a) => run(a, Mode::Sweep),
        Command::Poison(a) => run(a, Mode::Poison),
        Command::Summarize { out } => emit_summary(out).map(|rows| {
            println!("{} summary rows written to {}", rows.len(), out.join("summary.csv").display());
            true
        }).map_err(Into::into),
        Command::GenSbm { sbm, out, splits, seed } => gen_sbm(sbm, out, *splits, *seed).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
