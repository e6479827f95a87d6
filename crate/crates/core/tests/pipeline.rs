mod common;

use std::fs;

use common::random_graph;
use metselect::encoder::{Arch, EncoderConfig, GraphOperators};
use metselect::eval::{aggregate_splits, evaluate, evaluate_model, RunReport};
use metselect::experiment::{emit_summary, run_experiment, DatasetSource, ExperimentConfig, LrSetting, ResultRow};
use metselect::graph::{generate_sbm, make_splits, SbmSpec, SplitFractions};
use metselect::loss::personalized_ce_loss;
use metselect::select::Policy;
use metselect::tensor::Tape;
use metselect::train::{train, Decode, LossKind, Model, TrainConfig};

fn homophilic(seed: u64) -> metselect::graph::Graph {
    generate_sbm(&SbmSpec {
        n: 400,
        classes: 4,
        p_in: 0.05,
        p_out: 0.005,
        feature_dim: 32,
        mu_sig: 1.0,
        seed,
    })
    .unwrap()
}

fn small_sbm() -> SbmSpec {
    SbmSpec {
        n: 60,
        classes: 3,
        p_in: 0.15,
        p_out: 0.02,
        feature_dim: 5,
        mu_sig: 1.0,
        seed: 2,
    }
}

fn read_rows(path: &std::path::Path) -> Vec<ResultRow> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn final_select_gcn_on_homophilic_sbm() {
    let mut total = 0.0;
    for seed in 0..5 {
        let g = homophilic(seed);
        let split = make_splits(&g, SplitFractions::default(), 1, seed).unwrap().remove(0);
        let cfg = TrainConfig {
            policy: Policy::Final,
            seed,
            ..TrainConfig::default()
        };
        let trained = train(&g, &split, &EncoderConfig::new(Arch::Gcn, 2, 32, 32), &cfg).unwrap();
        total += evaluate(&trained, &g, &split, 0, Policy::Final).unwrap().test_f1;
    }
    let mean = total / 5.0;
    assert!(mean >= 0.85, "mean test micro-F1 {mean}");
}

#[test]
fn untrained_model_is_near_chance() {
    let mut total = 0.0;
    for seed in 0..8 {
        let g = homophilic(seed);
        let split = make_splits(&g, SplitFractions::default(), 1, seed).unwrap().remove(0);
        let model = Model::init(&EncoderConfig::new(Arch::Gcn, 2, 32, 32), 4, false, seed).unwrap();
        let (_, _, test, _) = evaluate_model(&model, Decode::Decoder, &g, &split, Policy::Final, false).unwrap();
        total += test;
    }
    let mean = total / 8.0;
    assert!((mean - 0.25).abs() <= 0.1, "untrained mean {mean}");
}

#[test]
fn last_layer_ce_matches_per_node_loop() {
    let g = random_graph(20, 3, 4, 0.3, 8);
    let model = Model::init(&EncoderConfig::new(Arch::Gcn, 2, 6, 4), 3, false, 1).unwrap();
    let ops = GraphOperators::new(&g, false);
    let nodes: Vec<usize> = (0..14).collect();
    let labels: Vec<usize> = nodes.iter().map(|&i| g.labels()[i]).collect();

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let f = model.forward(&mut tape, &bound, &ops, g.features(), false).unwrap();
    let sel = vec![2; nodes.len()];
    let loss = personalized_ce_loss(&mut tape, &bound, &f.stack, &model.decoders, &nodes, &sel, &labels).unwrap();
    let got = tape.value(loss).item().unwrap();

    // baseline loss: mean negative log-softmax of the last decoder, node by node
    let (stack, _) = model.embed(&ops, g.features()).unwrap();
    let logits = model.decoders.logits_value(&model.params, 2, &stack[2]).unwrap();
    let mut want = 0.0;
    for (&i, &y) in nodes.iter().zip(&labels) {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    want /= nodes.len() as f64;
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}

#[test]
fn snapshot_dominates_history_and_final_policy_is_one_hot() {
    let g = generate_sbm(&small_sbm()).unwrap();
    let split = make_splits(&g, SplitFractions::default(), 1, 0).unwrap().remove(0);
    for loss in [LossKind::Ce, LossKind::Distance] {
        let cfg = TrainConfig {
            loss,
            epochs: 40,
            ..TrainConfig::default()
        };
        let trained = train(&g, &split, &EncoderConfig::new(Arch::Gcn, 2, 8, 5), &cfg).unwrap();
        let best = trained.history[trained.best_epoch - 1].val_f1;
        assert!(trained.history.iter().all(|r| r.val_f1 <= best));
        let first_best = trained.history.iter().position(|r| r.val_f1 == best).unwrap() + 1;
        assert_eq!(first_best, trained.best_epoch);
        let (_, val, _, _) =
            evaluate_model(&trained.model, trained.config.decode(), &g, &split, Policy::MetSelect, false).unwrap();
        assert_eq!(val, best);
    }
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let trained = train(&g, &split, &EncoderConfig::new(Arch::Gcn, 2, 8, 5), &cfg).unwrap();
    let report = evaluate(&trained, &g, &split, 0, Policy::Final).unwrap();
    assert_eq!(report.histogram, vec![0.0, 0.0, 1.0]);
    let again = evaluate(&trained, &g, &split, 0, Policy::MetSelect).unwrap();
    assert_eq!(again, evaluate(&trained, &g, &split, 0, Policy::MetSelect).unwrap());
    assert!((again.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn small_config(splits: usize) -> ExperimentConfig {
    ExperimentConfig {
        dataset: Some(DatasetSource::Sbm(small_sbm())),
        hidden: 8,
        depths: vec![2],
        splits,
        train: TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn minimal_config_writes_one_row_per_split() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&small_config(3), dir.path()).unwrap();
    assert!(outcome.success());
    let rows = read_rows(&dir.path().join("results.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.split).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(rows.iter().all(|r| r.policy == "metselect" && r.depth == 2 && r.hidden == 8 && r.loss == "ce"));
    assert!(rows.iter().all(|r| r.sec_per_epoch == 0.0));
    let hist = fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3);
    assert!(dir.path().join("history/sbm_gcn_metselect_ce_d2_split0.csv").exists());
    assert!(!dir.path().join("errors.csv").exists());
}

#[test]
fn summary_std_matches_aggregate_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        policies: vec![Policy::Final, Policy::MetSelect],
        lr: LrSetting::Fixed(0.01),
        ..small_config(10)
    };
    run_experiment(&cfg, dir.path()).unwrap();
    let summary = emit_summary(dir.path()).unwrap();
    let reports: Vec<RunReport> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reports.json")).unwrap()).unwrap();
    assert_eq!(summary.len(), 2);
    for report in &reports {
        let oracle = aggregate_splits(&report.splits).unwrap();
        let row = summary
            .iter()
            .find(|r| r.policy == report.config["policy"])
            .unwrap();
        assert_eq!(row.splits, 10);
        assert!((row.test_mean - oracle.test.mean).abs() < 1e-12);
        assert!((row.test_std - oracle.test.std).abs() < 1e-12);
        assert!((row.train_std - oracle.train.std).abs() < 1e-12);
    }
    let best = summary.iter().map(|r| r.test_mean).fold(f64::NEG_INFINITY, f64::max);
    for row in &summary {
        assert!((row.delta_max - (best - row.test_mean)).abs() < 1e-12);
    }
    // the summary file is reproducible from results.csv alone
    let first = fs::read(dir.path().join("summary.csv")).unwrap();
    emit_summary(dir.path()).unwrap();
    assert_eq!(first, fs::read(dir.path().join("summary.csv")).unwrap());
}

#[test]
fn depth_sweep_keeps_failing_cell_isolated() {
    // unnormalized sum aggregation explodes numerically at large depth
    let spec = SbmSpec {
        n: 40,
        p_in: 0.6,
        p_out: 0.4,
        feature_dim: 4,
        mu_sig: 1e250,
        ..small_sbm()
    };
    let cfg = ExperimentConfig {
        dataset: Some(DatasetSource::Sbm(spec)),
        arch: Arch::Gin,
        hidden: 8,
        depths: vec![1, 80],
        policies: vec![Policy::Final],
        splits: 1,
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(outcome.cells, 2);
    assert_eq!(outcome.failures.len(), 1, "{:?}", outcome.failures);
    assert!(outcome.failures[0].0.ends_with("_d80"));
    let rows = read_rows(&dir.path().join("results.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].depth, 1);
    assert!(fs::read_to_string(dir.path().join("errors.csv")).unwrap().contains("_d80"));
}

#[test]
fn poison_sweep_emits_budget_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        policies: vec![Policy::Final, Policy::MetSelect],
        poison: Some(metselect::experiment::PoisonSweep {
            attack: metselect::poison::Attack::HeteroGreedy,
            budgets: vec![0.0, 0.1, 0.25, 0.5],
        }),
        ..small_config(2)
    };
    assert!(run_experiment(&cfg, dir.path()).unwrap().success());
    let text = fs::read_to_string(dir.path().join("poison.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("budget,policy,train_f1,test_f1"));
    assert_eq!(lines.count(), 8);
    let rows = read_rows(&dir.path().join("results.csv"));
    assert!(rows.iter().all(|r| r.poison == "greedy"));
    let budgets: Vec<f64> = rows.iter().map(|r| r.budget).collect();
    assert!(budgets.windows(2).all(|w| w[0] <= w[1]));
}
