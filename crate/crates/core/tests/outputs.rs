mod common;

use common::toy;
use mind_core::config::{RunConfig, TrainMode};
use mind_core::inference::predict_task_aware;
use mind_core::report::{matrix_csv, metrics_rows, read_metrics, write_run_dir, CHECKPOINT_FILE, CONFIG_FILE, MATRIX_FILE, METRICS_FILE, TELEMETRY_FILE};
use mind_core::scenarios::{build_scenario, ScenarioKind};
use mind_core::trainer::{run_scenario, Learner};

fn quick(mode: TrainMode) -> RunConfig {
    let mut c = toy::toy_ci();
    c.train.mode = mode;
    c.scenario.per_class_train = 12;
    c.scenario.per_class_test = 4;
    c.scenario.per_class_val = 2;
    c.train.main.epochs = 1;
    c.train.distill.epochs = 1;
    c
}

#[test]
fn run_directory_holds_every_artifact() {
    let c = quick(TrainMode::Mind);
    let s = build_scenario(&c.scenario, 0).unwrap();
    let (report, learner) = run_scenario(&c, &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/run");
    write_run_dir(&out, &c, &report, &learner, "r0").unwrap();
    for f in [METRICS_FILE, MATRIX_FILE, TELEMETRY_FILE, CONFIG_FILE, CHECKPOINT_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(read_metrics(&out.join(METRICS_FILE)).unwrap(), metrics_rows(&report, "r0"));
    let stored = RunConfig::load(out.join(CONFIG_FILE)).unwrap();
    assert_eq!(stored, c);
    assert_eq!(stored.hash(), c.hash());
}

#[test]
fn metrics_rows_cover_seen_tasks_plus_aggregate() {
    let c = quick(TrainMode::PacknetBaseline);
    let s = build_scenario(&c.scenario, 0).unwrap();
    let (report, _) = run_scenario(&c, &s).unwrap();
    let rows = metrics_rows(&report, "x");
    // after task t: t + 1 per-task rows and one aggregate
    assert_eq!(rows.len(), (1..=5).map(|k| k + 1).sum::<usize>());
    let all: Vec<_> = rows.iter().filter(|r| r.test_task == "all").collect();
    assert_eq!(all.len(), 5);
    assert_eq!(all[4].acc_tag, report.acc_tag());
    assert!(rows.iter().all(|r| r.mode == "packnet_baseline"));
}

#[test]
fn matrix_leaves_untrained_cells_blank() {
    let c = quick(TrainMode::FinetuneBaseline);
    let s = build_scenario(&c.scenario, 0).unwrap();
    let (report, _) = run_scenario(&c, &s).unwrap();
    let text = matrix_csv(&report);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "trained\\test,0,1,2,3,4");
    assert_eq!(lines.len(), 6);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[0], "0");
    assert!(!first[1].is_empty());
    assert!(first[2..].iter().all(|c| c.is_empty()));
    assert!(lines[5].split(',').all(|c| !c.is_empty()));
}

#[test]
fn generator_classes_are_separable() {
    let mut c = toy::toy_ci();
    c.train.mode = TrainMode::FinetuneBaseline;
    c.scenario.n_tasks = 1;
    c.scenario.n_classes = 2;
    c.arch.n_classes = 2;
    c.scenario.per_class_train = 100;
    c.scenario.per_class_test = 50;
    c.scenario.per_class_val = 0;
    for seed in 0..3 {
        c.train.seed = seed;
        let s = build_scenario(&c.scenario, seed).unwrap();
        let (r, _) = run_scenario(&c, &s).unwrap();
        assert!(r.acc_taw() >= 0.95, "seed {seed}: {}", r.acc_taw());
    }
}

#[test]
fn domain_shift_costs_accuracy() {
    let mut c = toy::toy_di();
    c.train.mode = TrainMode::FinetuneBaseline;
    c.scenario.n_tasks = 2;
    c.scenario.per_class_train = 40;
    c.scenario.per_class_val = 0;
    let s = build_scenario(&c.scenario, 0).unwrap();
    assert_eq!(s.kind, ScenarioKind::Di);
    let mut l = Learner::new(&c).unwrap();
    l.train_task(&s).unwrap();
    let sub = l.subnet(0).unwrap();
    let acc = |t: usize| {
        let idx = &s.tasks[t].test;
        let pred = predict_task_aware(&l.net, &sub, &l.inputs(&s.test, idx)).unwrap();
        pred.iter().zip(idx).filter(|(p, &i)| **p == s.test.labels[i]).count() as f64 / idx.len() as f64
    };
    let (home, away) = (acc(0), acc(1));
    assert!(away + 0.1 < home, "domain 0 {home}, domain 1 {away}");
}
