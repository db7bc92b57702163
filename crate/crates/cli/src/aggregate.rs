//! Mean ± std of final accuracies across run directories.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mind_core::config::RunConfig;
use mind_core::report::{read_metrics, METRICS_FILE};
use serde::Serialize;

use crate::{run_config, CliError};

/// Final aggregate accuracies of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub mode: String,
    pub seed: u64,
    pub acc_tag: f64,
    pub acc_taw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub mode: String,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

fn same_experiment(a: &RunConfig, b: &RunConfig) -> bool {
    a.arch == b.arch && a.scenario == b.scenario
}

fn without_seed(c: &RunConfig) -> RunConfig {
    let mut c = c.clone();
    c.train.seed = 0;
    c
}

/// Loads every directory. All runs must share architecture and scenario, and
/// runs of one mode may differ only in their seed.
pub fn read_runs(dirs: &[PathBuf]) -> Result<Vec<RunSummary>, CliError> {
    let mut first: Option<(PathBuf, RunConfig)> = None;
    let mut per_mode: BTreeMap<String, (PathBuf, RunConfig)> = BTreeMap::new();
    let mut out = vec![];
    for dir in dirs {
        let cfg = run_config(dir)?;
        let metrics = dir.join(METRICS_FILE);
        if !metrics.is_file() {
            return Err(CliError::Usage(format!("{}: missing {METRICS_FILE}", dir.display())));
        }
        let rows = read_metrics(&metrics)?;
        let last = rows
            .iter()
            .filter(|r| r.test_task == "all")
            .max_by_key(|r| r.task_trained)
            .ok_or_else(|| CliError::Usage(format!("{}: no aggregate rows", metrics.display())))?;

        if let Some((d0, c0)) = &first {
            if !same_experiment(c0, &cfg) {
                return Err(CliError::Usage(format!(
                    "{} and {} use different architectures or scenarios",
                    d0.display(),
                    dir.display()
                )));
            }
        } else {
            first = Some((dir.clone(), cfg.clone()));
        }
        let mode = cfg.train.mode.name().to_string();
        match per_mode.get(&mode) {
            Some((d0, c0)) if without_seed(c0) != without_seed(&cfg) => {
                return Err(CliError::Usage(format!(
                    "{} and {} are both {mode} runs with different settings",
                    d0.display(),
                    dir.display()
                )));
            }
            Some(_) => {}
            None => {
                per_mode.insert(mode.clone(), (dir.clone(), cfg.clone()));
            }
        }
        out.push(RunSummary {
            dir: dir.clone(),
            mode,
            seed: cfg.train.seed,
            acc_tag: last.acc_tag,
            acc_taw: last.acc_taw,
        });
    }
    Ok(out)
}

/// Sample mean and standard deviation; a single value has std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per (mode, metric), modes in order of first appearance.
pub fn aggregate(runs: &[RunSummary]) -> Vec<AggregateRow> {
    let mut modes: Vec<&str> = vec![];
    for r in runs {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    let mut out = vec![];
    for mode in modes {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == mode).collect();
        for (metric, get) in [("acc_tag", (|r: &RunSummary| r.acc_tag) as fn(&RunSummary) -> f64), ("acc_taw", |r| r.acc_taw)] {
            let xs: Vec<f64> = group.iter().map(|r| get(r)).collect();
            let (mean, std) = mean_std(&xs);
            out.push(AggregateRow {
                mode: mode.to_string(),
                metric,
                mean,
                std,
                runs: xs.len(),
            });
        }
    }
    out
}

pub(crate) fn table(rows: &[AggregateRow]) -> String {
    let mut s = format!("{:<20} {:>4}  {:<18} {:<18}\n", "mode", "runs", "acc_tag", "acc_taw");
    for pair in rows.chunks(2) {
        let cell = |r: &AggregateRow| format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
        s.push_str(&format!(
            "{:<20} {:>4}  {:<18} {:<18}\n",
            pair[0].mode,
            pair[0].runs,
            cell(&pair[0]),
            cell(&pair[1])
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: &str, seed: u64, tag: f64) -> RunSummary {
        RunSummary {
            dir: PathBuf::from(format!("{mode}{seed}")),
            mode: mode.into(),
            seed,
            acc_tag: tag,
            acc_taw: 1.0,
        }
    }

    #[test]
    fn single_value_has_zero_std() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn sample_std_of_known_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn groups_by_mode_in_first_seen_order() {
        let rows = aggregate(&[run("mind", 0, 0.6), run("finetune", 0, 0.2), run("mind", 1, 0.8)]);
        let keys: Vec<(&str, &str, usize)> = rows.iter().map(|r| (r.mode.as_str(), r.metric, r.runs)).collect();
        assert_eq!(
            keys,
            [
                ("mind", "acc_tag", 2),
                ("mind", "acc_taw", 2),
                ("finetune", "acc_tag", 1),
                ("finetune", "acc_taw", 1)
            ]
        );
        assert!((rows[0].mean - 0.7).abs() < 1e-12);
        assert_eq!(rows[1].std, 0.0);
    }

    #[test]
    fn table_shows_percentages() {
        let t = table(&aggregate(&[run("mind", 0, 0.5)]));
        assert!(t.lines().nth(1).unwrap().contains("50.00 ± 0.00"), "{t}");
    }
}
