//! Commands behind the `mind` binary.
//!
//! Every command returns [`CliError`], which carries the process exit code:
//! 2 for bad usage or configuration, 1 for failures while running.

mod aggregate;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mind_core::config::RunConfig;
use mind_core::report::{write_run_dir, CONFIG_FILE};
use mind_core::scenarios::{build_scenario, save_dataset};
use mind_core::trainer::run_scenario;
use mind_core::MindError;
use serde::Serialize;

pub use aggregate::{aggregate, read_runs, AggregateRow, RunSummary};

/// Output root used when `--out` is not given and `MIND_OUT` is unset.
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<MindError> for CliError {
    fn from(e: MindError) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "mind", version, about = "Continual learning with distilled, parameter-isolated sub-networks")]
pub struct Cli {
    /// Root for default output locations.
    #[arg(long, global = true, env = "MIND_OUT", default_value = DEFAULT_OUT)]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a full scenario and write a run directory.
    Run {
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<out-root>/<config>-<mode>-s<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every value × seed combination and write a long-format CSV.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate final accuracies of run directories as mean ± std per mode.
    Report {
        dirs: Vec<PathBuf>,
        /// CSV destination; defaults to `<out-root>/report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a config with every default filled in.
    ConfigDump { config: Option<PathBuf> },
    /// Write the generated train/val/test splits as dataset files.
    GenData {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Beta,
    Tau,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Tau => "tau",
        }
    }
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub seed: u64,
    pub acc_tag: f64,
    pub acc_taw: f64,
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

/// Trains `cfg` and writes the run directory. Returns the final `(acc_tag, acc_taw)`.
pub fn cmd_run(cfg: &RunConfig, out: &Path, run_id: &str) -> Result<(f64, f64), CliError> {
    let scenario = build_scenario(&cfg.scenario, cfg.train.seed)?;
    let (report, learner) = run_scenario(cfg, &scenario)?;
    write_run_dir(out, cfg, &report, &learner, run_id)?;
    Ok((report.acc_tag(), report.acc_taw()))
}

/// β cells each train a run; τ cells share one run per seed and only re-evaluate.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value and one seed".into()));
    }
    let mut rows = vec![];
    for &seed in seeds {
        let mut base = cfg.clone();
        base.train.seed = seed;
        let scenario = build_scenario(&base.scenario, seed)?;
        match param {
            SweepParam::Beta => {
                for &value in values {
                    let mut c = base.clone();
                    c.train.beta = value;
                    c.validate()?;
                    let (r, _) = run_scenario(&c, &scenario)?;
                    log::info!("beta={value} seed={seed}: acc_tag {:.4}", r.acc_tag());
                    rows.push(SweepRow {
                        param: param.name(),
                        value,
                        seed,
                        acc_tag: r.acc_tag(),
                        acc_taw: r.acc_taw(),
                    });
                }
            }
            SweepParam::Tau => {
                if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return Err(CliError::Usage(format!("tau must be positive, got {bad}")));
                }
                let (_, learner) = run_scenario(&base, &scenario)?;
                for &value in values {
                    let m = learner.evaluate(&scenario, value)?;
                    rows.push(SweepRow {
                        param: param.name(),
                        value,
                        seed,
                        acc_tag: m.acc_tag,
                        acc_taw: m.acc_taw,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<(), CliError> {
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            Box::new(std::fs::File::create(p).map_err(|e| io_err(p, e))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let name = out.map(Path::to_path_buf).unwrap_or_else(|| "stdout".into());
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r).map_err(|e| io_err(&name, e))?;
    }
    w.flush().map_err(|e| io_err(&name, e))
}

/// Reads the run directories, checks they describe the same experiment and
/// returns the aggregate rows together with the printable table.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<(Vec<AggregateRow>, String), CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let runs = read_runs(dirs)?;
    let rows = aggregate(&runs);
    Ok((rows.clone(), aggregate::table(&rows)))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let s = build_scenario(&cfg.scenario, cfg.train.seed)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = vec![];
    for (name, d) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        if d.is_empty() {
            continue;
        }
        let p = out.join(format!("{name}.mndd"));
        save_dataset(d, &p)?;
        written.push(p);
    }
    Ok(written)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let run_id = format!("{}-{}-s{}", stem(&config), cfg.train.mode.name(), cfg.train.seed);
            let out = out.unwrap_or_else(|| cli.out_root.join(&run_id));
            let (tag, taw) = cmd_run(&cfg, &out, &run_id)?;
            println!("{run_id}: acc_tag {tag:.4} acc_taw {taw:.4} -> {}", out.display());
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let rows = cmd_sweep(&cfg, param, &values, &seeds)?;
            write_csv(&rows, out.as_deref())?;
        }
        Command::Report { dirs, out } => {
            let (rows, table) = cmd_report(&dirs)?;
            print!("{table}");
            let out = out.unwrap_or_else(|| cli.out_root.join("report.csv"));
            write_csv(&rows, Some(&out))?;
        }
        Command::ConfigDump { config } => {
            let cfg = match config {
                Some(p) => load_config(&p, None)?,
                None => RunConfig::default(),
            };
            print!("{}", cfg.to_toml_string());
        }
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            for p in cmd_gen_data(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Config stored in a run directory.
pub fn run_config(dir: &Path) -> Result<RunConfig, CliError> {
    let p = dir.join(CONFIG_FILE);
    if !p.is_file() {
        return Err(CliError::Usage(format!("{}: not a run directory (no {CONFIG_FILE})", dir.display())));
    }
    Ok(RunConfig::load(p)?)
}
