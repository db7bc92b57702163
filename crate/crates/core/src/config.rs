//! Run configuration: a TOML file with `[arch]`, `[scenario]`, `[train]`
//! (plus `[train.main]` and `[train.distill]`), `[eval]` and `[ablations]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MindError, Result};
use crate::losses::DistillSettings;
use crate::network::ArchSpec;
use crate::optim::PhaseSchedule;
use crate::scenarios::{ScenarioKind, ScenarioSpec};
use crate::tensor::DistillKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Fresh teacher per task, random weight selection, distillation into the sub-network.
    Mind,
    /// Train the free weights, keep the largest, distill from the unpruned snapshot.
    MindSelfDistill,
    /// Train, prune by magnitude, retrain with cross-entropy only.
    PacknetBaseline,
    /// One unmasked network trained on each task in turn.
    FinetuneBaseline,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mind => "mind",
            TrainMode::MindSelfDistill => "mind_self_distill",
            TrainMode::PacknetBaseline => "packnet_baseline",
            TrainMode::FinetuneBaseline => "finetune_baseline",
        }
    }

    pub fn is_masked(self) -> bool {
        self != TrainMode::FinetuneBaseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Share of every maskable layer handed to each task; `1 / n_tasks` when absent.
    #[serde(default)]
    pub fraction_per_task: Option<f64>,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub reinit_selected: bool,
    #[serde(default)]
    pub distill_kind: DistillKind,
    #[serde(default = "one")]
    pub distill_temperature: f64,
    /// Teacher training (mind), free-weight training (self-distill, packnet) or the only phase (finetune).
    pub main: PhaseSchedule,
    /// Distillation into the selected weights, or the cross-entropy retrain of packnet.
    pub distill: PhaseSchedule,
}

fn default_beta() -> f64 {
    5.0
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "one")]
    pub tau: f64,
    /// When non-empty, τ is re-tuned on the validation split after the last task.
    #[serde(default)]
    pub tau_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tau: 1.0, tau_grid: vec![] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    #[serde(default = "yes")]
    pub share_weights: bool,
    #[serde(default = "yes")]
    pub per_task_bn: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            share_weights: true,
            per_task_bn: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub scenario: ScenarioSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablations: Ablations,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = |lr| PhaseSchedule {
            epochs: 30,
            lr,
            milestones: vec![20],
            lr_decay: 0.5,
        };
        RunConfig {
            arch: ArchSpec::default(),
            scenario: ScenarioSpec::default(),
            train: TrainConfig {
                mode: TrainMode::Mind,
                beta: 5.0,
                fraction_per_task: None,
                batch_size: 256,
                seed: 0,
                reinit_selected: true,
                distill_kind: DistillKind::SymmetricKl,
                distill_temperature: 1.0,
                main: schedule(0.005),
                distill: schedule(0.035),
            },
            eval: EvalConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> MindError {
    MindError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MindError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            MindError::Config(m) => MindError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical serialization; checkpoints refuse a different config.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml_string().as_bytes()).into()
    }

    pub fn fraction(&self) -> f64 {
        self.train.fraction_per_task.unwrap_or(1.0 / self.scenario.n_tasks as f64)
    }

    pub fn distill_settings(&self) -> DistillSettings {
        DistillSettings {
            kind: self.train.distill_kind,
            temperature: self.train.distill_temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        let t = &self.train;
        if s.n_tasks == 0 {
            return Err(bad("scenario.n_tasks must be at least 1"));
        }
        if s.kind == ScenarioKind::Ci && !s.n_classes.is_multiple_of(s.n_tasks) {
            return Err(bad(format!("{} classes cannot be split equally into {} tasks", s.n_classes, s.n_tasks)));
        }
        if self.arch.n_classes != s.n_classes {
            return Err(bad(format!(
                "arch.n_classes = {} but scenario.n_classes = {}",
                self.arch.n_classes, s.n_classes
            )));
        }
        let image = [s.channels, s.image_size, s.image_size];
        let flat = image.iter().product::<usize>();
        let fits = match self.arch.input_shape.as_slice() {
            [f] => *f == flat,
            shape => shape == image,
        };
        if !fits {
            return Err(bad(format!(
                "arch.input_shape {:?} does not match {}×{}×{} scenario images",
                self.arch.input_shape, s.channels, s.image_size, s.image_size
            )));
        }
        let f = self.fraction();
        if !(f > 0.0 && f <= 1.0) {
            return Err(bad(format!("fraction_per_task must lie in (0, 1], got {f}")));
        }
        if f * s.n_tasks as f64 > 1.0 + 1e-9 {
            return Err(bad(format!("fraction_per_task {f} × {} tasks exceeds the network", s.n_tasks)));
        }
        if !(t.beta >= 0.0) {
            return Err(bad("train.beta must be ≥ 0"));
        }
        if !(t.distill_temperature > 0.0) {
            return Err(bad("train.distill_temperature must be positive"));
        }
        if t.batch_size == 0 {
            return Err(bad("train.batch_size must be positive"));
        }
        for (name, p) in [("main", &t.main), ("distill", &t.distill)] {
            if p.epochs == 0 {
                return Err(bad(format!("train.{name}.epochs must be at least 1")));
            }
            if !(p.lr > 0.0) {
                return Err(bad(format!("train.{name}.lr must be positive")));
            }
        }
        if !(self.eval.tau > 0.0) || self.eval.tau_grid.iter().any(|&x| !(x > 0.0)) {
            return Err(bad("temperatures must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = RunConfig::default()
            .to_toml_string()
            .replace("[ablations]", "[ablations]\nshare_wieghts = false");
        let e = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(e.to_string().contains("share_wieghts"), "{e}");
    }

    #[test]
    fn uneven_split_is_rejected() {
        let mut c = RunConfig::default();
        c.scenario.n_tasks = 3;
        assert!(c.validate().unwrap_err().is_usage());
    }

    #[test]
    fn hash_changes_with_seed() {
        let mut c = RunConfig::default();
        let h = c.hash();
        c.train.seed = 1;
        assert_ne!(h, c.hash());
    }
}
