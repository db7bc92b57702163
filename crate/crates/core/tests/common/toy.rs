//! Shared runs on the shipped toy benchmarks, cached across checks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;

use mind_core::config::{RunConfig, TrainMode};
use mind_core::scenarios::{build_scenario, Scenario};
use mind_core::tensor::Tensor;
use mind_core::trainer::{continue_scenario_with, Learner, RunReport};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn toy_ci() -> RunConfig {
    RunConfig::load(config_path("toy_ci.cfg")).expect("shipped CI config")
}

pub fn toy_di() -> RunConfig {
    RunConfig::load(config_path("toy_di.cfg")).expect("shipped DI config")
}

/// A finished run together with what each sub-network produced right after its own task.
pub struct Outcome {
    pub report: RunReport,
    pub learner: Learner,
    /// Test logits of sub-network `t` on task `t`, captured right after task `t`.
    pub own_logits: Vec<Tensor<f32>>,
}

pub fn own_task_logits(l: &Learner, s: &Scenario, t: usize) -> Tensor<f32> {
    let sub = l.subnet(t).expect("trained task");
    let x = l.inputs(&s.test, &s.tasks[t].test);
    mind_core::inference::subnet_logits(&l.net, &sub, &x).expect("logits").logits
}

pub fn run(cfg: &RunConfig) -> Outcome {
    let scenario = build_scenario(&cfg.scenario, cfg.train.seed).expect("scenario");
    let mut learner = Learner::new(cfg).expect("learner");
    let mut own = vec![];
    let masked = cfg.train.mode.is_masked();
    let report = continue_scenario_with(&mut learner, &scenario, |l| {
        if masked {
            own.push(own_task_logits(l, &scenario, l.tasks_done() - 1));
        }
        Ok(())
    })
    .expect("run");
    Outcome {
        report,
        learner,
        own_logits: own,
    }
}

/// Variant of a base config, keyed for the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ci(TrainMode),
    CiBetaZero,
    CiSharedBn,
    Di(TrainMode),
}

impl Variant {
    pub fn config(self, seed: u64) -> RunConfig {
        let mut c = match self {
            Variant::Di(_) => toy_di(),
            _ => toy_ci(),
        };
        c.train.seed = seed;
        match self {
            Variant::Ci(m) | Variant::Di(m) => c.train.mode = m,
            Variant::CiBetaZero => {
                c.train.mode = TrainMode::Mind;
                c.train.beta = 0.0;
            }
            Variant::CiSharedBn => {
                c.train.mode = TrainMode::Mind;
                c.ablations.per_task_bn = false;
            }
        }
        c
    }
}

#[derive(Default)]
pub struct Runs {
    cache: RefCell<HashMap<(Variant, u64), std::rc::Rc<Outcome>>>,
}

impl Runs {
    pub fn get(&self, v: Variant, seed: u64) -> std::rc::Rc<Outcome> {
        if let Some(o) = self.cache.borrow().get(&(v, seed)) {
            return o.clone();
        }
        let t0 = std::time::Instant::now();
        let o = std::rc::Rc::new(run(&v.config(seed)));
        eprintln!(
            "  ran {v:?} seed {seed} in {:.1}s: ACC_TAG {:.3}, ACC_TAW {:.3}",
            t0.elapsed().as_secs_f64(),
            o.report.acc_tag(),
            o.report.acc_taw()
        );
        self.cache.borrow_mut().insert((v, seed), o.clone());
        o
    }

    pub fn all(&self, v: Variant) -> Vec<std::rc::Rc<Outcome>> {
        SEEDS.iter().map(|&s| self.get(v, s)).collect()
    }

    pub fn tags(&self, v: Variant) -> Vec<f64> {
        self.all(v).iter().map(|o| o.report.acc_tag()).collect()
    }

    pub fn taws(&self, v: Variant) -> Vec<f64> {
        self.all(v).iter().map(|o| o.report.acc_taw()).collect()
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}
