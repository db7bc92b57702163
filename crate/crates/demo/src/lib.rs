//! Browser bindings: render glyphs, train a tiny class-incremental run and
//! re-score it at other temperatures without retraining.
//!
//! The plain functions are usable natively; the `wasm_bindgen` wrappers only
//! convert errors into JS exceptions.

use mind_core::config::{RunConfig, TrainMode};
use mind_core::scenarios::glyphs::render;
use mind_core::scenarios::{build_scenario, Scenario};
use mind_core::trainer::{run_scenario, Learner, RunReport};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Six classes in three tasks, sized to train in a few seconds in a browser tab.
pub const TINY_CONFIG: &str = r#"
[arch]
preset = "cnn-small"
embed_dim = 32
input_shape = [3, 16, 16]
n_classes = 6

[scenario]
kind = "ci"
n_classes = 6
n_tasks = 3
per_class_train = 40
per_class_test = 20
per_class_val = 10
image_size = 16

[train]
mode = "mind"
beta = 5.0
batch_size = 32
seed = 0

[train.main]
epochs = 6
lr = 0.005
milestones = [4]

[train.distill]
epochs = 6
lr = 0.005
milestones = [4]

[eval]
tau = 1.0
tau_grid = [0.5, 1.0, 2.0, 4.0]
"#;

/// RGBA bytes of a `size×size` glyph, ready for `ImageData`.
pub fn glyph_pixels(class: usize, domain: usize, index: usize, seed: u64, size: usize) -> Vec<u8> {
    let chw = render(class, domain, index, seed, size, 3);
    let plane = size * size;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((chw[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

pub fn tiny_config(mode: &str, seed: u64, beta: f64) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::from_toml_str(TINY_CONFIG).map_err(|e| e.to_string())?;
    cfg.train.mode = serde_json::from_value::<TrainMode>(serde_json::Value::String(mode.into())).map_err(|_| format!("unknown mode `{mode}`"))?;
    cfg.train.seed = seed;
    cfg.train.beta = beta;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub mode: &'static str,
    pub acc_tag: f64,
    pub acc_taw: f64,
    pub tau: f64,
    /// Task-agnostic accuracy, row = tasks trained so far; `null` where not evaluated.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub per_task_tag: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Rescore {
    pub tau: f64,
    pub acc_tag: f64,
    pub acc_taw: f64,
    pub per_task_tag: Vec<f64>,
}

/// A trained run kept in memory for re-evaluation.
#[wasm_bindgen]
pub struct Session {
    scenario: Scenario,
    learner: Learner,
    report: RunReport,
}

impl Session {
    pub fn train(cfg: &RunConfig) -> Result<Session, String> {
        let scenario = build_scenario(&cfg.scenario, cfg.train.seed).map_err(|e| e.to_string())?;
        let (report, learner) = run_scenario(cfg, &scenario).map_err(|e| e.to_string())?;
        Ok(Session { scenario, learner, report })
    }

    pub fn summary(&self) -> Summary {
        let r = &self.report;
        Summary {
            mode: r.mode.name(),
            acc_tag: r.acc_tag(),
            acc_taw: r.acc_taw(),
            tau: r.tau(),
            matrix: r
                .acc_matrix()
                .into_iter()
                .map(|row| row.into_iter().map(|v| (!v.is_nan()).then_some(v)).collect())
                .collect(),
            per_task_tag: r.last().metrics.per_task_tag.clone(),
        }
    }

    pub fn rescore(&self, tau: f64) -> Result<Rescore, String> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(format!("temperature must be positive, got {tau}"));
        }
        let m = self.learner.evaluate(&self.scenario, tau).map_err(|e| e.to_string())?;
        Ok(Rescore {
            tau,
            acc_tag: m.acc_tag,
            acc_taw: m.acc_taw,
            per_task_tag: m.per_task_tag,
        })
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[wasm_bindgen(js_name = glyphRgba)]
pub fn glyph_rgba(class: u32, domain: u32, index: u32, seed: u32, size: u32) -> Vec<u8> {
    glyph_pixels(class as usize, domain as usize, index as usize, seed as u64, size as usize)
}

#[wasm_bindgen]
impl Session {
    /// Trains the tiny scenario; `mode` is a config mode name such as `mind`.
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, seed: u32, beta: f64) -> Result<Session, JsError> {
        Session::train(&tiny_config(mode, seed as u64, beta).map_err(js)?).map_err(js)
    }

    /// JSON [`Summary`] of the finished run.
    #[wasm_bindgen(js_name = summaryJson)]
    pub fn summary_json(&self) -> String {
        to_json(&self.summary())
    }

    /// JSON [`Rescore`] at temperature `tau`.
    #[wasm_bindgen(js_name = rescoreJson)]
    pub fn rescore_json(&self, tau: f64) -> Result<String, JsError> {
        self.rescore(tau).map(|r| to_json(&r)).map_err(js)
    }
}
