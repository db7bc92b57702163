//! Multi-sub-network inference and the accuracy metrics.
//!
//! Task-agnostic prediction feeds the input through every trained
//! sub-network, turns each logit vector into `softmax(z / τ)` and picks the
//! single most probable class across all of them. Task-aware prediction is
//! the argmax of the sub-network belonging to the known task.

use log::{debug, warn};

use crate::error::{MindError, Result};
use crate::mask::GateView;
use crate::network::{BankTraining, GatedNet, Query};
use crate::tensor::Tensor;

/// One queryable sub-network: gates, banks and the classes it scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub view: GateView,
    pub bias_bank: usize,
    pub norm_bank: usize,
    pub classes: Vec<usize>,
}

impl Subnet {
    pub fn query(&self) -> Query<'_> {
        Query {
            view: &self.view,
            bias_bank: self.bias_bank,
            norm_bank: self.norm_bank,
            classes: &self.classes,
            batch_stats: false,
            train: BankTraining::NONE,
        }
    }
}

/// Eval-mode logits of one sub-network on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetLogits {
    pub classes: Vec<usize>,
    pub logits: Tensor<f32>,
}

const EVAL_CHUNK: usize = 256;

pub fn subnet_logits(net: &GatedNet<f32>, subnet: &Subnet, x: &Tensor<f32>) -> Result<SubnetLogits> {
    let n = x.shape()[0];
    let sl: usize = x.shape()[1..].iter().product();
    let k = subnet.classes.len();
    let mut out = Vec::with_capacity(n * k);
    let q = subnet.query();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, x.data()[start * sl..end * sl].to_vec())?;
        out.extend_from_slice(net.logits(&chunk, &q)?.data());
    }
    Ok(SubnetLogits {
        classes: subnet.classes.clone(),
        logits: Tensor::new(vec![n, k], out)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    /// `log softmax(z_i / τ)` of every queried sub-network. Comparing in log
    /// space keeps confident sub-networks apart where `f32` probabilities
    /// would all round to 1.
    pub log_probs: Vec<Vec<f64>>,
    /// Index of the winning sub-network and the global class it predicts.
    pub chosen: (usize, usize),
    /// Prediction when the true task is given.
    pub aware: usize,
    pub label: usize,
    pub task: usize,
}

fn argmax_first(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(z: &[f32], scale: f64) -> Vec<f64> {
    let s: Vec<f64> = z.iter().map(|&v| v as f64 * scale).collect();
    let top = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
    let m = s[top];
    // shifting before adding ln1p keeps the winner's log-probability off exact zero
    let rest: f64 = s.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, v)| (v - m).exp()).sum();
    let norm = rest.ln_1p();
    s.iter().map(|v| (v - m) - norm).collect()
}

/// Global winner over all `(sub-network, class)` entries. Ties go to the lowest class id.
fn pick(probs: &[Vec<f64>], classes: &[&[usize]]) -> (usize, usize) {
    let mut best: Option<(f64, usize, usize)> = None;
    for (s, (p, cls)) in probs.iter().zip(classes).enumerate() {
        for (&v, &c) in p.iter().zip(cls.iter()) {
            best = match best {
                Some((bv, bc, _)) if v < bv || (v == bv && c >= bc) => best,
                _ => Some((v, c, s)),
            };
        }
    }
    let (_, c, s) = best.expect("at least one class");
    (s, c)
}

/// Task-agnostic predictions from precomputed sub-network logits.
///
/// `aware` gives, for each sample, the sub-network index holding its true
/// task together with the classes that task-aware prediction may choose from.
pub fn predict_from_logits(
    all: &[SubnetLogits],
    tau: f64,
    labels: &[usize],
    tasks: &[usize],
    aware: &dyn Fn(usize) -> (usize, Vec<usize>),
) -> Result<Vec<PredictionRecord>> {
    if !(tau > 0.0) {
        return Err(MindError::Contract(format!("temperature must be positive, got {tau}")));
    }
    if all.is_empty() {
        return Err(MindError::State("no trained sub-network to query".into()));
    }
    let scale = 1.0 / tau;
    let classes: Vec<&[usize]> = all.iter().map(|s| s.classes.as_slice()).collect();
    let mut out = Vec::with_capacity(labels.len());
    for (i, (&label, &task)) in labels.iter().zip(tasks).enumerate() {
        let log_probs: Vec<Vec<f64>> = all.iter().map(|s| log_softmax(s.logits.row(i), scale)).collect();
        let chosen = pick(&log_probs, &classes);
        let (sub, allowed) = aware(task);
        let row = all[sub].logits.row(i);
        let cls = &all[sub].classes;
        let candidates: Vec<f32> = cls
            .iter()
            .zip(row)
            .map(|(c, &z)| if allowed.contains(c) { z } else { f32::NEG_INFINITY })
            .collect();
        let aware_class = cls[argmax_first(&candidates)];
        out.push(PredictionRecord {
            log_probs,
            chosen,
            aware: aware_class,
            label,
            task,
        });
    }
    Ok(out)
}

/// Task-agnostic prediction for a batch.
pub fn predict_task_agnostic(net: &GatedNet<f32>, subnets: &[Subnet], x: &Tensor<f32>, tau: f64) -> Result<Vec<(usize, usize)>> {
    if !(tau > 0.0) {
        return Err(MindError::Contract(format!("temperature must be positive, got {tau}")));
    }
    let logits = subnets.iter().map(|s| subnet_logits(net, s, x)).collect::<Result<Vec<_>>>()?;
    let n = x.shape()[0];
    let recs = predict_from_logits(&logits, tau, &vec![0; n], &vec![0; n], &|_| (0, logits[0].classes.clone()))?;
    Ok(recs.into_iter().map(|r| r.chosen).collect())
}

/// Task-aware prediction: argmax of the given sub-network's logits.
pub fn predict_task_aware(net: &GatedNet<f32>, subnet: &Subnet, x: &Tensor<f32>) -> Result<Vec<usize>> {
    let l = subnet_logits(net, subnet, x)?;
    let k = l.classes.len();
    Ok(l.logits.data().chunks(k).map(|r| l.classes[argmax_first(r)]).collect())
}

/// Accuracies computed from one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Unweighted mean of per-class task-agnostic accuracy over classes that have test samples.
    pub acc_tag: f64,
    /// Unweighted mean of per-task task-aware accuracy over tasks that have test samples.
    pub acc_taw: f64,
    pub per_class: Vec<f64>,
    /// Task-agnostic accuracy on each task's test data.
    pub per_task_tag: Vec<f64>,
    /// Task-aware accuracy on each task's test data.
    pub per_task_taw: Vec<f64>,
}

fn ratio(hit: usize, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        hit as f64 / n as f64
    }
}

fn nan_mean(v: &[f64]) -> f64 {
    let ok: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

pub fn compute_metrics(records: &[PredictionRecord], n_classes: usize, n_tasks: usize) -> Metrics {
    let mut class_hit = vec![0usize; n_classes];
    let mut class_n = vec![0usize; n_classes];
    let mut task_tag = vec![0usize; n_tasks];
    let mut task_taw = vec![0usize; n_tasks];
    let mut task_n = vec![0usize; n_tasks];
    for r in records {
        let ok = r.chosen.1 == r.label;
        class_n[r.label] += 1;
        task_n[r.task] += 1;
        if ok {
            class_hit[r.label] += 1;
            task_tag[r.task] += 1;
        }
        if r.aware == r.label {
            task_taw[r.task] += 1;
        }
    }
    let per_class: Vec<f64> = class_hit.iter().zip(&class_n).map(|(&h, &n)| ratio(h, n)).collect();
    let empty = per_class.iter().filter(|v| v.is_nan()).count();
    // mid-scenario evaluations leave the classes of untrained tasks empty by design
    if empty > 0 && task_n.iter().all(|&n| n > 0) {
        warn!("{empty} classes have no test samples; excluded from ACC_TAG");
    } else if empty > 0 {
        debug!("{empty} classes not evaluated");
    }
    let per_task_tag: Vec<f64> = task_tag.iter().zip(&task_n).map(|(&h, &n)| ratio(h, n)).collect();
    let per_task_taw: Vec<f64> = task_taw.iter().zip(&task_n).map(|(&h, &n)| ratio(h, n)).collect();
    Metrics {
        acc_tag: nan_mean(&per_class),
        acc_taw: nan_mean(&per_task_taw),
        per_class,
        per_task_tag,
        per_task_taw,
    }
}

/// Grid value with the best ACC_TAG on validation logits; ties keep the smaller τ.
pub fn tune_temperature(
    val: &[SubnetLogits],
    labels: &[usize],
    tasks: &[usize],
    n_classes: usize,
    n_tasks: usize,
    aware: &dyn Fn(usize) -> (usize, Vec<usize>),
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(MindError::Config("temperature grid is empty".into()));
    }
    if labels.is_empty() {
        return Err(MindError::State("validation set is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64)> = None;
    for &tau in &sorted {
        let recs = predict_from_logits(val, tau, labels, tasks, aware)?;
        let acc = compute_metrics(&recs, n_classes, n_tasks).acc_tag;
        if best.is_none_or(|(b, _)| acc > b) {
            best = Some((acc, tau));
        }
    }
    Ok(best.unwrap().1)
}
