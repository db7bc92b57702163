//! Per-task training pipelines and the scenario loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainMode};
use crate::error::{MindError, Result};
use crate::inference::{compute_metrics, predict_from_logits, subnet_logits, tune_temperature, Metrics, Subnet, SubnetLogits};
use crate::losses::{combined_loss, DistillSettings, LossValue};
use crate::mask::{gate_gradients, GateView, FREE};
use crate::network::{BankTraining, GatedNet, HeadMode, Query};
use crate::optim::{AdamW, AdamWParams, PhaseSchedule};
use crate::scenarios::{Dataset, Scenario, ScenarioKind, TaskSpec};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Fresh unmasked teacher on the task data.
    Teacher,
    /// Free weights trained before selection.
    Main,
    /// Selected weights trained against the teacher.
    Distill,
    /// Selected weights retrained with cross-entropy only.
    Retrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Main => "main",
            Phase::Distill => "distill",
            Phase::Retrain => "retrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TelemetryRow {
    pub task: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub loss: LossValue,
    pub lr: f64,
}

/// Serializable position of the run's random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A training run in progress: the shared network plus the run's RNG.
#[derive(Clone, Debug)]
pub struct Learner {
    config: RunConfig,
    pub net: GatedNet<f32>,
    rng: ChaCha8Rng,
    tasks_done: usize,
    pub telemetry: Vec<TelemetryRow>,
}

struct PhaseRun<'a> {
    phase: Phase,
    task: usize,
    view: &'a GateView,
    bias_bank: usize,
    norm_bank: usize,
    classes: &'a [usize],
    batch_stats: bool,
    train: BankTraining,
    schedule: &'a PhaseSchedule,
    teacher: Option<&'a Tensor<f32>>,
    beta: f64,
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let sl: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * sl);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * sl..(i + 1) * sl]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gather shape")
}

fn local_labels(global: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    global
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| MindError::Contract(format!("label {l} outside the task's classes")))
        })
        .collect()
}

fn run_phase(
    net: &mut GatedNet<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    p: &PhaseRun,
    batch_size: usize,
    distill: &DistillSettings,
    rng: &mut ChaCha8Rng,
    telemetry: &mut Vec<TelemetryRow>,
) -> Result<()> {
    let mut w_opt = AdamW::new(net.weight_count(), AdamWParams::default());
    let mut b_opt = AdamW::new(net.bank_layout().0, AdamWParams::default());
    let bank_mask = net.bank_trainable(p.train);
    let any_bank = bank_mask.iter().any(|&b| b);
    let any_weight = p.view.trainable.iter().any(|&b| b);
    let q = Query {
        view: p.view,
        bias_bank: p.bias_bank,
        norm_bank: p.norm_bank,
        classes: p.classes,
        batch_stats: p.batch_stats,
        train: p.train,
    };
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..p.schedule.epochs {
        let lr = p.schedule.lr_at(epoch);
        order.shuffle(rng);
        let mut sum = LossValue::default();
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            // A single sample has no batch variance to normalize with.
            if chunk.len() < 2 && p.batch_stats {
                continue;
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xn = g.constant(gather(x, chunk));
            let fwd = net.forward_graph(&mut g, xn, &q)?;
            let tn = p.teacher.map(|t| g.constant(gather(t, chunk)));
            let (loss, v) = combined_loss(&mut g, fwd.logits, &yb, tn, p.beta, distill)?;
            g.backward(loss)?;
            net.zero_grads();
            net.accumulate_grads(&g, &fwd, &q);
            if p.batch_stats {
                net.update_running_stats(&g, &fwd, p.norm_bank);
            }
            if any_weight {
                gate_gradients(&mut net.params.grads, p.view);
                w_opt.step(&mut net.params.values, &net.params.grads, Some(&p.view.trainable), lr);
            }
            if any_bank {
                let bank = &mut net.banks[p.bias_bank];
                b_opt.step(&mut bank.affine, &bank.grad, Some(&bank_mask), lr);
            }
            sum.total += v.total;
            sum.ce_part += v.ce_part;
            sum.sd_part += v.sd_part;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        telemetry.push(TelemetryRow {
            task: p.task,
            phase: p.phase,
            epoch,
            loss: LossValue {
                total: sum.total / k,
                ce_part: sum.ce_part / k,
                sd_part: sum.sd_part / k,
            },
            lr,
        });
    }
    net.zero_grads();
    Ok(())
}

impl Learner {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let head = if config.scenario.kind == ScenarioKind::Di || !config.train.mode.is_masked() {
            HeadMode::Shared
        } else {
            HeadMode::PerTask
        };
        let net = GatedNet::build(&config.arch, head, config.scenario.n_tasks, config.fraction(), &mut rng)?;
        Ok(Learner {
            config: config.clone(),
            net,
            rng,
            tasks_done: 0,
            telemetry: vec![],
        })
    }

    /// Rebuilds a learner from checkpointed state.
    pub fn restore(config: &RunConfig, scenario: &Scenario, net: GatedNet<f32>, rng: RngState, tasks_done: usize) -> Result<Self> {
        if tasks_done > scenario.n_tasks() {
            return Err(MindError::State(format!("{tasks_done} tasks completed, scenario has {}", scenario.n_tasks())));
        }
        let mut net = net;
        net.set_task_classes(scenario.tasks[..tasks_done].iter().map(|t| t.classes.clone()).collect());
        Ok(Learner {
            config: config.clone(),
            net,
            rng: rng.restore(),
            tasks_done,
            telemetry: vec![],
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn rng_state(&self) -> RngState {
        RngState::of(&self.rng)
    }

    fn norm_bank(&self, t: usize) -> usize {
        if self.config.ablations.per_task_bn {
            t
        } else {
            0
        }
    }

    /// Input tensor for `idx` of `data`, flattened for the MLP preset.
    pub fn inputs(&self, data: &Dataset, idx: &[usize]) -> Tensor<f32> {
        let x = data.batch(idx);
        if self.config.arch.input_shape.len() == 1 {
            let n = idx.len();
            x.reshape(vec![n, data.sample_len()]).expect("flatten")
        } else {
            x
        }
    }

    /// Trains the next task of `scenario` with the configured pipeline.
    pub fn train_task(&mut self, scenario: &Scenario) -> Result<()> {
        let t = self.tasks_done;
        let task = scenario
            .tasks
            .get(t)
            .ok_or_else(|| MindError::State(format!("all {} tasks already trained", scenario.n_tasks())))?;
        if task.train.is_empty() {
            return Err(MindError::State(format!("task {t} has no training data")));
        }
        let x = self.inputs(&scenario.train, &task.train);
        let global: Vec<usize> = task.train.iter().map(|&i| scenario.train.labels[i]).collect();
        self.net.register_task(&task.classes)?;
        match self.config.train.mode {
            TrainMode::Mind => self.train_mind(task, &x, &global)?,
            TrainMode::MindSelfDistill => self.train_self_distill(task, &x, &global, true)?,
            TrainMode::PacknetBaseline => self.train_self_distill(task, &x, &global, false)?,
            TrainMode::FinetuneBaseline => self.train_finetune(task, &x, &global)?,
        }
        self.tasks_done += 1;
        Ok(())
    }

    fn train_mind(&mut self, task: &TaskSpec, x: &Tensor<f32>, global: &[usize]) -> Result<()> {
        let t = task.task_id;
        let cfg = self.config.clone();
        let tc = &cfg.train;
        let labels = local_labels(global, &task.classes)?;
        let distill = cfg.distill_settings();

        let mut teacher = GatedNet::<f32>::build(&cfg.arch, HeadMode::Shared, 1, 1.0, &mut self.rng)?;
        let full = GateView::full(teacher.weight_count());
        let run = PhaseRun {
            phase: Phase::Teacher,
            task: t,
            view: &full,
            bias_bank: 0,
            norm_bank: 0,
            classes: &task.classes,
            batch_stats: true,
            train: BankTraining::ALL,
            schedule: &tc.main,
            teacher: None,
            beta: 0.0,
        };
        run_phase(&mut teacher, x, &labels, &run, tc.batch_size, &distill, &mut self.rng, &mut self.telemetry)?;
        let sub = Subnet {
            view: full.clone(),
            bias_bank: 0,
            norm_bank: 0,
            classes: task.classes.clone(),
        };
        let targets = subnet_logits(&teacher, &sub, x)?.logits;
        drop(teacher);

        let mask_seed: u64 = self.rng.gen();
        self.net.mask.select_random(t, cfg.fraction(), mask_seed)?;
        if tc.reinit_selected {
            let mine: Vec<usize> = self.owned_by(t);
            self.net.reinit(mine, &mut self.rng);
        }
        self.distill_phase(task, x, &labels, Some(&targets), tc.beta, Phase::Distill)
    }

    fn owned_by(&self, t: usize) -> Vec<usize> {
        let id = t as u16;
        self.net.mask.owners().iter().enumerate().filter(|&(_, &o)| o == id).map(|(i, _)| i).collect()
    }

    /// Trains sub-network `t` on its own weights and bank.
    fn distill_phase(&mut self, task: &TaskSpec, x: &Tensor<f32>, labels: &[usize], teacher: Option<&Tensor<f32>>, beta: f64, phase: Phase) -> Result<()> {
        let t = task.task_id;
        let share = self.config.ablations.share_weights;
        let view = GateView::task(&self.net.mask, t, share);
        let norm_bank = self.norm_bank(t);
        let norm_live = norm_bank == t;
        let run = PhaseRun {
            phase,
            task: t,
            view: &view,
            bias_bank: t,
            norm_bank,
            classes: &task.classes,
            batch_stats: norm_live,
            train: BankTraining { bias: true, norm: norm_live },
            schedule: &self.config.train.distill,
            teacher,
            beta,
        };
        let (bs, ds) = (self.config.train.batch_size, self.config.distill_settings());
        run_phase(&mut self.net, x, labels, &run, bs, &ds, &mut self.rng, &mut self.telemetry)
    }

    /// Self-distillation (`distill = true`) or the packnet train/prune/retrain cycle.
    fn train_self_distill(&mut self, task: &TaskSpec, x: &Tensor<f32>, global: &[usize], distill: bool) -> Result<()> {
        let t = task.task_id;
        let labels = local_labels(global, &task.classes)?;
        let share = self.config.ablations.share_weights;
        let before = self.net.params.values.clone();
        let view = GateView::with_free(&self.net.mask, t, share);
        let norm_bank = self.norm_bank(t);
        let norm_live = norm_bank == t;
        let run = PhaseRun {
            phase: Phase::Main,
            task: t,
            view: &view,
            bias_bank: t,
            norm_bank,
            classes: &task.classes,
            batch_stats: norm_live,
            train: BankTraining { bias: true, norm: norm_live },
            schedule: &self.config.train.main,
            teacher: None,
            beta: 0.0,
        };
        let (bs, ds) = (self.config.train.batch_size, self.config.distill_settings());
        run_phase(&mut self.net, x, &labels, &run, bs, &ds, &mut self.rng, &mut self.telemetry)?;

        let targets = if distill {
            let sub = Subnet {
                view: view.clone(),
                bias_bank: t,
                norm_bank,
                classes: task.classes.clone(),
            };
            Some(subnet_logits(&self.net, &sub, x)?.logits)
        } else {
            None
        };
        let values = self.net.params.values.clone();
        self.net.mask.select_mip(&values, t, self.config.fraction())?;
        for (i, &o) in self.net.mask.owners().iter().enumerate() {
            if o == FREE {
                self.net.params.values[i] = before[i];
            }
        }
        let (beta, phase) = if distill {
            (self.config.train.beta, Phase::Distill)
        } else {
            (0.0, Phase::Retrain)
        };
        self.distill_phase(task, x, &labels, targets.as_ref(), beta, phase)
    }

    fn train_finetune(&mut self, task: &TaskSpec, x: &Tensor<f32>, global: &[usize]) -> Result<()> {
        let classes = self.seen_classes(task.task_id + 1);
        let labels = local_labels(global, &classes)?;
        let full = GateView::full(self.net.weight_count());
        let run = PhaseRun {
            phase: Phase::Finetune,
            task: task.task_id,
            view: &full,
            bias_bank: 0,
            norm_bank: 0,
            classes: &classes,
            batch_stats: true,
            train: BankTraining::ALL,
            schedule: &self.config.train.main,
            teacher: None,
            beta: 0.0,
        };
        let (bs, ds) = (self.config.train.batch_size, self.config.distill_settings());
        run_phase(&mut self.net, x, &labels, &run, bs, &ds, &mut self.rng, &mut self.telemetry)
    }

    /// Sorted union of the classes of the first `n` registered tasks.
    fn seen_classes(&self, n: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.net.task_classes()[..n].iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Sub-network queried for trained task `t`; the whole network in finetune mode.
    pub fn subnet(&self, t: usize) -> Result<Subnet> {
        if t >= self.tasks_done {
            return Err(MindError::State(format!("task {t} has not been trained")));
        }
        if !self.config.train.mode.is_masked() {
            return Ok(Subnet {
                view: GateView::full(self.net.weight_count()),
                bias_bank: 0,
                norm_bank: 0,
                classes: self.net.task_classes()[t].clone(),
            });
        }
        Ok(Subnet {
            view: GateView::task(&self.net.mask, t, self.config.ablations.share_weights),
            bias_bank: t,
            norm_bank: self.norm_bank(t),
            classes: self.net.task_classes()[t].clone(),
        })
    }

    /// Sub-networks consulted by task-agnostic inference.
    pub fn agnostic_subnets(&self) -> Result<Vec<Subnet>> {
        if self.tasks_done == 0 {
            return Err(MindError::State("no task trained yet".into()));
        }
        if self.config.train.mode.is_masked() {
            (0..self.tasks_done).map(|t| self.subnet(t)).collect()
        } else {
            Ok(vec![Subnet {
                view: GateView::full(self.net.weight_count()),
                bias_bank: 0,
                norm_bank: 0,
                classes: self.seen_classes(self.tasks_done),
            }])
        }
    }

    /// Which agnostic sub-network answers for task `t` and the classes it may pick from.
    fn aware_target(&self, t: usize) -> (usize, Vec<usize>) {
        let classes = self.net.task_classes()[t].clone();
        if self.config.train.mode.is_masked() {
            (t, classes)
        } else {
            (0, classes)
        }
    }

    /// Logits of every agnostic sub-network on the chosen split for the trained tasks.
    pub fn eval_logits(&self, scenario: &Scenario, split: Split) -> Result<(Vec<SubnetLogits>, Vec<usize>, Vec<usize>)> {
        let (data, pick): (&Dataset, fn(&TaskSpec) -> &[usize]) = match split {
            Split::Test => (&scenario.test, |t| &t.test),
            Split::Val => (&scenario.val, |t| &t.val),
        };
        let mut idx = vec![];
        let mut tasks = vec![];
        for task in &scenario.tasks[..self.tasks_done] {
            idx.extend_from_slice(pick(task));
            tasks.extend(std::iter::repeat_n(task.task_id, pick(task).len()));
        }
        let labels = idx.iter().map(|&i| data.labels[i]).collect();
        let x = self.inputs(data, &idx);
        let logits = self
            .agnostic_subnets()?
            .iter()
            .map(|s| subnet_logits(&self.net, s, &x))
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, labels, tasks))
    }

    pub fn evaluate(&self, scenario: &Scenario, tau: f64) -> Result<Metrics> {
        let (logits, labels, tasks) = self.eval_logits(scenario, Split::Test)?;
        let recs = predict_from_logits(&logits, tau, &labels, &tasks, &|t| self.aware_target(t))?;
        Ok(compute_metrics(&recs, scenario.n_classes, scenario.n_tasks()))
    }

    pub fn tune_tau(&self, scenario: &Scenario, grid: &[f64]) -> Result<f64> {
        let (logits, labels, tasks) = self.eval_logits(scenario, Split::Val)?;
        tune_temperature(
            &logits,
            &labels,
            &tasks,
            scenario.n_classes,
            scenario.n_tasks(),
            &|t| self.aware_target(t),
            grid,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Test,
    Val,
}

/// Evaluation after one training step of the scenario loop.
#[derive(Clone, Debug, PartialEq)]
pub struct RowReport {
    pub task_trained: usize,
    pub tau: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub beta: f64,
    pub n_tasks: usize,
    pub rows: Vec<RowReport>,
}

impl RunReport {
    pub fn last(&self) -> &RowReport {
        self.rows.last().expect("report has at least one row")
    }

    pub fn acc_tag(&self) -> f64 {
        self.last().metrics.acc_tag
    }

    pub fn acc_taw(&self) -> f64 {
        self.last().metrics.acc_taw
    }

    pub fn tau(&self) -> f64 {
        self.last().tau
    }

    pub fn per_class_acc(&self) -> &[f64] {
        &self.last().metrics.per_class
    }

    /// Row = tasks trained so far, column = test task; NaN where not evaluated.
    pub fn acc_matrix(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![f64::NAN; self.n_tasks]; self.n_tasks];
        for r in &self.rows {
            m[r.task_trained] = r.metrics.per_task_tag.clone();
        }
        m
    }

    /// Task-aware counterpart of [`RunReport::acc_matrix`].
    pub fn taw_matrix(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![f64::NAN; self.n_tasks]; self.n_tasks];
        for r in &self.rows {
            m[r.task_trained] = r.metrics.per_task_taw.clone();
        }
        m
    }
}

/// Trains the remaining tasks of `learner`, evaluating after each one; τ is
/// tuned once after the final task when a grid and validation data exist.
pub fn continue_scenario(learner: &mut Learner, scenario: &Scenario) -> Result<RunReport> {
    continue_scenario_with(learner, scenario, |_| Ok(()))
}

/// [`continue_scenario`] with a callback run after each task is trained and evaluated.
pub fn continue_scenario_with(learner: &mut Learner, scenario: &Scenario, mut after_task: impl FnMut(&Learner) -> Result<()>) -> Result<RunReport> {
    let cfg = learner.config().clone();
    if scenario.n_tasks() != cfg.scenario.n_tasks {
        return Err(MindError::Config(format!(
            "scenario has {} tasks, config says {}",
            scenario.n_tasks(),
            cfg.scenario.n_tasks
        )));
    }
    let mut rows = vec![];
    while learner.tasks_done() < scenario.n_tasks() {
        learner.train_task(scenario)?;
        let metrics = learner.evaluate(scenario, cfg.eval.tau)?;
        rows.push(RowReport {
            task_trained: learner.tasks_done() - 1,
            tau: cfg.eval.tau,
            metrics,
        });
        after_task(learner)?;
    }
    if !cfg.eval.tau_grid.is_empty() && !scenario.val.is_empty() && !rows.is_empty() {
        let tau = learner.tune_tau(scenario, &cfg.eval.tau_grid)?;
        let last = rows.last_mut().unwrap();
        last.tau = tau;
        last.metrics = learner.evaluate(scenario, tau)?;
    }
    Ok(RunReport {
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        beta: cfg.train.beta,
        n_tasks: scenario.n_tasks(),
        rows,
    })
}

pub fn run_scenario(config: &RunConfig, scenario: &Scenario) -> Result<(RunReport, Learner)> {
    let mut learner = Learner::new(config)?;
    let report = continue_scenario(&mut learner, scenario)?;
    Ok((report, learner))
}
