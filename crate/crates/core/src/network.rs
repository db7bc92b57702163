//! The gated backbone: masked conv/dense weights shared by all sub-networks,
//! plus per-task banks holding biases and batch-norm state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::mask::{gate_values, GateView, MaskedLayer, TaskMask};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `cnn-small`, `cnn-res` or `mlp`.
    pub preset: String,
    pub embed_dim: usize,
    /// `[C, H, W]` for the CNN presets, `[features]` for `mlp`.
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
    /// Hidden widths of the MLP before the embedding layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            preset: "cnn-small".into(),
            embed_dim: 64,
            input_shape: vec![3, 32, 32],
            n_classes: 10,
            hidden: vec![],
        }
    }
}

/// How classifier rows are split between tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Each class row belongs to the task that introduced the class.
    PerTask,
    /// All tasks score all classes; head weights are drawn by the policy like any layer.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSlot {
    pub offset: usize,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl WeightSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat store of all maskable weights with their gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub values: Vec<T>,
    pub grads: Vec<T>,
    pub slots: Vec<WeightSlot>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(T::zero());
    }

    pub fn slot_values(&self, slot: usize) -> &[T] {
        &self.values[self.slots[slot].range()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BiasEntry {
    offset: usize,
    len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NormEntry {
    gamma: usize,
    beta: usize,
    /// Running mean at `stats`, running variance at `stats + ch`.
    stats: usize,
    ch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvRef {
    w: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Block {
    Conv(ConvRef),
    Dense { w: usize, bias: usize },
    Norm(usize),
    Relu,
    Pool(usize),
    Flatten,
    Residual { c1: ConvRef, n1: usize, c2: ConvRef, n2: usize },
    Head { w: usize, bias: usize },
}

/// One task's banked state: trainable affine part (biases, BN γ/β) and running BN statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Bank<T> {
    pub affine: Vec<T>,
    pub stats: Vec<T>,
    pub grad: Vec<T>,
}

/// Which bank parts a training query may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankTraining {
    pub bias: bool,
    pub norm: bool,
}

impl BankTraining {
    pub const NONE: BankTraining = BankTraining { bias: false, norm: false };
    pub const ALL: BankTraining = BankTraining { bias: true, norm: true };
}

/// Everything a forward pass needs besides the input.
#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub view: &'a GateView,
    pub bias_bank: usize,
    pub norm_bank: usize,
    /// Global class ids whose logits are returned, in order.
    pub classes: &'a [usize],
    /// Normalize with batch statistics (and record them) instead of running ones.
    pub batch_stats: bool,
    pub train: BankTraining,
}

/// Handles into a recorded forward pass.
pub struct Forward {
    pub logits: NodeId,
    weights: Vec<(usize, NodeId)>,
    bias_leaves: Vec<(BiasEntry, NodeId)>,
    norm_leaves: Vec<(NormEntry, NodeId, NodeId)>,
    norm_outputs: Vec<(NormEntry, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedNet<T> {
    spec: ArchSpec,
    head_mode: HeadMode,
    blocks: Vec<Block>,
    biases: Vec<BiasEntry>,
    norms: Vec<NormEntry>,
    affine_len: usize,
    stats_len: usize,
    head_slot: usize,
    pub params: ParamStore<T>,
    pub mask: TaskMask,
    pub banks: Vec<Bank<T>>,
    task_classes: Vec<Vec<usize>>,
}

struct Builder {
    blocks: Vec<Block>,
    slots: Vec<WeightSlot>,
    biases: Vec<BiasEntry>,
    norms: Vec<NormEntry>,
    affine_len: usize,
    stats_len: usize,
    n_weights: usize,
}

impl Builder {
    fn weight(&mut self, shape: Vec<usize>, fan_in: usize) -> usize {
        let slot = WeightSlot {
            offset: self.n_weights,
            shape,
            fan_in,
        };
        self.n_weights += slot.len();
        self.slots.push(slot);
        self.slots.len() - 1
    }

    fn bias(&mut self, len: usize) -> usize {
        self.biases.push(BiasEntry { offset: self.affine_len, len });
        self.affine_len += len;
        self.biases.len() - 1
    }

    fn norm(&mut self, ch: usize) -> usize {
        self.norms.push(NormEntry {
            gamma: self.affine_len,
            beta: self.affine_len + ch,
            stats: self.stats_len,
            ch,
        });
        self.affine_len += 2 * ch;
        self.stats_len += 2 * ch;
        self.norms.len() - 1
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize) -> ConvRef {
        ConvRef {
            w: self.weight(vec![cout, cin, k, k], cin * k * k),
            bias: self.bias(cout),
            stride: 1,
            pad: k / 2,
        }
    }

    fn dense(&mut self, fin: usize, fout: usize) -> Block {
        Block::Dense {
            w: self.weight(vec![fout, fin], fin),
            bias: self.bias(fout),
        }
    }
}

fn config_err(msg: impl Into<String>) -> MindError {
    MindError::Config(msg.into())
}

fn compile(spec: &ArchSpec) -> Result<Builder> {
    let mut b = Builder {
        blocks: vec![],
        slots: vec![],
        biases: vec![],
        norms: vec![],
        affine_len: 0,
        stats_len: 0,
        n_weights: 0,
    };
    if spec.n_classes < 1 || spec.embed_dim < 1 {
        return Err(config_err("arch.n_classes and arch.embed_dim must be positive"));
    }
    match spec.preset.as_str() {
        "cnn-small" | "cnn-res" => {
            let &[c, h, w] = spec.input_shape.as_slice() else {
                return Err(config_err(format!(
                    "{} expects arch.input_shape = [C, H, W], got {:?}",
                    spec.preset, spec.input_shape
                )));
            };
            if c == 0 || h < 8 || w < 8 {
                return Err(config_err(format!("input {:?} too small for three 2×2 pools", spec.input_shape)));
            }
            let residual = spec.preset == "cnn-res";
            let mut cin = c;
            for f in [16, 32, 64] {
                let conv = b.conv(cin, f, 3);
                b.blocks.push(Block::Conv(conv));
                let n = b.norm(f);
                b.blocks.push(Block::Norm(n));
                b.blocks.push(Block::Relu);
                if residual {
                    let c1 = b.conv(f, f, 3);
                    let n1 = b.norm(f);
                    let c2 = b.conv(f, f, 3);
                    let n2 = b.norm(f);
                    b.blocks.push(Block::Residual { c1, n1, c2, n2 });
                }
                b.blocks.push(Block::Pool(2));
                cin = f;
            }
            b.blocks.push(Block::Flatten);
            let flat = 64 * (h / 8) * (w / 8);
            let d = b.dense(flat, spec.embed_dim);
            b.blocks.push(d);
            b.blocks.push(Block::Relu);
        }
        "mlp" => {
            let &[f] = spec.input_shape.as_slice() else {
                return Err(config_err(format!("mlp expects arch.input_shape = [features], got {:?}", spec.input_shape)));
            };
            if f == 0 {
                return Err(config_err("mlp input must have at least one feature"));
            }
            let mut fin = f;
            for &width in spec.hidden.iter().chain(std::iter::once(&spec.embed_dim)) {
                if width == 0 {
                    return Err(config_err("mlp widths must be positive"));
                }
                let d = b.dense(fin, width);
                b.blocks.push(d);
                let n = b.norm(width);
                b.blocks.push(Block::Norm(n));
                b.blocks.push(Block::Relu);
                fin = width;
            }
        }
        other => return Err(config_err(format!("unknown arch.preset `{other}` (expected cnn-small, cnn-res or mlp)"))),
    }
    let w = b.weight(vec![spec.n_classes, spec.embed_dim], spec.embed_dim);
    let bias = b.bias(spec.n_classes);
    b.blocks.push(Block::Head { w, bias });
    Ok(b)
}

/// Kaiming-uniform bound for a ReLU network: `√2 · √(3 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> GatedNet<T> {
    /// Builds the backbone with `n_banks` task banks and freshly drawn weights.
    pub fn build<R: Rng>(spec: &ArchSpec, head_mode: HeadMode, n_tasks: usize, fraction: f64, rng: &mut R) -> Result<Self> {
        let b = compile(spec)?;
        let head_slot = b.slots.len() - 1;
        let layers = b
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| MaskedLayer {
                offset: s.offset,
                len: s.len(),
                policy: i != head_slot || head_mode == HeadMode::Shared,
            })
            .collect();
        let mask = TaskMask::new(layers, n_tasks, fraction)?;
        let mut values = vec![T::zero(); b.n_weights];
        for s in &b.slots {
            let bound = init_bound(s.fan_in);
            for v in &mut values[s.range()] {
                *v = T::lit(rng.gen_range(-bound..bound));
            }
        }
        let mut net = GatedNet {
            spec: spec.clone(),
            head_mode,
            blocks: b.blocks,
            affine_len: b.affine_len,
            stats_len: b.stats_len,
            biases: b.biases,
            norms: b.norms,
            head_slot,
            params: ParamStore {
                grads: vec![T::zero(); values.len()],
                values,
                slots: b.slots,
            },
            mask,
            banks: vec![],
            task_classes: vec![],
        };
        net.banks = (0..n_tasks).map(|_| net.fresh_bank()).collect();
        Ok(net)
    }

    pub fn fresh_bank(&self) -> Bank<T> {
        let mut affine = vec![T::zero(); self.affine_len];
        let mut stats = vec![T::zero(); self.stats_len];
        for n in &self.norms {
            affine[n.gamma..n.gamma + n.ch].fill(T::one());
            stats[n.stats + n.ch..n.stats + 2 * n.ch].fill(T::one());
        }
        Bank {
            affine,
            stats,
            grad: vec![T::zero(); self.affine_len],
        }
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn n_tasks(&self) -> usize {
        self.banks.len()
    }

    pub fn head_slot(&self) -> usize {
        self.head_slot
    }

    pub fn head_dim(&self) -> usize {
        self.spec.n_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn weight_count(&self) -> usize {
        self.params.len()
    }

    pub fn bank_layout(&self) -> (usize, usize) {
        (self.affine_len, self.stats_len)
    }

    /// Per-entry mask over a bank's affine vector selecting biases and/or BN γ/β.
    pub fn bank_trainable(&self, train: BankTraining) -> Vec<bool> {
        let mut m = vec![false; self.affine_len];
        if train.bias {
            for b in &self.biases {
                m[b.offset..b.offset + b.len].fill(true);
            }
        }
        if train.norm {
            for n in &self.norms {
                m[n.gamma..n.gamma + 2 * n.ch].fill(true);
            }
        }
        m
    }

    /// Tasks registered so far, with their class ids.
    pub fn task_classes(&self) -> &[Vec<usize>] {
        &self.task_classes
    }

    /// Registers the next task's classes; in per-task head mode this also
    /// hands it the matching head rows.
    pub fn register_task(&mut self, classes: &[usize]) -> Result<usize> {
        let t = self.task_classes.len();
        if t >= self.n_tasks() {
            return Err(MindError::State(format!("network has room for {} tasks", self.n_tasks())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.spec.n_classes) {
            return Err(MindError::Contract(format!("class {bad} outside head of {}", self.spec.n_classes)));
        }
        if self.head_mode == HeadMode::PerTask {
            self.mask.assign_rows(self.head_slot, self.spec.embed_dim, classes, t)?;
        }
        self.task_classes.push(classes.to_vec());
        Ok(t)
    }

    pub(crate) fn set_task_classes(&mut self, classes: Vec<Vec<usize>>) {
        self.task_classes = classes;
    }

    /// Redraws the listed weights from the init distribution.
    pub fn reinit<R: Rng>(&mut self, indices: impl IntoIterator<Item = usize>, rng: &mut R) {
        let mut it = indices.into_iter().peekable();
        for s in &self.params.slots {
            let bound = init_bound(s.fan_in);
            while let Some(&i) = it.peek() {
                if i >= s.offset + s.len() {
                    break;
                }
                if i >= s.offset {
                    self.params.values[i] = T::lit(rng.gen_range(-bound..bound));
                }
                it.next();
            }
        }
    }

    /// Records a forward pass of `x` into `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, q: &Query) -> Result<Forward> {
        if q.view.len() != self.params.len() {
            return Err(MindError::Dimension(format!(
                "gate view over {} weights, network has {}",
                q.view.len(),
                self.params.len()
            )));
        }
        for bank in [q.bias_bank, q.norm_bank] {
            if bank >= self.banks.len() {
                return Err(MindError::State(format!("no bank {bank}")));
            }
        }
        if let Some(&bad) = q.classes.iter().find(|&&c| c >= self.spec.n_classes) {
            return Err(MindError::Contract(format!("class {bad} outside head")));
        }
        let in_shape = &g.value(x).shape()[1..];
        if in_shape != self.spec.input_shape.as_slice() {
            return Err(MindError::Dimension(format!(
                "input {:?}, network expects {:?}",
                in_shape, self.spec.input_shape
            )));
        }
        let mut fwd = Forward {
            logits: x,
            weights: vec![],
            bias_leaves: vec![],
            norm_leaves: vec![],
            norm_outputs: vec![],
        };
        let mut h = x;
        for block in &self.blocks {
            h = match *block {
                Block::Conv(c) => self.conv(g, h, c, q, &mut fwd)?,
                Block::Dense { w, bias } | Block::Head { w, bias } => {
                    let wn = self.weight_leaf(g, w, q, &mut fwd)?;
                    let y = g.linear(h, wn)?;
                    let b = self.bias_leaf(g, bias, q, &mut fwd)?;
                    let y = g.add_bias(y, b)?;
                    if matches!(block, Block::Head { .. }) {
                        g.select_cols(y, q.classes)?
                    } else {
                        y
                    }
                }
                Block::Norm(n) => self.norm(g, h, n, q, &mut fwd)?,
                Block::Relu => g.relu(h),
                Block::Pool(k) => g.max_pool(h, k)?,
                Block::Flatten => {
                    let s = g.value(h).shape();
                    let n = s[0];
                    let rest = s[1..].iter().product();
                    g.reshape(h, vec![n, rest])?
                }
                Block::Residual { c1, n1, c2, n2 } => {
                    let y = self.conv(g, h, c1, q, &mut fwd)?;
                    let y = self.norm(g, y, n1, q, &mut fwd)?;
                    let y = g.relu(y);
                    let y = self.conv(g, y, c2, q, &mut fwd)?;
                    let y = self.norm(g, y, n2, q, &mut fwd)?;
                    let y = g.add(y, h)?;
                    g.relu(y)
                }
            };
        }
        fwd.logits = h;
        Ok(fwd)
    }

    fn weight_leaf(&self, g: &mut Graph<T>, slot: usize, q: &Query, fwd: &mut Forward) -> Result<NodeId> {
        let s = &self.params.slots[slot];
        let r = s.range();
        let eff = gate_values(&self.params.values[r.clone()], &q.view.active[r.clone()]);
        let mut t = Tensor::new(s.shape.clone(), eff)?;
        t.requires_grad = q.view.trainable[r].iter().any(|&b| b);
        let id = g.leaf(t);
        fwd.weights.push((slot, id));
        Ok(id)
    }

    fn bias_leaf(&self, g: &mut Graph<T>, idx: usize, q: &Query, fwd: &mut Forward) -> Result<NodeId> {
        let e = self.biases[idx];
        let bank = &self.banks[q.bias_bank];
        let mut t = Tensor::new(vec![e.len], bank.affine[e.offset..e.offset + e.len].to_vec())?;
        t.requires_grad = q.train.bias;
        let id = g.leaf(t);
        fwd.bias_leaves.push((e, id));
        Ok(id)
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, c: ConvRef, q: &Query, fwd: &mut Forward) -> Result<NodeId> {
        let w = self.weight_leaf(g, c.w, q, fwd)?;
        let y = g.conv2d(x, w, c.stride, c.pad)?;
        let b = self.bias_leaf(g, c.bias, q, fwd)?;
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: NodeId, idx: usize, q: &Query, fwd: &mut Forward) -> Result<NodeId> {
        let e = self.norms[idx];
        let bank = &self.banks[q.norm_bank];
        let mut gamma = Tensor::new(vec![e.ch], bank.affine[e.gamma..e.gamma + e.ch].to_vec())?;
        let mut beta = Tensor::new(vec![e.ch], bank.affine[e.beta..e.beta + e.ch].to_vec())?;
        gamma.requires_grad = q.train.norm;
        beta.requires_grad = q.train.norm;
        let (gn, bn) = (g.leaf(gamma), g.leaf(beta));
        fwd.norm_leaves.push((e, gn, bn));
        let eps = T::lit(BN_EPS);
        if q.batch_stats {
            let y = g.batch_norm_train(x, gn, bn, eps)?;
            fwd.norm_outputs.push((e, y));
            Ok(y)
        } else {
            let mean = &bank.stats[e.stats..e.stats + e.ch];
            let var = &bank.stats[e.stats + e.ch..e.stats + 2 * e.ch];
            g.batch_norm_eval(x, gn, bn, mean, var, eps)
        }
    }

    /// Adds the gradients reached by `fwd` into the weight gradient buffer and
    /// into the bias/norm banks named by `q`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, fwd: &Forward, q: &Query) {
        for &(slot, id) in &fwd.weights {
            if let Some(gr) = g.grad(id) {
                let r = self.params.slots[slot].range();
                for (d, &v) in self.params.grads[r].iter_mut().zip(gr) {
                    *d += v;
                }
            }
        }
        let bias_grad = &mut self.banks[q.bias_bank].grad;
        for &(e, id) in &fwd.bias_leaves {
            if let Some(gr) = g.grad(id) {
                for (d, &v) in bias_grad[e.offset..e.offset + e.len].iter_mut().zip(gr) {
                    *d += v;
                }
            }
        }
        let norm_grad = &mut self.banks[q.norm_bank].grad;
        for &(e, gn, bn) in &fwd.norm_leaves {
            for (id, off) in [(gn, e.gamma), (bn, e.beta)] {
                if let Some(gr) = g.grad(id) {
                    for (d, &v) in norm_grad[off..off + e.ch].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
            }
        }
    }

    /// Folds batch statistics of a training pass into the running statistics of `bank`.
    pub fn update_running_stats(&mut self, g: &Graph<T>, fwd: &Forward, bank: usize) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let stats = &mut self.banks[bank].stats;
        for &(e, id) in &fwd.norm_outputs {
            let Some((mean, var)) = g.batch_stats(id) else { continue };
            let shape = g.value(id).shape();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for c in 0..e.ch {
                let rm = &mut stats[e.stats + c];
                *rm = keep * *rm + m * mean[c];
                let rv = &mut stats[e.stats + e.ch + c];
                *rv = keep * *rv + m * var[c] * unbias;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
        for b in &mut self.banks {
            b.grad.fill(T::zero());
        }
    }

    /// Eval-mode logits of registered task `task` for a batch, restricted to its classes.
    pub fn forward_task(&self, x: &Tensor<T>, task: usize, share_weights: bool) -> Result<Tensor<T>> {
        let classes = self
            .task_classes
            .get(task)
            .ok_or_else(|| MindError::State(format!("task {task} has not been trained")))?;
        let view = GateView::task(&self.mask, task, share_weights);
        let q = Query {
            view: &view,
            bias_bank: task,
            norm_bank: task,
            classes,
            batch_stats: false,
            train: BankTraining::NONE,
        };
        self.logits(x, &q)
    }

    /// Runs a detached forward pass and returns the logits.
    pub fn logits(&self, x: &Tensor<T>, q: &Query) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let fwd = self.forward_graph(&mut g, xn, q)?;
        Ok(g.value(fwd.logits).clone())
    }
}
