//! Task ownership of maskable weights and the binary gates derived from it.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MindError, Result};
use crate::tensor::Scalar;

/// Owner id of a weight not yet assigned to any task.
pub const FREE: u16 = u16::MAX;

/// One maskable layer inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedLayer {
    pub offset: usize,
    pub len: usize,
    /// Whether selection policies draw from this layer. Per-task classifier
    /// heads are assigned row-wise instead.
    pub policy: bool,
}

/// Per-weight owner map. Ownership is write-once.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMask {
    layers: Vec<MaskedLayer>,
    owners: Vec<u16>,
    n_tasks: usize,
    fraction: f64,
    selected: Vec<bool>,
}

/// Per-layer quota, rounded half up.
pub fn quota(layer_len: usize, fraction: f64) -> usize {
    ((fraction * layer_len as f64) + 0.5).floor() as usize
}

impl TaskMask {
    pub fn new(layers: Vec<MaskedLayer>, n_tasks: usize, fraction: f64) -> Result<Self> {
        if n_tasks == 0 || n_tasks >= FREE as usize {
            return Err(MindError::Config(format!("n_tasks must be in 1..{FREE}, got {n_tasks}")));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(MindError::Config(format!("fraction_per_task must be in (0, 1], got {fraction}")));
        }
        let mut expect = 0;
        for l in &layers {
            if l.offset != expect {
                return Err(MindError::Config("mask layers must tile the parameter vector".into()));
            }
            expect += l.len;
        }
        Ok(TaskMask {
            owners: vec![FREE; expect],
            layers,
            n_tasks,
            fraction,
            selected: vec![false; n_tasks],
        })
    }

    /// Rebuilds a mask from serialized owners.
    pub fn from_owners(layers: Vec<MaskedLayer>, n_tasks: usize, fraction: f64, owners: Vec<u16>) -> Result<Self> {
        let mut m = Self::new(layers, n_tasks, fraction)?;
        if owners.len() != m.owners.len() {
            return Err(MindError::format("masks", format!("expected {} owners, got {}", m.owners.len(), owners.len())));
        }
        if let Some(&bad) = owners.iter().find(|&&o| o != FREE && o as usize >= n_tasks) {
            return Err(MindError::format("masks", format!("owner id {bad} out of range")));
        }
        for l in m.layers.iter().filter(|l| l.policy) {
            for &o in &owners[l.offset..l.offset + l.len] {
                if o != FREE {
                    m.selected[o as usize] = true;
                }
            }
        }
        m.owners = owners;
        Ok(m)
    }

    pub fn layers(&self) -> &[MaskedLayer] {
        &self.layers
    }

    pub fn owners(&self) -> &[u16] {
        &self.owners
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn is_selected(&self, task: usize) -> bool {
        self.selected.get(task).copied().unwrap_or(false)
    }

    pub fn free_count(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        self.owners[l.offset..l.offset + l.len].iter().filter(|&&o| o == FREE).count()
    }

    pub fn owned_count(&self, layer: usize, task: usize) -> usize {
        let l = &self.layers[layer];
        self.owners[l.offset..l.offset + l.len].iter().filter(|&&o| o as usize == task).count()
    }

    fn check_task(&self, task: usize) -> Result<u16> {
        if task >= self.n_tasks {
            return Err(MindError::Contract(format!("task {task} outside 0..{}", self.n_tasks)));
        }
        if self.selected[task] {
            return Err(MindError::Contract(format!("task {task} already owns weights")));
        }
        Ok(task as u16)
    }

    /// Quotas for every policy layer, or the first layer that cannot meet its
    /// quota. The last task takes whatever is left if rounding ran the layer
    /// dry, and everything left when the fractions add up to the whole layer.
    fn quotas(&self, task: usize, fraction: f64) -> Result<Vec<usize>> {
        let last = task + 1 == self.n_tasks;
        let exhaust = last && fraction * self.n_tasks as f64 >= 1.0 - 1e-9;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if !l.policy {
                    return Ok(0);
                }
                let want = quota(l.len, fraction);
                let free = self.free_count(i);
                if exhaust {
                    return Ok(free);
                }
                match (free >= want, last) {
                    (true, _) => Ok(want),
                    (false, true) => Ok(free),
                    (false, false) => Err(MindError::Capacity { layer: i, needed: want, free }),
                }
            })
            .collect()
    }

    /// Random policy: per layer, a uniformly drawn set of FREE weights.
    pub fn select_random(&mut self, task: usize, fraction: f64, seed: u64) -> Result<()> {
        let id = self.check_task(task)?;
        let quotas = self.quotas(task, fraction)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, &k) in self.layers.iter().zip(&quotas) {
            if !l.policy {
                continue;
            }
            let free: Vec<usize> = (l.offset..l.offset + l.len).filter(|&i| self.owners[i] == FREE).collect();
            let mut picks = index::sample(&mut rng, free.len(), k).into_vec();
            picks.sort_unstable();
            for p in picks {
                self.owners[free[p]] = id;
            }
        }
        self.selected[task] = true;
        Ok(())
    }

    /// Most-important-parameter policy: per layer, the FREE weights of largest
    /// magnitude. Ties go to the lower flat index.
    pub fn select_mip<T: Scalar>(&mut self, values: &[T], task: usize, fraction: f64) -> Result<()> {
        if values.len() != self.owners.len() {
            return Err(MindError::Dimension(format!("{} values for {} weights", values.len(), self.owners.len())));
        }
        let id = self.check_task(task)?;
        let quotas = self.quotas(task, fraction)?;
        for (l, &k) in self.layers.iter().zip(&quotas) {
            if !l.policy {
                continue;
            }
            let mut free: Vec<usize> = (l.offset..l.offset + l.len).filter(|&i| self.owners[i] == FREE).collect();
            free.sort_by(|&a, &b| {
                values[b]
                    .abs()
                    .partial_cmp(&values[a].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &i in &free[..k] {
                self.owners[i] = id;
            }
        }
        self.selected[task] = true;
        Ok(())
    }

    /// Hands whole rows of a non-policy layer to `task` (class rows of the head).
    pub fn assign_rows(&mut self, layer: usize, row_len: usize, rows: &[usize], task: usize) -> Result<()> {
        if task >= self.n_tasks {
            return Err(MindError::Contract(format!("task {task} outside 0..{}", self.n_tasks)));
        }
        let l = self.layers[layer].clone();
        if l.policy || row_len == 0 || !l.len.is_multiple_of(row_len) {
            return Err(MindError::Contract(format!("layer {layer} is not row-assignable")));
        }
        for &r in rows {
            if (r + 1) * row_len > l.len {
                return Err(MindError::Dimension(format!("row {r} outside layer {layer}")));
            }
            let span = l.offset + r * row_len..l.offset + (r + 1) * row_len;
            if self.owners[span.clone()].iter().any(|&o| o != FREE && o as usize != task) {
                return Err(MindError::Contract(format!("row {r} of layer {layer} already owned")));
            }
            self.owners[span].fill(task as u16);
        }
        Ok(())
    }
}

/// Binary gates for one query: which weights take part in the forward pass
/// and which may be updated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateView {
    pub active: Vec<bool>,
    pub trainable: Vec<bool>,
}

impl GateView {
    /// Sub-network `task`: its own weights are trainable; earlier tasks' weights
    /// are active but frozen when `share` is set.
    pub fn task(mask: &TaskMask, task: usize, share: bool) -> Self {
        let t = task as u16;
        let active = mask.owners.iter().map(|&o| o == t || (share && o < t)).collect();
        let trainable = mask.owners.iter().map(|&o| o == t).collect();
        GateView { active, trainable }
    }

    /// [`GateView::task`] plus every FREE weight, active and trainable.
    pub fn with_free(mask: &TaskMask, task: usize, share: bool) -> Self {
        let t = task as u16;
        let active = mask.owners.iter().map(|&o| o == FREE || o == t || (share && o < t)).collect();
        let trainable = mask.owners.iter().map(|&o| o == FREE || o == t).collect();
        GateView { active, trainable }
    }

    /// Everything active and trainable (an unmasked network).
    pub fn full(n: usize) -> Self {
        GateView {
            active: vec![true; n],
            trainable: vec![true; n],
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable.fill(false);
        self
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// Effective weights: stored value where active, exactly zero elsewhere.
pub fn gate_forward<T: Scalar>(values: &[T], view: &GateView) -> Vec<T> {
    gate_values(values, &view.active)
}

pub fn gate_values<T: Scalar>(values: &[T], active: &[bool]) -> Vec<T> {
    values.iter().zip(active).map(|(&v, &a)| if a { v } else { T::zero() }).collect()
}

/// Zeroes the gradient of every non-trainable weight.
pub fn gate_gradients<T: Scalar>(grads: &mut [T], view: &GateView) {
    for (g, &t) in grads.iter_mut().zip(&view.trainable) {
        if !t {
            *g = T::zero();
        }
    }
}
