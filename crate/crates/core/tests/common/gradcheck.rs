//! Autodiff versus central differences in double precision.

use mind_core::losses::{combined_loss, DistillSettings};
use mind_core::mask::{gate_gradients, GateView};
use mind_core::network::{ArchSpec, BankTraining, GatedNet, HeadMode, Query};
use mind_core::tensor::{DistillKind, Graph, NodeId, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
/// Below this magnitude both gradients count as zero and are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Default, Clone)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    pub worst_rel: f64,
    pub failures: usize,
}

impl CheckResult {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.coords += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < ABS_FLOOR {
            if diff >= ABS_FLOOR {
                self.failures += 1;
            }
            return;
        }
        let rel = diff / scale;
        self.worst_rel = self.worst_rel.max(rel);
        if rel >= REL_TOL {
            self.failures += 1;
        }
    }

    pub fn ok(&self) -> bool {
        self.failures == 0 && self.coords >= 100
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = g.value(out).shape().to_vec();
    let r = randn(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    let rn = g.constant(r);
    let p = g.mul(out, rn).unwrap();
    g.sum(p)
}

type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId;

/// Checks `build` at `inputs`, sampling up to `coords` coordinates over all inputs.
pub fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, coords: usize, seed: u64) -> CheckResult {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&i| g.grad(i).map(|s| s.to_vec()).unwrap_or_default()).collect();

    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &ids);
        g.value(l).data()[0]
    };
    let flat: Vec<(usize, usize)> = inputs.iter().enumerate().flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, flat.len(), coords.min(flat.len())).into_vec();
    let mut res = CheckResult {
        name: name.into(),
        ..Default::default()
    };
    let mut probe = inputs.clone();
    for p in picks {
        let (k, i) = flat[p];
        let orig = probe[k].data()[i];
        probe[k].data_mut()[i] = orig + H;
        let up = eval(&probe);
        probe[k].data_mut()[i] = orig - H;
        let down = eval(&probe);
        probe[k].data_mut()[i] = orig;
        res.record(analytic[k][i], (up - down) / (2.0 * H));
    }
    res
}

/// Every primitive that appears in the networks, each on its own small graph.
pub fn layer_checks() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = vec![];
    out.push(check_op(
        "linear",
        vec![randn(&mut rng, &[6, 9], 1.0), randn(&mut rng, &[8, 9], 0.5)],
        &|g, x| {
            let y = g.linear(x[0], x[1]).unwrap();
            weighted_sum(g, y, 1)
        },
        150,
        1,
    ));
    out.push(check_op(
        "add_bias",
        vec![randn(&mut rng, &[2, 5, 3, 4], 1.0), randn(&mut rng, &[5], 1.0)],
        &|g, x| {
            let y = g.add_bias(x[0], x[1]).unwrap();
            weighted_sum(g, y, 2)
        },
        150,
        2,
    ));
    out.push(check_op(
        "conv2d 3x3 pad 1",
        vec![randn(&mut rng, &[2, 3, 6, 6], 1.0), randn(&mut rng, &[4, 3, 3, 3], 0.5)],
        &|g, x| {
            let y = g.conv2d(x[0], x[1], 1, 1).unwrap();
            weighted_sum(g, y, 3)
        },
        200,
        3,
    ));
    out.push(check_op(
        "conv2d 3x3 stride 2",
        vec![randn(&mut rng, &[2, 2, 7, 7], 1.0), randn(&mut rng, &[3, 2, 3, 3], 0.5)],
        &|g, x| {
            let y = g.conv2d(x[0], x[1], 2, 0).unwrap();
            weighted_sum(g, y, 4)
        },
        200,
        4,
    ));
    out.push(check_op(
        "max_pool 2x2",
        vec![randn(&mut rng, &[2, 3, 6, 6], 1.0)],
        &|g, x| {
            let y = g.max_pool(x[0], 2).unwrap();
            weighted_sum(g, y, 5)
        },
        216,
        5,
    ));
    let mut r = randn(&mut rng, &[4, 40], 1.0);
    // keep inputs away from the kink at zero
    r.data_mut().iter_mut().for_each(|v| *v += 0.01f64.copysign(*v));
    out.push(check_op(
        "relu",
        vec![r],
        &|g, x| {
            let y = g.relu(x[0]);
            weighted_sum(g, y, 6)
        },
        160,
        6,
    ));
    let mut gamma = randn(&mut rng, &[3], 0.3);
    gamma.data_mut().iter_mut().for_each(|v| *v += 1.0);
    out.push(check_op(
        "batch_norm (batch statistics)",
        vec![randn(&mut rng, &[4, 3, 5, 5], 2.0), gamma.clone(), randn(&mut rng, &[3], 0.5)],
        &|g, x| {
            let y = g.batch_norm_train(x[0], x[1], x[2], 1e-5).unwrap();
            weighted_sum(g, y, 7)
        },
        200,
        7,
    ));
    out.push(check_op(
        "batch_norm (running statistics)",
        vec![randn(&mut rng, &[4, 3, 5, 5], 2.0), gamma, randn(&mut rng, &[3], 0.5)],
        &|g, x| {
            let y = g.batch_norm_eval(x[0], x[1], x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5).unwrap();
            weighted_sum(g, y, 8)
        },
        200,
        8,
    ));
    out.push(check_op(
        "select_cols, reshape, add",
        vec![randn(&mut rng, &[6, 30], 1.0), randn(&mut rng, &[6, 4, 3], 1.0)],
        &|g, x| {
            let s = g.select_cols(x[0], &[3, 17, 0, 29, 11, 8, 21, 5, 12, 26, 1, 14]).unwrap();
            let r = g.reshape(x[1], vec![6, 12]).unwrap();
            let y = g.add(s, r).unwrap();
            weighted_sum(g, y, 9)
        },
        200,
        9,
    ));
    out.push(check_op(
        "softmax",
        vec![randn(&mut rng, &[5, 24], 2.0)],
        &|g, x| {
            let y = g.softmax(x[0]).unwrap();
            weighted_sum(g, y, 10)
        },
        120,
        10,
    ));
    out.push(check_op(
        "cross_entropy",
        vec![randn(&mut rng, &[12, 10], 2.0)],
        &|g, x| g.cross_entropy(x[0], &[0, 3, 9, 1, 1, 5, 7, 2, 8, 4, 6, 0]).unwrap(),
        120,
        11,
    ));
    let teacher = randn(&mut rng, &[12, 10], 2.0);
    for (kind, temp, seed) in [
        (DistillKind::SymmetricKl, 1.0, 12),
        (DistillKind::SymmetricKl, 2.0, 13),
        (DistillKind::JensenShannon, 1.0, 14),
    ] {
        let t = teacher.clone();
        out.push(check_op(
            &format!("distill {kind:?} T={temp}"),
            vec![randn(&mut rng, &[12, 10], 2.0)],
            &move |g, x| {
                let tn = g.constant(t.clone());
                g.distill(x[0], tn, kind, temp).unwrap()
            },
            120,
            seed,
        ));
    }
    out
}

/// Full `ce + β·sd` through a gated network: two tasks own parts of every
/// layer, task 1 is queried with weight sharing, so task-0 weights are active
/// but frozen and free weights are inactive.
pub fn network_check(preset: &str, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, hidden) = if preset == "mlp" { (vec![12], vec![10]) } else { (vec![2, 8, 8], vec![]) };
    let spec = ArchSpec {
        preset: preset.into(),
        embed_dim: 6,
        input_shape: input.clone(),
        n_classes: 5,
        hidden,
    };
    let mut net = GatedNet::<f64>::build(&spec, HeadMode::Shared, 2, 0.4, &mut rng).unwrap();
    net.mask.select_random(0, 0.4, seed + 1).unwrap();
    net.mask.select_random(1, 0.4, seed + 2).unwrap();
    for v in net.banks[1].affine.iter_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    let view = GateView::task(&net.mask, 1, true);
    let classes = [4usize, 0, 2];
    let mut xs = vec![4];
    xs.extend_from_slice(&input);
    let x = randn(&mut rng, &xs, 1.5);
    let teacher = randn(&mut rng, &[4, 3], 2.0);
    let labels = [0usize, 2, 1, 2];
    let settings = DistillSettings {
        kind: DistillKind::SymmetricKl,
        temperature: 1.0,
    };
    let q = Query {
        view: &view,
        bias_bank: 1,
        norm_bank: 1,
        classes: &classes,
        batch_stats: true,
        train: BankTraining::ALL,
    };
    let loss_of = |net: &GatedNet<f64>, g: &mut Graph<f64>| {
        let xn = g.constant(x.clone());
        let fwd = net.forward_graph(g, xn, &q).unwrap();
        let tn = g.constant(teacher.clone());
        let (l, _) = combined_loss(g, fwd.logits, &labels, Some(tn), 5.0, &settings).unwrap();
        (l, fwd)
    };
    let mut g = Graph::new();
    let (l, fwd) = loss_of(&net, &mut g);
    g.backward(l).unwrap();
    net.zero_grads();
    net.accumulate_grads(&g, &fwd, &q);
    gate_gradients(&mut net.params.grads, &view);
    let w_grads = net.params.grads.clone();
    let b_grads = net.banks[1].grad.clone();

    let value = |net: &GatedNet<f64>| {
        let mut g = Graph::new();
        let (l, _) = loss_of(net, &mut g);
        g.value(l).data()[0]
    };
    let mut res = CheckResult {
        name: format!("{preset} combined loss (gated)"),
        ..Default::default()
    };
    let trainable: Vec<usize> = (0..view.len()).filter(|&i| view.trainable[i]).collect();
    let inactive: Vec<usize> = (0..view.len()).filter(|&i| !view.active[i]).collect();
    let mut probe = net.clone();
    for p in sample(&mut rng, trainable.len(), 120.min(trainable.len())) {
        let i = trainable[p];
        let orig = probe.params.values[i];
        probe.params.values[i] = orig + H;
        let up = value(&probe);
        probe.params.values[i] = orig - H;
        let down = value(&probe);
        probe.params.values[i] = orig;
        res.record(w_grads[i], (up - down) / (2.0 * H));
    }
    // inactive weights never reach the loss, and their gradient is exactly zero
    for p in sample(&mut rng, inactive.len(), 20.min(inactive.len())) {
        let i = inactive[p];
        let orig = probe.params.values[i];
        probe.params.values[i] = orig + 0.5;
        let moved = value(&probe) != value(&net);
        probe.params.values[i] = orig;
        if moved || w_grads[i] != 0.0 {
            res.failures += 1;
        }
    }
    let n_aff = b_grads.len();
    for i in sample(&mut rng, n_aff, 40.min(n_aff)) {
        let orig = probe.banks[1].affine[i];
        probe.banks[1].affine[i] = orig + H;
        let up = value(&probe);
        probe.banks[1].affine[i] = orig - H;
        let down = value(&probe);
        probe.banks[1].affine[i] = orig;
        res.record(b_grads[i], (up - down) / (2.0 * H));
    }
    res
}
