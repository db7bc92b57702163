use mind_core::mask::GateView;
use mind_core::network::{ArchSpec, BankTraining, GatedNet, HeadMode, Query};
use mind_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(preset: &str, input: &[usize], embed: usize, classes: usize, hidden: &[usize]) -> ArchSpec {
    ArchSpec {
        preset: preset.into(),
        embed_dim: embed,
        input_shape: input.to_vec(),
        n_classes: classes,
        hidden: hidden.to_vec(),
    }
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn eval_query<'a>(view: &'a GateView, bank: usize, classes: &'a [usize]) -> Query<'a> {
    Query {
        view,
        bias_bank: bank,
        norm_bank: bank,
        classes,
        batch_stats: false,
        train: BankTraining::NONE,
    }
}

#[test]
fn mlp_weight_count_excludes_banked_biases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = GatedNet::<f32>::build(&spec("mlp", &[20], 64, 10, &[64]), HeadMode::PerTask, 2, 0.5, &mut rng).unwrap();
    assert_eq!(net.weight_count(), 20 * 64 + 64 * 64 + 64 * 10);
}

#[test]
fn cnn_small_head_maps_embedding_to_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = GatedNet::<f32>::build(&spec("cnn-small", &[3, 32, 32], 64, 100, &[]), HeadMode::PerTask, 10, 0.1, &mut rng).unwrap();
    assert_eq!(net.params.slots[net.head_slot()].shape, vec![100, 64]);
}

#[test]
fn unknown_preset_and_bad_shapes_are_config_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in [
        spec("vgg", &[3, 16, 16], 8, 4, &[]),
        spec("cnn-small", &[48], 8, 4, &[]),
        spec("mlp", &[3, 4, 4], 8, 4, &[]),
        spec("cnn-small", &[3, 4, 4], 8, 4, &[]),
    ] {
        let e = GatedNet::<f32>::build(&s, HeadMode::Shared, 1, 1.0, &mut rng).unwrap_err();
        assert!(e.is_usage(), "{e}");
    }
}

#[test]
fn identity_layers_pass_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = GatedNet::<f64>::build(&spec("mlp", &[2], 2, 2, &[]), HeadMode::Shared, 1, 1.0, &mut rng).unwrap();
    net.mask.select_random(0, 1.0, 0).unwrap();
    net.register_task(&[0, 1]).unwrap();
    net.params.values.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    let z = net.forward_task(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), 0, true).unwrap();
    // only the normalization epsilon separates the output from the input
    assert!((z.data()[0] - 1.0).abs() < 1e-4 && (z.data()[1] - 2.0).abs() < 1e-4, "{:?}", z.data());
}

#[test]
fn all_free_network_outputs_head_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = spec("cnn-small", &[3, 8, 8], 8, 5, &[]);
    let mut net = GatedNet::<f64>::build(&s, HeadMode::Shared, 2, 0.5, &mut rng).unwrap();
    for v in net.banks[0].affine.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let (affine_len, _) = net.bank_layout();
    let head_bias = net.banks[0].affine[affine_len - 5..].to_vec();
    let view = GateView::task(&net.mask, 0, true);
    assert!(view.active.iter().all(|&a| !a));
    let classes = [0, 1, 2, 3, 4];
    let z = net.logits(&random(vec![3, 3, 8, 8], &mut rng), &eval_query(&view, 0, &classes)).unwrap();
    for row in z.data().chunks(5) {
        assert_eq!(row, head_bias.as_slice());
    }
}

#[test]
fn later_tasks_weights_contribute_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = spec("cnn-small", &[3, 8, 8], 8, 6, &[]);
    let mut net = GatedNet::<f64>::build(&s, HeadMode::Shared, 3, 0.3, &mut rng).unwrap();
    for t in 0..3 {
        net.mask.select_random(t, 0.3, 10 + t as u64).unwrap();
    }
    let x = random(vec![4, 3, 8, 8], &mut rng);
    let classes = [0, 1, 2, 3, 4, 5];
    let view = GateView::task(&net.mask, 1, true);
    let gated = net.logits(&x, &eval_query(&view, 1, &classes)).unwrap();

    let mut manual = net.clone();
    for (v, &o) in manual.params.values.iter_mut().zip(net.mask.owners()) {
        if o > 1 {
            *v = 0.0;
        }
    }
    let full = GateView::full(manual.weight_count());
    let zeroed = manual.logits(&x, &eval_query(&full, 1, &classes)).unwrap();
    assert_eq!(gated.data(), zeroed.data());
}

#[test]
fn residual_block_with_zero_second_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let res = GatedNet::<f64>::build(&spec("cnn-res", &[3, 8, 8], 8, 4, &[]), HeadMode::Shared, 1, 1.0, &mut rng).unwrap();
    let mut plain = GatedNet::<f64>::build(&spec("cnn-small", &[3, 8, 8], 8, 4, &[]), HeadMode::Shared, 1, 1.0, &mut rng).unwrap();
    let mut res = res;
    // residual slots per stage: stage conv, first block conv, second block conv
    for slot in [2, 5, 8] {
        let r = res.params.slots[slot].range();
        res.params.values[r].fill(0.0);
    }
    for (p, r) in [(0, 0), (1, 3), (2, 6), (3, 9), (4, 10)] {
        let src = res.params.slot_values(r).to_vec();
        let dst = plain.params.slots[p].range();
        plain.params.values[dst].copy_from_slice(&src);
    }
    let x = random(vec![2, 3, 8, 8], &mut rng);
    let classes = [0, 1, 2, 3];
    let a = res.logits(&x, &eval_query(&GateView::full(res.weight_count()), 0, &classes)).unwrap();
    let b = plain.logits(&x, &eval_query(&GateView::full(plain.weight_count()), 0, &classes)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn batch_norm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, hw) = (5, 3, 4);
    let x = random(vec![n, c, 2, 2], &mut rng);
    let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let eps = 1e-5;
    let mut g = Graph::<f64>::new();
    let xn = g.constant(x.clone());
    let gn = g.constant(Tensor::new(vec![c], gamma.clone()).unwrap());
    let bn = g.constant(Tensor::new(vec![c], beta.clone()).unwrap());
    let y = g.batch_norm_train(xn, gn, bn, eps).unwrap();
    let y = g.value(y).data().to_vec();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| (0..hw).map(move |k| (i, k)))
            .map(|(i, k)| x.data()[(i * c + ch) * hw + k])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for i in 0..n {
            for k in 0..hw {
                let at = (i * c + ch) * hw + k;
                let want = gamma[ch] * (x.data()[at] - mean) / (var + eps).sqrt() + beta[ch];
                assert!((y[at] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn zero_gamma_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(vec![4, 2, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let xn = g.constant(x);
    let gn = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let bn = g.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
    let y = g.batch_norm_train(xn, gn, bn, 1e-5).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, if (i / 9) % 2 == 0 { 0.25 } else { -1.5 });
    }
}

#[test]
fn normalized_batch_passes_through_unit_affine() {
    // already zero-mean, unit-variance per channel
    let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xn = g.constant(x.clone());
    let gn = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
    let bn = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
    let y = g.batch_norm_train(xn, gn, bn, 1e-5).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn per_task_head_rows_follow_class_registration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = GatedNet::<f32>::build(&spec("mlp", &[6], 4, 6, &[]), HeadMode::PerTask, 3, 1.0 / 3.0, &mut rng).unwrap();
    net.register_task(&[4, 1]).unwrap();
    net.register_task(&[0, 5]).unwrap();
    let off = net.params.slots[net.head_slot()].offset;
    let owners = net.mask.owners();
    for (c, want) in [(4, 0), (1, 0), (0, 1), (5, 1)] {
        assert!(owners[off + c * 4..off + c * 4 + 4].iter().all(|&o| o == want));
    }
    assert!(net.register_task(&[9]).is_err());
}

#[test]
fn bank_training_selects_disjoint_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = GatedNet::<f32>::build(&spec("cnn-small", &[3, 8, 8], 8, 4, &[]), HeadMode::Shared, 1, 1.0, &mut rng).unwrap();
    let bias = net.bank_trainable(BankTraining { bias: true, norm: false });
    let norm = net.bank_trainable(BankTraining { bias: false, norm: true });
    assert!(bias.iter().zip(&norm).all(|(a, b)| !(a & b)));
    assert!(bias.iter().zip(&norm).all(|(a, b)| a | b));
    assert!(net.bank_trainable(BankTraining::NONE).iter().all(|&b| !b));
}
