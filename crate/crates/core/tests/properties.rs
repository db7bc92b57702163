use mind_core::checkpoint::Checkpoint;
use mind_core::inference::{compute_metrics, PredictionRecord};
use mind_core::mask::{gate_gradients, quota, GateView, MaskedLayer, TaskMask, FREE};
use mind_core::optim::{AdamW, AdamWParams};
use mind_core::scenarios::read_dataset;
use mind_core::tensor::{DistillKind, Graph, Tensor};
use proptest::prelude::*;

fn layers(sizes: &[usize]) -> Vec<MaskedLayer> {
    let mut off = 0;
    sizes
        .iter()
        .map(|&len| {
            let l = MaskedLayer {
                offset: off,
                len,
                policy: true,
            };
            off += len;
            l
        })
        .collect()
}

fn distill(a: &[f64], b: &[f64], kind: DistillKind) -> f64 {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(vec![1, a.len()], a.to_vec()).unwrap());
    let t = g.constant(Tensor::new(vec![1, b.len()], b.to_vec()).unwrap());
    let d = g.distill(s, t, kind, 1.0).unwrap();
    g.value(d).data()[0]
}

fn logit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|c| (prop::collection::vec(-30.0f64..30.0, c), prop::collection::vec(-30.0f64..30.0, c)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ownership_partitions_every_layer(
        // rounding half up can exhaust layers smaller than n(n-1)/2
        sizes in prop::collection::vec(15usize..120, 1..4),
        n_tasks in 1usize..7,
        policies in prop::collection::vec(any::<bool>(), 7),
        seed in any::<u64>(),
        values in prop::collection::vec(-1.0f32..1.0, 360),
    ) {
        let fraction = 1.0 / n_tasks as f64;
        let mut m = TaskMask::new(layers(&sizes), n_tasks, fraction).unwrap();
        let mut previous = m.owners().to_vec();
        let mut active_before = vec![false; previous.len()];
        for t in 0..n_tasks {
            if policies[t] {
                m.select_random(t, fraction, seed ^ t as u64).unwrap();
            } else {
                m.select_mip(&values[..previous.len()], t, fraction).unwrap();
            }
            // write-once
            for (a, b) in previous.iter().zip(m.owners()) {
                prop_assert!(*a == FREE || a == b);
            }
            previous = m.owners().to_vec();
            for (i, &len) in sizes.iter().enumerate() {
                if t + 1 < n_tasks {
                    prop_assert_eq!(m.owned_count(i, t), quota(len, fraction));
                }
                let total: usize = (0..=t).map(|k| m.owned_count(i, k)).sum();
                prop_assert!(total <= len);
            }
            let view = GateView::task(&m, t, true);
            for i in 0..view.len() {
                prop_assert!(!view.trainable[i] || view.active[i]);
                prop_assert!(!active_before[i] || view.active[i]);
            }
            active_before = view.active.clone();
        }
        for i in 0..sizes.len() {
            prop_assert_eq!(m.free_count(i), 0);
        }
    }

    #[test]
    fn mip_matches_sort_oracle(values in prop::collection::vec(-4i32..4, 1..80), fraction in 0.05f64..0.5) {
        // small integer values force plenty of magnitude ties
        let vals: Vec<f64> = values.iter().map(|&v| v as f64 * 0.25).collect();
        let mut m = TaskMask::new(layers(&[vals.len()]), 2, fraction).unwrap();
        m.select_mip(&vals, 0, fraction).unwrap();
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[b].abs().partial_cmp(&vals[a].abs()).unwrap().then(a.cmp(&b)));
        let mut want: Vec<usize> = order[..quota(vals.len(), fraction)].to_vec();
        want.sort_unstable();
        let got: Vec<usize> = (0..vals.len()).filter(|&i| m.owners()[i] == 0).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn step_changes_only_trainable_weights(
        n in 1usize..200,
        seed in any::<u64>(),
        grads in prop::collection::vec(-2.0f32..2.0, 200),
        wd in prop_oneof![Just(0.0), 0.0f64..0.1],
    ) {
        let mut m = TaskMask::new(layers(&[n]), 3, 0.3).unwrap();
        m.select_random(0, 0.3, seed).unwrap();
        m.select_random(1, 0.3, seed.wrapping_add(1)).unwrap();
        let view = GateView::task(&m, 1, true);
        let mut g = grads[..n].to_vec();
        gate_gradients(&mut g, &view);
        let before: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - 0.5).collect();
        let mut after = before.clone();
        let mut opt = AdamW::new(n, AdamWParams { weight_decay: wd, ..AdamWParams::default() });
        opt.step(&mut after, &g, Some(&view.trainable), 0.05);
        for i in 0..n {
            if !view.trainable[i] {
                prop_assert_eq!(after[i].to_bits(), before[i].to_bits());
            }
        }
    }

    #[test]
    fn distillation_is_symmetric_nonnegative_and_zero_on_equal((a, b) in logit_pair()) {
        for kind in [DistillKind::SymmetricKl, DistillKind::JensenShannon] {
            let ab = distill(&a, &b, kind);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab.to_bits(), distill(&b, &a, kind).to_bits());
            prop_assert_eq!(distill(&a, &a, kind), 0.0);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        recs in prop::collection::vec((0usize..6, 0usize..6, 0usize..6), 1..60),
    ) {
        // three tasks of two classes each
        let records: Vec<PredictionRecord> = recs
            .iter()
            .map(|&(chosen, aware, label)| PredictionRecord {
                log_probs: vec![],
                chosen: (chosen / 2, chosen),
                aware: label / 2 * 2 + aware % 2,
                label,
                task: label / 2,
            })
            .collect();
        let m = compute_metrics(&records, 6, 3);
        prop_assert!((0.0..=1.0).contains(&m.acc_tag));
        prop_assert!((0.0..=1.0).contains(&m.acc_taw));
        let all_right = records.iter().all(|r| r.chosen.1 == r.label);
        if all_right {
            prop_assert_eq!(m.acc_tag, 1.0);
        }
    }

    #[test]
    fn corrupt_files_are_errors_not_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        prop_assert!(Checkpoint::read(&bytes[..]).is_err());
        let _ = read_dataset(&bytes[..]);
    }
}
