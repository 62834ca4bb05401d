mod common;

use common::clusters;
use nvrm::analysis::{kl_gaussian, robustness_sweep};
use nvrm::continual::{run_task_sequence, ContinualConfig, EwcAnchor, EwcConfig, TaskSpec};
use nvrm::data::{Corruption, Dataset};
use nvrm::model::{Fcn, FcnConfig};
use nvrm::optim::NoiseSpec;
use nvrm::tensor::{ParameterSet, Tensor};
use nvrm::train::{
    evaluate, rng_for, run_training, train_epoch, AnyOptimizer, OptimizerConfig, OptimizerKind, TrainConfig,
};
use nvrm::Real;
use proptest::prelude::*;

#[test]
fn one_small_step_on_two_separable_points_lowers_the_loss() {
    let model = Fcn::new(FcnConfig::new(vec![2, 8, 2], 1)).unwrap();
    let x = Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, -0.5]).unwrap();
    let y = [0, 1];
    let mut checked = 0;
    for seed in 0..20 {
        let mut p: ParameterSet<f64> = model.init(&mut rng_for(seed, 0));
        let pass = model.forward_loss(&p, &x, &y, 0).unwrap();
        let before = pass.loss;
        let g = pass.backward().unwrap();
        let norm: f64 = (0..g.len()).filter_map(|i| g.get(i)).flat_map(|t| t.data()).map(|v| v * v).sum();
        if norm == 0.0 {
            continue;
        }
        let mut opt = AnyOptimizer::build(&OptimizerConfig::new(OptimizerKind::Sgd, 1e-3), seed).unwrap();
        opt.prepare(&p).unwrap();
        opt.step(&mut p, &g).unwrap();
        let after = model.forward_loss(&p, &x, &y, 0).unwrap().loss;
        assert!(after < before, "seed {seed}: {before} -> {after}");
        checked += 1;
    }
    assert!(checked >= 15);
}

fn head_params(p: &ParameterSet<f64>, head: usize) -> Vec<Vec<f64>> {
    let prefix = Fcn::head_prefix(head);
    p.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn training_one_head_never_moves_another() {
    let data = clusters(256, 6, 3, 0.5, 1);
    let model = Fcn::new(FcnConfig::new(vec![6, 10, 3], 3)).unwrap();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam, OptimizerKind::NvrmAdam] {
        let mut p: ParameterSet<f64> = model.init(&mut rng_for(4, 0));
        let before: Vec<_> = [0, 2].iter().map(|&h| head_params(&p, h)).collect();
        let config = OptimizerConfig::new(kind, 0.01).momentum(0.0).noise(NoiseSpec::gaussian(0.05));
        let mut opt = AnyOptimizer::build(&config, 4).unwrap();
        train_epoch(&model, &mut p, &mut opt, &data, 1, 32, &[], &mut rng_for(4, 1)).unwrap();
        opt.finalize(&mut p).unwrap();
        let after: Vec<_> = [0, 2].iter().map(|&h| head_params(&p, h)).collect();
        assert_eq!(before, after, "{kind:?}");
    }
}

fn split_config(b: f64) -> ContinualConfig {
    ContinualConfig {
        model: FcnConfig::new(vec![8, 16, 2], 3),
        optimizer: OptimizerConfig::new(OptimizerKind::NvrmAdam, 0.01).weight_decay(1e-2).noise(NoiseSpec::gaussian(b)),
        batch_size: 32,
        epochs_per_task: 2,
        tasks: TaskSpec::Split {
            groups: vec![vec![0, 1], vec![2, 3], vec![4, 5]],
        },
        ewc: None,
        fresh_optimizer_per_task: None,
        train_subset: None,
    }
}

#[test]
fn split_tasks_leave_other_heads_exactly_alone_even_with_decay_and_noise() {
    let data = clusters(600, 8, 6, 0.6, 2);
    let out = run_task_sequence(&split_config(0.05), &data, &data, 3, |_, _| {}).unwrap();
    let init: ParameterSet<f64> = Fcn::new(split_config(0.0).model).unwrap().init(&mut rng_for(3, 0));
    for (t, snap) in out.snapshots.iter().enumerate() {
        let prev = if t == 0 { &init } else { &out.snapshots[t - 1] };
        for h in (0..3).filter(|&h| h != t) {
            assert_eq!(head_params(prev, h), head_params(snap, h), "task {t} moved head {h}");
        }
        assert_ne!(head_params(prev, t), head_params(snap, t));
    }
}

fn permuted_config(kind: OptimizerKind, lambda: Option<f64>) -> ContinualConfig {
    ContinualConfig {
        model: FcnConfig::new(vec![12, 24, 4], 1),
        optimizer: OptimizerConfig::new(kind, 0.01).weight_decay(1e-4).noise(NoiseSpec::gaussian(0.03)),
        batch_size: 32,
        epochs_per_task: 2,
        tasks: TaskSpec::Permuted { num_tasks: 2 },
        ewc: lambda.map(|lambda| EwcConfig {
            lambda,
            fisher_samples: 256,
        }),
        fresh_optimizer_per_task: None,
        train_subset: None,
    }
}

#[test]
fn first_continual_stage_is_plain_single_task_training() {
    let train = clusters(480, 12, 4, 0.8, 5);
    let test = clusters(200, 12, 4, 0.8, 5);
    for kind in [OptimizerKind::Adam, OptimizerKind::NvrmAdam] {
        let cc = permuted_config(kind, None);
        let continual = run_task_sequence(&cc, &train, &test, 9, |_, _| {}).unwrap();
        let tc = TrainConfig {
            model: cc.model.clone(),
            optimizer: cc.optimizer,
            batch_size: cc.batch_size,
            epochs: cc.epochs_per_task,
            lr_decay_period: None,
            corruption: Corruption::None,
            train_subset: None,
        };
        let single = run_training(&tc, &train, &test, 9, |_| {}).unwrap();
        assert_eq!(continual.report.accuracy[0][0], single.epochs.last().unwrap().test_accuracy, "{kind:?}");
        assert!(continual.snapshots[0].bit_identical(&single.params), "{kind:?}");
    }
}

#[test]
fn stronger_ewc_keeps_weights_closer_to_the_first_task() {
    let train = clusters(480, 12, 4, 0.8, 6);
    let distance = |lambda: f64| {
        let out = run_task_sequence(&permuted_config(OptimizerKind::Adam, Some(lambda)), &train, &train, 2, |_, _| {})
            .unwrap();
        let (a, b) = (out.snapshots[0].flatten(), out.snapshots[1].flatten());
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let d: Vec<f64> = [0.0, 300.0, 1000.0].into_iter().map(distance).collect();
    assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
}

fn tiny_net(seed: u64) -> (Fcn, ParameterSet<f64>, Dataset<f64>) {
    let model = Fcn::new(FcnConfig::new(vec![5, 7, 3], 1)).unwrap();
    let p = model.init(&mut rng_for(seed, 0));
    (model, p, clusters(60, 5, 3, 1.0, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ewc_penalty_never_lowers_the_loss(seed in any::<u64>(), lambda in 0.0f64..1e4, base in 0.0f64..5.0) {
        let (_, anchor_params, _) = tiny_net(seed);
        let (_, p, _) = tiny_net(seed.wrapping_add(1));
        let mut rng = rng_for(seed, 3);
        let fisher: Vec<Vec<f64>> = anchor_params
            .tensors()
            .iter()
            .map(|t| (0..t.len()).map(|_| f64::standard_normal(&mut rng).abs()).collect())
            .collect();
        let anchor = EwcAnchor::new(&anchor_params, fisher, lambda).unwrap();
        prop_assert!(anchor.penalty(&p) >= 0.0);
        prop_assert!(nvrm::continual::ewc_loss(base, &p, &[anchor]) >= base);
    }

    #[test]
    fn robustness_sweep_only_reads_the_weights(seed in any::<u64>(), trials in 1usize..4) {
        let (model, p, data) = tiny_net(seed);
        let before = p.clone();
        let curve = robustness_sweep(&model, &p, &data, 0, &[0.0, 0.1, 1.0], trials, &mut rng_for(seed, 6)).unwrap();
        prop_assert!(p.bit_identical(&before));
        let clean = evaluate(&model, &p, &data, 0).unwrap().accuracy;
        prop_assert!(curve.points[0].accuracies.iter().all(|&a| a == clean));
    }

    #[test]
    fn corruption_touches_labels_only_and_is_seeded(seed in any::<u64>(), rate in 0.0f64..=1.0, asym in any::<bool>()) {
        let data = clusters(120, 4, 10, 1.0, 8);
        let c = if asym { Corruption::Asymmetric { rate } } else { Corruption::Symmetric { rate } };
        let (labels, mask) = c.apply(data.labels(), 10, &mut rng_for(seed, 3)).unwrap();
        let (again, mask_again) = c.apply(data.labels(), 10, &mut rng_for(seed, 3)).unwrap();
        prop_assert_eq!(&labels, &again);
        prop_assert_eq!(&mask, &mask_again);
        let noisy = data.with_labels(labels.clone()).unwrap();
        prop_assert!(noisy.images().data().iter().zip(data.images().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        for ((&new, &old), &flipped) in labels.iter().zip(data.labels()).zip(&mask) {
            prop_assert_eq!(flipped, new != old);
            if asym && flipped {
                prop_assert_eq!(new, (old + 1) % 10);
            }
        }
    }

    #[test]
    fn kl_is_smallest_at_b_equal_sigma(seed in any::<u64>(), sigma in 0.01f64..10.0) {
        let (_, p, _) = tiny_net(seed);
        let theta = p.flatten();
        let at = |b: f64| kl_gaussian(theta.iter().copied(), b, sigma).unwrap();
        let best = at(sigma);
        for k in 1..40 {
            let b = sigma * k as f64 / 20.0;
            prop_assert!(at(b) >= best - 1e-9 * best.abs().max(1.0), "b {b}");
        }
    }
}
