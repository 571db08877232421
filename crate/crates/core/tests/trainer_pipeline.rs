mod common;

use std::collections::BTreeSet;

use common::pipeline_fd;
use hostcp::dataset::{gen_synthetic, LabeledDataset};
use hostcp::tensor::{
    axpy_params, loss_and_grad, mlp_forward, softmax_cross_entropy, Layer, Matrix, MlpParams,
};
use hostcp::trainer::{
    embedder_input, extract_selection, lookahead, reverse_selection, run, select_forward,
    selected_loss, value, value_grad_phi, OldSet, TrainerConfig, TrainerState,
};

fn data(n: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
    gen_synthetic(n + 60, 4, seed).unwrap().split(60, seed).unwrap()
}

fn small_config() -> TrainerConfig {
    TrainerConfig {
        epochs: 2,
        k: 8,
        predictor_arch: vec![8],
        embedder_arch: vec![6, 4],
        ..TrainerConfig::default()
    }
}

fn linear(w: &[f64], b: &[f64], out: usize) -> MlpParams {
    let layer = Layer {
        weight: Matrix::from_vec(out, w.len() / out, w.to_vec()).unwrap(),
        bias: b.to_vec(),
    };
    MlpParams::new(vec![layer], hostcp::tensor::Activation::Relu).unwrap()
}

#[test]
fn value_gradient_matches_finite_differences_end_to_end() {
    let mut informative = 0;
    for seed in 0..20 {
        let c = pipeline_fd(seed, 1e-5);
        assert!(c.rel_err <= 1e-3, "seed {seed}: relative error {}", c.rel_err);
        if c.grad_norm > 1e-6 {
            informative += 1;
        }
    }
    assert!(informative >= 12, "only {informative} seeds had a nonzero gradient");
}

#[test]
fn selected_loss_examples() {
    let theta = linear(&[1.0, -1.0, 0.5, 2.0], &[0.1, -0.2], 2);
    let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
    let y = [1, 0];
    let (loss, grad) = selected_loss(&theta, &x, &y, &[0.0, 0.0], 0.5).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.to_flat().iter().all(|&g| g == 0.0));

    let (loss, _) = selected_loss(&theta, &x, &y, &[1.0, 0.0], 0.5).unwrap();
    let (logits, _) = mlp_forward(&theta, &x).unwrap();
    let l0 = softmax_cross_entropy(logits.row(0), 1).unwrap();
    assert!((loss - l0).abs() <= 1e-15);

    assert!(selected_loss(&theta, &x, &y, &[1.2, 0.0], 0.5).is_err());
    assert!(selected_loss(&theta, &x, &y, &[1.0], 0.5).is_err());
}

#[test]
fn lookahead_examples() {
    let theta = linear(&[1.0], &[1.0], 1);
    let grad = linear(&[2.0], &[2.0], 1);
    let hat = lookahead(&theta, &grad, 0.1).unwrap();
    for v in hat.to_flat() {
        assert!((v - 0.8).abs() <= 1e-15);
    }
    assert_eq!(theta.to_flat(), vec![1.0, 1.0]);
    assert_eq!(lookahead(&theta, &grad, 0.0).unwrap(), theta);
    assert_eq!(lookahead(&theta, &theta.zeros_like(), 0.3).unwrap(), theta);
}

#[test]
fn value_examples() {
    let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![3.0]]).unwrap();
    let uniform = linear(&[0.0, 0.0], &[0.0, 0.0], 2);
    let ds = LabeledDataset::new(x.clone(), vec![0, 1, 1], 2).unwrap();
    let (loss, _) = value(&uniform, &ds).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() <= 1e-15);

    // Logit of class 1 grows with x, class 0 shrinks: perfect on x > 0 labels.
    let sharp = linear(&[-10.0, 10.0], &[0.0, 0.0], 2);
    let labels: Vec<usize> = (0..3).map(|i| usize::from(x[(i, 0)] > 0.0)).collect();
    let ds = LabeledDataset::new(x.clone(), labels.clone(), 2).unwrap();
    let (loss, acc) = value(&sharp, &ds).unwrap();
    assert_eq!(acc, 1.0);
    let (logits, _) = mlp_forward(&sharp, &x).unwrap();
    let mean = (0..3).map(|i| softmax_cross_entropy(logits.row(i), labels[i]).unwrap()).sum::<f64>() / 3.0;
    assert!((loss - mean).abs() <= 1e-12);

    let empty = LabeledDataset::new(Matrix::zeros(0, 1), vec![], 2).unwrap();
    assert!(value(&sharp, &empty).is_err());
}

#[test]
fn pinned_selection_has_zero_value_gradient() {
    let (train, test) = data(40, 3);
    let cfg = small_config();
    let state = TrainerState::new(&train, &test, &cfg).unwrap();
    let ids = [5];
    let (x, y) = train.batch(&ids);
    let input = embedder_input(&train, &ids);
    let fwd = select_forward(&state.phi, &input, &Matrix::zeros(0, input.cols()), 0.2, 1e-2, 0.5).unwrap();
    let g = value_grad_phi(&state.theta, &state.phi, &fwd, &x, &y, &test, 2.0, 0.2).unwrap();
    assert!(g.grad.to_flat().iter().all(|&v| v == 0.0));
}

#[test]
fn full_selection_step_is_plain_sgd() {
    let (train, test) = data(40, 4);
    let cfg = TrainerConfig { gamma: 1.0, ..small_config() };
    let mut state = TrainerState::new(&train, &test, &cfg).unwrap();
    let theta0 = state.theta.clone();
    let ids: Vec<usize> = (0..5).collect();
    state.step(0, &ids).unwrap();
    let (x, y) = train.batch(&ids);
    let (_, g) = loss_and_grad(&theta0, &x, &y, &[0.2; 5]).unwrap();
    let expected = axpy_params(&theta0, &g, cfg.alpha / cfg.k as f64).unwrap();
    assert_eq!(state.theta, expected);
    assert_eq!(state.records[0].selected_ids, ids);
}

#[test]
fn single_minibatch_epoch_is_one_full_batch_step() {
    let (train, test) = data(30, 5);
    let cfg = TrainerConfig { gamma: 1.0, k: 1, epochs: 1, ..small_config() };
    let init = TrainerState::new(&train, &test, &cfg).unwrap().theta;
    let log = run(&train, &test, &cfg).unwrap();
    let w = vec![1.0 / 30.0; 30];
    let (_, g) = loss_and_grad(&init, train.features(), train.labels(), &w).unwrap();
    let expected = axpy_params(&init, &g, cfg.alpha).unwrap();
    let diff = log.final_theta.to_flat().iter().zip(expected.to_flat()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    // Only the summation order over the batch differs.
    assert!(diff <= 1e-14, "max difference {diff}");
    assert_eq!(log.records.len(), 1);
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let (train, test) = data(30, 6);
    let cfg = TrainerConfig { epochs: 0, ..small_config() };
    let state = TrainerState::new(&train, &test, &cfg).unwrap();
    let log = run(&train, &test, &cfg).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(log.final_theta, state.theta);
    assert_eq!(log.final_phi, state.phi);
}

#[test]
fn frozen_embedder_stays_constant() {
    let (train, test) = data(60, 7);
    let cfg = TrainerConfig { beta: 0.0, ..small_config() };
    let init = TrainerState::new(&train, &test, &cfg).unwrap().phi;
    let log = run(&train, &test, &cfg).unwrap();
    assert_eq!(log.final_phi, init);
    assert_ne!(log.final_theta, TrainerState::new(&train, &test, &cfg).unwrap().theta);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (train, test) = data(60, 8);
    let cfg = small_config();
    let a = run(&train, &test, &cfg).unwrap();
    let b = run(&train, &test, &cfg).unwrap();
    assert_eq!(a.without_timings(), b.without_timings());
    assert_eq!(a.without_timings().to_json().unwrap(), b.without_timings().to_json().unwrap());
    let c = run(&train, &test, &TrainerConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.final_theta, c.final_theta);
}

#[test]
fn log_round_trips_through_json() {
    let (train, test) = data(40, 9);
    let log = run(&train, &test, &small_config()).unwrap();
    let back = hostcp::trainer::TrainLog::from_json(&log.to_json().unwrap()).unwrap();
    assert_eq!(back, log);
}

#[test]
fn selections_respect_the_budget() {
    let ds = gen_synthetic(500 + 100, 10, 11).unwrap();
    let (train, test) = ds.split(100, 11).unwrap();
    let cfg = TrainerConfig { gamma: 0.2, epochs: 3, k: 20, ..TrainerConfig::default() };
    let log = run(&train, &test, &cfg).unwrap();
    for epoch in 0..3 {
        let mut ids = BTreeSet::new();
        for r in log.records.iter().filter(|r| r.epoch == epoch) {
            let budget = ((0.2 * r.batch_ids.len() as f64) + 0.5).floor().max(1.0) as usize;
            assert!(r.selected_ids.len() <= budget);
            assert!(r.selected_ids.iter().all(|id| r.batch_ids.contains(id)));
            ids.extend(r.selected_ids.iter().copied());
        }
        assert!(ids.len() as f64 <= 0.2 * 500.0 + cfg.k as f64, "epoch {epoch}: {}", ids.len());
    }
    let total: usize = log.records.iter().map(|r| r.selected_ids.len()).sum();
    assert_eq!(total, log.selection_counts.iter().sum::<usize>());
}

#[test]
fn extraction_partitions_and_contains_the_final_selection() {
    let (train, test) = data(80, 12);
    let cfg = TrainerConfig { gamma: 0.2, ..small_config() };
    let log = run(&train, &test, &cfg).unwrap();
    let n = train.n();
    assert_eq!(extract_selection(&log, 1.0).unwrap().len(), n);
    for fraction in [0.1, 0.2, 0.5, 0.9] {
        let top: BTreeSet<usize> = extract_selection(&log, fraction).unwrap().into_iter().collect();
        let rest: BTreeSet<usize> = reverse_selection(&log, fraction).unwrap().into_iter().collect();
        assert!(top.is_disjoint(&rest));
        assert_eq!(top.len() + rest.len(), n);
    }
    let last = cfg.epochs - 1;
    let hard: BTreeSet<usize> = log.records.iter().filter(|r| r.epoch == last).flat_map(|r| r.selected_ids.iter().copied()).collect();
    let top: BTreeSet<usize> = extract_selection(&log, 0.2).unwrap().into_iter().collect();
    assert!(hard.is_subset(&top));
    assert!(extract_selection(&log, 0.0).is_err());
}

#[test]
fn old_set_keeps_the_nearest_points_within_capacity() {
    let phi = linear(&[1.0], &[0.0], 1);
    let mut old = OldSet::new(2);
    for (id, v) in [(0, 5.0), (1, 0.5), (2, -0.5), (3, 9.0)] {
        old.insert(id, vec![v]);
    }
    assert_eq!(old.len(), 4);
    let h_new = Matrix::from_rows(&[vec![0.0]]).unwrap();
    old.enforce_capacity(&phi, &h_new).unwrap();
    assert_eq!(old.len(), 2);
    assert_eq!(old.source_ids, vec![1, 2]);

    // Equal distances: the more recent insertion survives.
    let mut old = OldSet::new(1);
    old.insert(7, vec![1.0]);
    old.insert(8, vec![-1.0]);
    old.enforce_capacity(&phi, &h_new).unwrap();
    assert_eq!(old.source_ids, vec![8]);

    // Re-inserting refreshes rather than duplicates.
    old.insert(8, vec![2.0]);
    assert_eq!(old.len(), 1);
    let (rows, pos) = old.rows_excluding(&[8], 1);
    assert_eq!((rows.rows(), pos.len()), (0, 0));
}

#[test]
fn training_never_exceeds_old_set_capacity() {
    let (train, test) = data(60, 13);
    let cfg = TrainerConfig { old_cap: 3, gamma: 0.5, ..small_config() };
    let mut state = TrainerState::new(&train, &test, &cfg).unwrap();
    for b in 0..6 {
        let ids: Vec<usize> = (b * 7..b * 7 + 7).collect();
        state.step(b, &ids).unwrap();
        assert!(state.old_set.len() <= 3);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, test) = data(20, 14);
    for cfg in [
        TrainerConfig { gamma: 0.0, ..small_config() },
        TrainerConfig { epsilon: 0.0, ..small_config() },
        TrainerConfig { xi: 1.5, ..small_config() },
        TrainerConfig { k: 0, ..small_config() },
        TrainerConfig { k: 100, ..small_config() },
        TrainerConfig { embedder_arch: vec![], ..small_config() },
    ] {
        assert!(matches!(TrainerState::new(&train, &test, &cfg), Err(hostcp::Error::Config(_))));
    }
}
