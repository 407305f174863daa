mod common;

use common::*;
use modelab::analysis::{
    barrier, compute_cartography, cross_task_scan, knowledge_trace, scan_path,
};
use modelab::data::{gen_task, GenArgs, TaskKind};
use modelab::nn::{train, Activation, Classifier, ModelSpec, TrainConfig, Tuning};
use modelab::params::{linear_interpolate, make_alpha_grid, ParamVector};
use modelab::paths::PathSpec;
use modelab::Objective;
use rand::Rng;

fn blobs_model() -> Classifier {
    Classifier::new(
        ModelSpec {
            input_dim: 8,
            hidden_dims: vec![16],
            num_classes: 4,
            activation: Activation::Relu,
            adapter: None,
        },
        Tuning::Full,
    )
    .unwrap()
}

fn trained_pair(
    model: &Classifier,
    a_data: &modelab::data::Dataset,
    b_data: &modelab::data::Dataset,
) -> (ParamVector, ParamVector, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let init = model.init_params(3);
    let cfg = TrainConfig {
        max_steps: 400,
        checkpoint_every: 100,
        ..TrainConfig::default()
    };
    let cfg_b = TrainConfig {
        data_order_seed: 1,
        ..cfg.clone()
    };
    let a = train(model, &cfg, a_data, &init, None).unwrap();
    let b = train(model, &cfg_b, b_data, &init, None).unwrap();
    (
        a.final_params().clone(),
        b.final_params().clone(),
        a.per_epoch_true_probs,
        b.per_epoch_true_probs,
    )
}

#[test]
fn scan_matches_naive_reevaluation() {
    let model = blobs_model();
    let train_set = blobs(400, 1);
    let test = blobs(300, 2).with_name("test");
    let (a, b, _, _) = trained_pair(&model, &train_set, &train_set);
    let path = PathSpec::linear(a.clone(), b.clone()).unwrap();
    let scan = scan_path(&model, &path, &[&test], 24).unwrap();
    let curve = scan.curve("test").unwrap();
    assert_eq!(scan.alphas.len(), 26);
    for (i, &alpha) in scan.alphas.iter().enumerate() {
        assert_eq!(alpha, i as f64 / 25.0);
        let values: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
            .collect();
        let p = ParamVector::new(a.layout().clone(), values).unwrap();
        let (mut loss, mut correct) = (0.0, 0usize);
        for s in &test.samples {
            let (l, _, pred) =
                oracle_cross_entropy(&oracle_forward(model.spec(), &p, &s.features), s.label);
            loss += l;
            correct += usize::from(pred == s.label);
        }
        loss /= test.len() as f64;
        assert!(
            (curve.loss[i] - loss).abs() < 1e-12,
            "alpha {alpha}: {} vs {loss}",
            curve.loss[i]
        );
        assert!((curve.accuracy[i] - correct as f64 / test.len() as f64).abs() < 1e-12);
    }
    let direct = model.evaluate(&a, &test.samples).unwrap();
    assert_eq!(curve.loss[0], direct.loss);
    assert_eq!(curve.accuracy[0], direct.accuracy);

    let again = scan_path(&model, &path, &[&test], 24).unwrap();
    assert_eq!(again, scan);
}

#[test]
fn double_well_barrier_is_one_at_the_midpoint() {
    let well = DoubleWell::new();
    let path = PathSpec::linear(well.point(-1.0), well.point(1.0)).unwrap();
    let data = dummy_dataset("toy");
    let scan = scan_path(&well, &path, &[&data], 9).unwrap();
    assert!(scan.alphas.contains(&0.5));
    let b = barrier(&scan, "toy").unwrap();
    assert_eq!(b.max_barrier, 1.0);
    assert_eq!(b.argmax_alpha, 0.5);
}

#[test]
fn cartography_matches_brute_force() {
    let mut r = rng(8);
    for (epochs, n) in [(1, 5), (3, 40), (12, 200)] {
        let probs: Vec<Vec<f64>> = (0..epochs)
            .map(|_| (0..n).map(|_| r.random_range(0.0..=1.0)).collect())
            .collect();
        let rec = compute_cartography(&probs).unwrap();
        assert_eq!(rec.epochs, epochs);
        for i in 0..n {
            let (mu, sigma) = brute_cartography(&probs, i);
            assert!((rec.per_sample[i].confidence - mu).abs() < 1e-12);
            assert!((rec.per_sample[i].variability - sigma).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_scan_contracts() {
    let model = blobs_model();
    let source = blobs(400, 4);
    let (a, b, _, _) = trained_pair(&model, &source, &source);
    let path = PathSpec::linear(a.clone(), b).unwrap();

    let scan = cross_task_scan(&model, &path, &source, &source, 4).unwrap();
    assert_eq!(scan.curve("source").unwrap(), scan.curve("target").unwrap());
    let direct = model.evaluate(&a, &source.samples).unwrap();
    assert_eq!(scan.curve("source").unwrap().loss[0], direct.loss);

    // An endpoint that only ever saw a two-class task, scored on a balanced
    // four-class target, lands near chance.
    let mut moons_args = GenArgs::new(TaskKind::TwoMoons, 600, 5);
    moons_args.dim = 8;
    let moons = gen_task(&moons_args).unwrap();
    let (m, _, _, _) = trained_pair(&model, &moons, &moons);
    let target = blobs(2000, 6);
    let path = PathSpec::linear(m.clone(), m).unwrap();
    let scan = cross_task_scan(&model, &path, &moons, &target, 0).unwrap();
    let acc = scan.curve("target").unwrap().accuracy[0];
    assert!((acc - 0.25).abs() <= 0.10, "target accuracy {acc}");
}

#[test]
fn forgotten_samples_are_wrong_at_their_point() {
    let model = blobs_model();
    let mut src_args = GenArgs::new(TaskKind::GaussianBlobs, 500, 10);
    src_args.domain.noise_std = 1.2;
    let mut tgt_args = src_args.clone();
    tgt_args.seed = 11;
    tgt_args.domain.shift = vec![2.0, 0.0];
    tgt_args.domain.rotation = 0.6;
    let source = gen_task(&src_args).unwrap();
    let target = gen_task(&tgt_args).unwrap();
    let (a, b, probs_a, probs_b) = trained_pair(&model, &source, &target);
    let cs = compute_cartography(&probs_a).unwrap();
    let ct = compute_cartography(&probs_b).unwrap();
    let trace = knowledge_trace(&model, &a, &b, &source, &target, 6, &cs, &ct).unwrap();
    assert_eq!(trace.points.len(), 6);
    let grid = make_alpha_grid(4);
    let mut total_forgotten = 0;
    for (j, point) in trace.points.iter().enumerate() {
        assert_eq!(point.alpha, grid[j]);
        let phi = linear_interpolate(&a, &b, grid[j]).unwrap();
        let src = model.forward_loss(&phi, &source.samples).unwrap();
        let tgt = model.forward_loss(&phi, &target.samples).unwrap();
        for &i in &point.forgotten {
            assert!(
                !src.correct[i],
                "sample {i} is in F_{j} but correct at φ_{j}"
            );
        }
        for &i in &point.memorized {
            assert!(tgt.correct[i], "sample {i} is in M_{j} but wrong at φ_{j}");
        }
        total_forgotten += point.forgotten.len();
    }
    assert!(total_forgotten > 0);
    if trace.source_rememorized == 0 {
        assert!(total_forgotten <= trace.source_correct_at_start);
    }

    let same = knowledge_trace(&model, &a, &a, &source, &target, 6, &cs, &ct).unwrap();
    for p in &same.points[1..] {
        assert!(p.forgotten.is_empty() && p.memorized.is_empty());
        assert_eq!(p.mean_confidence_forgotten, None);
    }
}
