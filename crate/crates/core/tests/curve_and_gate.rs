mod common;

use common::*;
use modelab::analysis::{barrier, scan_path};
use modelab::ensemble::{
    make_division, sigmoid, train_gate, GateTrainConfig, Strategy, DEFAULT_GATE_LR_GRID,
};
use modelab::nn::{train, Activation, Classifier, ModelSpec, TrainConfig, Tuning};
use modelab::params::bezier_point;
use modelab::paths::{train_bezier_control, CurveTrainConfig, PathSpec};

/// E_α ‖φ_c(α)‖² for the bowl, by composite Simpson over 200 intervals.
fn expected_curve_loss(bowl: &Bowl, a: &[f64], c: &[f64], b: &[f64]) -> f64 {
    let n = 200;
    let mut total = 0.0;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let w: Vec<f64> = (0..a.len())
            .map(|k| (1.0 - t).powi(2) * a[k] + 2.0 * t * (1.0 - t) * c[k] + t * t * b[k])
            .collect();
        let weight = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += weight * bowl.value(&w);
    }
    total / (3.0 * n as f64)
}

#[test]
fn bowl_curve_bends_toward_the_minimum() {
    let bowl = Bowl::new(vec![0.0, 0.0]);
    let (a, b) = ([-1.0, 1.0], [1.0, 1.0]);

    // Oracle: dense grid over the control point.
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for i in -300..=300 {
        for j in -300..=300 {
            let c = [i as f64 * 0.01, j as f64 * 0.01];
            let v = expected_curve_loss(&bowl, &a, &c, &b);
            if v < best.0 {
                best = (v, c);
            }
        }
    }

    let config = CurveTrainConfig {
        learning_rate: 0.01,
        batch_size: 1,
        max_steps: 3000,
        eval_every: 50,
        eval_alphas: (1..20).map(|i| i as f64 / 20.0).collect(),
        seed: 4,
        ..CurveTrainConfig::default()
    };
    let samples = dummy_samples(4);
    let res = train_bezier_control(
        &bowl,
        &bowl.point(&a),
        &bowl.point(&b),
        &samples,
        &samples,
        &config,
    )
    .unwrap();
    let c = res.control.values();
    let trained = expected_curve_loss(&bowl, &a, c, &b);
    let linear = expected_curve_loss(&bowl, &a, &[0.0, 1.0], &b);

    assert!(c[1] < 1.0, "control {c:?} did not bend");
    assert!(trained < linear);
    assert!(
        (c[0] - best.1[0]).abs() < 0.1 && (c[1] - best.1[1]).abs() < 0.1,
        "{c:?} vs grid optimum {:?}",
        best.1
    );
    assert!(
        trained <= best.0 * 1.02,
        "{trained} vs grid optimum {}",
        best.0
    );

    let n = res.history.len() / 10;
    let head: f64 = res.history[..n].iter().map(|s| s.loss).sum::<f64>() / n as f64;
    let tail: f64 = res.history[res.history.len() - n..]
        .iter()
        .map(|s| s.loss)
        .sum::<f64>()
        / n as f64;
    assert!(tail <= head);
}

#[test]
fn curve_between_identical_endpoints_stays_in_the_minimum() {
    let model = Classifier::new(
        ModelSpec {
            input_dim: 8,
            hidden_dims: vec![16],
            num_classes: 4,
            activation: Activation::Relu,
            adapter: None,
        },
        Tuning::Full,
    )
    .unwrap();
    let data = blobs(400, 1);
    let cfg = TrainConfig {
        max_steps: 1500,
        ..TrainConfig::default()
    };
    let a = train(&model, &cfg, &data, &model.init_params(0), None)
        .unwrap()
        .final_params()
        .clone();
    let config = CurveTrainConfig {
        max_steps: 300,
        ..CurveTrainConfig::default()
    };
    let res = train_bezier_control(&model, &a, &a, &data.samples, &data.samples, &config).unwrap();
    let path = PathSpec::bezier(a.clone(), res.control.clone(), a.clone()).unwrap();
    let scan = scan_path(&model, &path, &[&data], 24).unwrap();
    assert!(barrier(&scan, &data.name).unwrap().max_barrier <= 1e-6);
    assert_eq!(bezier_point(&a, &res.control, &a, 0.0).unwrap(), a);
}

#[test]
fn one_group_gate_finds_the_golden_section_ratio() {
    let a = vec![1.0, -2.0, 0.5];
    let b = vec![-1.0, 3.0, 2.5];
    let center: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.75 * x + 0.25 * y).collect();
    let bowl = Bowl::new(center);
    let mix = |r: f64| -> Vec<f64> {
        a.iter()
            .zip(&b)
            .map(|(x, y)| r * x + (1.0 - r) * y)
            .collect()
    };
    let oracle = golden_section(|r| bowl.value(&mix(r)), 0.0, 1.0, 1e-10);
    assert!((oracle - 0.75).abs() < 1e-6);

    let division = make_division(&bowl.layout, Strategy::Matrix);
    assert_eq!(division.len(), 1);
    let samples = dummy_samples(8);
    let res = train_gate(
        &bowl,
        &bowl.point(&a),
        &bowl.point(&b),
        &samples,
        &samples,
        &division,
        &DEFAULT_GATE_LR_GRID,
        &GateTrainConfig {
            max_steps: 2000,
            ..GateTrainConfig::default()
        },
    )
    .unwrap();
    let ratio = sigmoid(res.gate.logits[0]);
    assert!(
        (ratio - oracle).abs() < 0.01,
        "trained ratio {ratio} vs oracle {oracle}"
    );
}
