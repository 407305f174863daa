//! Helpers shared by the integration test targets. Everything here is written
//! without calling back into the code paths under test where an oracle is
//! meant to be independent.

#![allow(dead_code)]

use std::sync::Arc;

use modelab::data::{gen_task, Dataset, GenArgs, Sample, TaskKind};
use modelab::error::Result;
use modelab::nn::{Activation, AdapterSpec, Classifier, ModelSpec, Tuning};
use modelab::params::{ModuleKind, ParamLayout, ParamVector};
use modelab::{Objective, PointMetrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_spec(activation: Activation, adapter: bool) -> ModelSpec {
    ModelSpec {
        input_dim: 8,
        hidden_dims: vec![16, 8],
        num_classes: 4,
        activation,
        adapter: adapter.then_some(AdapterSpec { bottleneck_dim: 4 }),
    }
}

pub fn small_model(activation: Activation, tuning: Tuning) -> Classifier {
    Classifier::new(small_spec(activation, true), tuning).unwrap()
}

pub fn blobs(n: usize, seed: u64) -> Dataset {
    gen_task(&GenArgs::new(TaskKind::GaussianBlobs, n, seed)).unwrap()
}

/// Parameters with every entry (biases included) drawn from N(0, 0.5²), so
/// no gradient is structurally zero.
pub fn random_params(model: &Classifier, seed: u64) -> ParamVector {
    let mut r = rng(seed);
    let values = (0..model.layout().total_len())
        .map(|_| 0.5 * r.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    ParamVector::new(Arc::clone(model.layout()), values).unwrap()
}

pub fn random_vector(layout: &Arc<ParamLayout>, r: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    let values = (0..layout.total_len())
        .map(|_| scale * r.random_range(-1.0..1.0))
        .collect();
    ParamVector::new(Arc::clone(layout), values).unwrap()
}

/// Relative error with a small absolute floor so entries whose true gradient
/// is below finite-difference resolution do not dominate.
pub fn rel_err(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1e-6)
}

pub fn rel_err_exact(x: f64, y: f64) -> f64 {
    if x == y {
        0.0
    } else {
        (x - y).abs() / x.abs().max(y.abs())
    }
}

/// Central difference of `f` along coordinate `k` of `p`.
pub fn central_difference(
    p: &ParamVector,
    k: usize,
    h: f64,
    f: impl Fn(&ParamVector) -> f64,
) -> f64 {
    let mut plus = p.clone();
    plus.values_mut()[k] += h;
    let mut minus = p.clone();
    minus.values_mut()[k] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Straight-line re-implementation of the classifier's forward pass and
/// softmax cross-entropy, reading weights by segment name.
pub fn oracle_forward(spec: &ModelSpec, p: &ParamVector, x: &[f64]) -> Vec<f64> {
    let dense = |prefix: &str, input: &[f64]| -> Vec<f64> {
        let w = p.segment_values(&format!("{prefix}.weight")).unwrap();
        let b = p.segment_values(&format!("{prefix}.bias")).unwrap();
        (0..b.len())
            .map(|o| {
                let mut z = b[o];
                for i in 0..input.len() {
                    z += w[o * input.len() + i] * input[i];
                }
                z
            })
            .collect()
    };
    let act = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .map(|z| match spec.activation {
                Activation::Relu => {
                    if z > 0.0 {
                        z
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => z.tanh(),
            })
            .collect()
    };
    let mut h = x.to_vec();
    for l in 0..spec.hidden_dims.len() {
        h = act(dense(&format!("layer{l}.ff"), &h));
        if spec.adapter.is_some() {
            let mid = act(dense(&format!("layer{l}.adapter.down"), &h));
            let up = dense(&format!("layer{l}.adapter.up"), &mid);
            h = h.iter().zip(&up).map(|(a, b)| a + b).collect();
        }
    }
    dense("head", &h)
}

/// (−log p_true, p_true, predicted class) via log-sum-exp.
pub fn oracle_cross_entropy(logits: &[f64], label: usize) -> (f64, f64, usize) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut best = 0;
    for k in 1..logits.len() {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    (loss, (-loss).exp(), best)
}

/// A single tunable scalar `w` with loss `(w² − 1)²`, independent of data.
pub struct DoubleWell {
    pub layout: Arc<ParamLayout>,
}

impl DoubleWell {
    pub fn new() -> Self {
        let layout = ParamLayout::builder()
            .push("w", 1, 0, ModuleKind::Feedforward, 0, true)
            .build()
            .unwrap();
        DoubleWell {
            layout: Arc::new(layout),
        }
    }

    pub fn point(&self, w: f64) -> ParamVector {
        ParamVector::new(Arc::clone(&self.layout), vec![w]).unwrap()
    }
}

impl Objective for DoubleWell {
    fn loss_and_grad(&self, p: &ParamVector, _batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        let w = p.values()[0];
        Ok(((w * w - 1.0).powi(2), vec![4.0 * w * (w * w - 1.0)]))
    }

    fn evaluate(&self, p: &ParamVector, _samples: &[Sample]) -> Result<PointMetrics> {
        let w = p.values()[0];
        Ok(PointMetrics {
            loss: (w * w - 1.0).powi(2),
            accuracy: f64::NAN,
        })
    }
}

/// `‖w − center‖²` over a single tunable segment.
pub struct Bowl {
    pub layout: Arc<ParamLayout>,
    pub center: Vec<f64>,
}

impl Bowl {
    pub fn new(center: Vec<f64>) -> Self {
        let layout = ParamLayout::builder()
            .push("w", center.len(), 0, ModuleKind::Feedforward, 0, true)
            .build()
            .unwrap();
        Bowl {
            layout: Arc::new(layout),
            center,
        }
    }

    pub fn point(&self, w: &[f64]) -> ParamVector {
        ParamVector::new(Arc::clone(&self.layout), w.to_vec()).unwrap()
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.center)
            .map(|(x, c)| (x - c).powi(2))
            .sum()
    }
}

impl Objective for Bowl {
    fn loss_and_grad(&self, p: &ParamVector, _batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        let w = p.values();
        let grad = w
            .iter()
            .zip(&self.center)
            .map(|(x, c)| 2.0 * (x - c))
            .collect();
        Ok((self.value(w), grad))
    }

    fn evaluate(&self, p: &ParamVector, _samples: &[Sample]) -> Result<PointMetrics> {
        Ok(PointMetrics {
            loss: self.value(p.values()),
            accuracy: f64::NAN,
        })
    }
}

/// One placeholder sample for objectives that ignore their data.
pub fn dummy_samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            features: vec![0.0],
            label: 0,
            task_id: Arc::from("toy"),
        })
        .collect()
}

pub fn dummy_dataset(name: &str) -> Dataset {
    Dataset::new(name, dummy_samples(1), "toy", "toy").unwrap()
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    while hi - lo > tol {
        if f(c) < f(d) {
            hi = d;
        } else {
            lo = c;
        }
        c = hi - inv_phi * (hi - lo);
        d = lo + inv_phi * (hi - lo);
    }
    (lo + hi) / 2.0
}

/// Population mean and standard deviation by the textbook two-pass formula.
pub fn brute_cartography(probs: &[Vec<f64>], sample: usize) -> (f64, f64) {
    let e = probs.len() as f64;
    let mut sum = 0.0;
    for row in probs {
        sum += row[sample];
    }
    let mu = sum / e;
    let mut ss = 0.0;
    for row in probs {
        ss += (row[sample] - mu) * (row[sample] - mu);
    }
    (mu, (ss / e).sqrt())
}

/// Worst errors seen by one gradient check.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest relative error against a direct recomputation of the identity.
    pub max_exact: f64,
    /// Largest relative error against central differences.
    pub max_fd: f64,
    /// Frozen entries with a non-zero gradient.
    pub frozen_nonzero: usize,
}

pub const FD_STEP: f64 = 1e-5;

fn first_samples(data: &Dataset, n: usize) -> Vec<&Sample> {
    data.samples.iter().take(n).collect()
}

/// Analytic backward pass against central differences on every tunable entry.
pub fn model_gradient_check(model: &Classifier, seed: u64) -> GradCheck {
    let data = blobs(24, 100 + seed);
    let batch = first_samples(&data, 24);
    let p = random_params(model, seed);
    let (_, grad) = model.loss_and_grad(&p, &batch).unwrap();
    let mut out = GradCheck::default();
    for (k, tunable) in model.layout().tunable_mask().into_iter().enumerate() {
        if !tunable {
            out.frozen_nonzero += usize::from(grad[k] != 0.0);
            continue;
        }
        let fd = central_difference(&p, k, FD_STEP, |q| {
            model.forward_loss(q, &batch).unwrap().mean_loss
        });
        out.max_fd = out.max_fd.max(rel_err(grad[k], fd));
        out.checked += 1;
    }
    out
}

/// Control-point gradient against `2α(1−α)·∇L(φ(α))` and against central
/// differences on 60 random entries.
pub fn bezier_gradient_check(model: &Classifier, seed: u64) -> GradCheck {
    use modelab::params::bezier_point;
    use modelab::paths::bezier_control_gradient;

    let data = blobs(16, 5 + seed);
    let batch = first_samples(&data, 16);
    let pa = random_params(model, seed);
    let pb = random_params(model, seed + 50);
    let pc = random_params(model, seed + 100);
    let mut r = rng(seed);
    let alpha = r.random_range(0.05..0.95);
    let (loss, grad) = bezier_control_gradient(model, &pa, &pc, &pb, alpha, &batch).unwrap();

    let point = bezier_point(&pa, &pc, &pb, alpha).unwrap();
    let (direct_loss, point_grad) = model.loss_and_grad(&point, &batch).unwrap();
    let factor = 2.0 * alpha * (1.0 - alpha);
    let mut out = GradCheck {
        max_exact: rel_err_exact(loss, direct_loss),
        ..GradCheck::default()
    };
    for (g, pg) in grad.iter().zip(&point_grad) {
        out.max_exact = out.max_exact.max(rel_err_exact(*g, factor * pg));
    }
    let mask = model.layout().tunable_mask();
    for _ in 0..60 {
        let k = r.random_range(0..mask.len());
        if !mask[k] {
            out.frozen_nonzero += usize::from(grad[k] != 0.0);
            continue;
        }
        let fd = central_difference(&pc, k, FD_STEP, |c| {
            let q = bezier_point(&pa, c, &pb, alpha).unwrap();
            model.forward_loss(&q, &batch).unwrap().mean_loss
        });
        out.max_fd = out.max_fd.max(rel_err(grad[k], fd));
        out.checked += 1;
    }
    out
}

/// Logit gradient against `σ'(l)·Σ(a−b)·g` summed by hand and against
/// central differences in every logit.
pub fn gate_gradient_check(
    model: &Classifier,
    strategy: modelab::ensemble::Strategy,
    seed: u64,
) -> GradCheck {
    use modelab::ensemble::{
        gate_gradient, gate_loss_and_grad, gated_combine, make_division, GateVector,
    };

    let data = blobs(16, 9 + seed);
    let batch = first_samples(&data, 16);
    let division = make_division(model.layout(), strategy);
    let a = random_params(model, seed);
    let mut b = random_params(model, seed + 7);
    // Frozen entries agree at both endpoints in every experiment.
    for (k, tunable) in model.layout().tunable_mask().into_iter().enumerate() {
        if !tunable {
            b.values_mut()[k] = a.values()[k];
        }
    }
    let mut r = rng(seed);
    let logits: Vec<f64> = (0..division.len())
        .map(|_| r.random_range(-2.0..2.0))
        .collect();
    let gate = GateVector::new(division.clone(), logits.clone()).unwrap();

    let point = gated_combine(&a, &b, &gate).unwrap();
    let (_, g) = model.loss_and_grad(&point, &batch).unwrap();
    let lib = gate_gradient(&a, &b, &gate, &g).unwrap();
    let (_, through) = gate_loss_and_grad(model, &a, &b, &gate, &batch).unwrap();
    let mut out = GradCheck::default();
    for (i, group) in division.groups.iter().enumerate() {
        let s = 1.0 / (1.0 + (-logits[i]).exp());
        let mut inner = 0.0;
        for range in group.ranges() {
            for k in range.clone() {
                inner += (a.values()[k] - b.values()[k]) * g[k];
            }
        }
        let direct = s * (1.0 - s) * inner;
        out.max_exact = out
            .max_exact
            .max(rel_err_exact(lib[i], direct))
            .max(rel_err_exact(through[i], lib[i]));

        let loss_at = |delta: f64| {
            let mut l = logits.clone();
            l[i] += delta;
            let q = gated_combine(&a, &b, &GateVector::new(division.clone(), l).unwrap()).unwrap();
            model.forward_loss(&q, &batch).unwrap().mean_loss
        };
        let fd = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
        out.max_fd = out.max_fd.max(rel_err(lib[i], fd));
        out.checked += 1;
    }
    out
}
