//! Connecting paths between two endpoints and the Bezier control-point trainer.
//!
//! Curve finding minimizes `E_{α~U(0,1)} L(φ_θ(α))` over the control point θ
//! only. For a fixed α, `∂φ_θ(α)/∂θ = 2α(1−α)`, so the control gradient is the
//! loss gradient at `φ_θ(α)` scaled by that factor.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Optimizer, OptimizerKind};
use crate::objective::{Objective, PointMetrics};
use crate::params::{bezier_point, bezier_weights, linear_interpolate, midpoint, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Linear,
    Bezier,
}

impl std::fmt::Display for PathKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PathKind::Linear => "linear",
            PathKind::Bezier => "bezier",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathSpec {
    Linear {
        a: ParamVector,
        b: ParamVector,
    },
    Bezier {
        a: ParamVector,
        control: ParamVector,
        b: ParamVector,
    },
}

impl PathSpec {
    pub fn linear(a: ParamVector, b: ParamVector) -> Result<Self> {
        a.ensure_same_layout(&b)?;
        Ok(PathSpec::Linear { a, b })
    }

    pub fn bezier(a: ParamVector, control: ParamVector, b: ParamVector) -> Result<Self> {
        a.ensure_same_layout(&control)?;
        a.ensure_same_layout(&b)?;
        Ok(PathSpec::Bezier { a, control, b })
    }

    pub fn kind(&self) -> PathKind {
        match self {
            PathSpec::Linear { .. } => PathKind::Linear,
            PathSpec::Bezier { .. } => PathKind::Bezier,
        }
    }

    pub fn start(&self) -> &ParamVector {
        match self {
            PathSpec::Linear { a, .. } | PathSpec::Bezier { a, .. } => a,
        }
    }

    pub fn end(&self) -> &ParamVector {
        match self {
            PathSpec::Linear { b, .. } | PathSpec::Bezier { b, .. } => b,
        }
    }

    pub fn point_at(&self, alpha: f64) -> Result<ParamVector> {
        match self {
            PathSpec::Linear { a, b } => linear_interpolate(a, b, alpha),
            PathSpec::Bezier { a, control, b } => bezier_point(a, control, b, alpha),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub eval_alphas: Vec<f64>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for CurveTrainConfig {
    fn default() -> Self {
        CurveTrainConfig {
            learning_rate: 0.005,
            batch_size: 32,
            max_steps: 2000,
            eval_every: 100,
            eval_alphas: vec![0.25, 0.5, 0.75],
            seed: 0,
            optimizer: OptimizerKind::AdamwStyle,
        }
    }
}

impl CurveTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("curve learning_rate must be finite and > 0"));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "curve batch_size, max_steps and eval_every must be >= 1",
            ));
        }
        if self.eval_alphas.is_empty() || self.eval_alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::config(
                "eval_alphas must be a non-empty subset of (0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveStep {
    pub step: usize,
    pub alpha: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveEval {
    pub step: usize,
    /// One entry per `eval_alphas` value, in order.
    pub points: Vec<PointMetrics>,
}

impl CurveEval {
    pub fn mean_loss(&self) -> f64 {
        self.points.iter().map(|p| p.loss).sum::<f64>() / self.points.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct CurveResult {
    /// Control point with the lowest mean dev loss over the trace.
    pub control: ParamVector,
    pub best_step: usize,
    pub final_control: ParamVector,
    pub history: Vec<CurveStep>,
    pub dev_trace: Vec<CurveEval>,
    pub eval_alphas: Vec<f64>,
}

impl CurveResult {
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "alpha", "loss"])?;
        for h in &self.history {
            w.write_record([h.step.to_string(), h.alpha.to_string(), h.loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loss at `φ_θ(α)` and the gradient with respect to the control point.
pub fn bezier_control_gradient<O: Objective>(
    objective: &O,
    a: &ParamVector,
    control: &ParamVector,
    b: &ParamVector,
    alpha: f64,
    batch: &[&Sample],
) -> Result<(f64, Vec<f64>)> {
    let point = bezier_point(a, control, b, alpha)?;
    let (loss, mut grad) = objective.loss_and_grad(&point, batch)?;
    let factor = bezier_weights(alpha)[1];
    grad.iter_mut().for_each(|g| *g *= factor);
    Ok((loss, grad))
}

/// Trains the control point of a quadratic Bezier curve between frozen
/// endpoints, starting from their midpoint.
///
/// Each step draws one α ~ U(0, 1) and one mini-batch. The dev set is
/// evaluated at step 0, every `eval_every` steps, and at the last step.
pub fn train_bezier_control<O: Objective>(
    objective: &O,
    a: &ParamVector,
    b: &ParamVector,
    train: &[Sample],
    dev: &[Sample],
    config: &CurveTrainConfig,
) -> Result<CurveResult> {
    config.validate()?;
    a.ensure_same_layout(b)?;
    for seg in a.layout().frozen_segments() {
        if a.values()[seg.range()] != b.values()[seg.range()] {
            return Err(Error::structure(format!(
                "frozen segment `{}` differs between the endpoints",
                seg.name
            )));
        }
    }

    let mut control = midpoint(a, b)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, 0.0, a.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut batch: Vec<&Sample> = Vec::with_capacity(config.batch_size);

    let evaluate = |control: &ParamVector, step: usize| -> Result<CurveEval> {
        let points = config
            .eval_alphas
            .par_iter()
            .map(|&alpha| {
                let p = bezier_point(a, control, b, alpha)?;
                objective.evaluate(&p, dev).map_err(|e| Error::AtAlpha {
                    alpha,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CurveEval { step, points })
    };

    let mut history = Vec::with_capacity(config.max_steps);
    let mut dev_trace = vec![evaluate(&control, 0)?];
    let mut best = (dev_trace[0].mean_loss(), 0usize, control.clone());

    for step in 1..=config.max_steps {
        batch.clear();
        if !train.is_empty() {
            while batch.len() < config.batch_size.min(train.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&train[order[cursor]]);
                cursor += 1;
            }
        }
        let alpha: f64 = rng.random();
        let (loss, grad) = bezier_control_gradient(objective, a, &control, b, alpha, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericFailure {
                step,
                context: format!("curve loss {loss} at alpha {alpha}"),
            });
        }
        history.push(CurveStep { step, alpha, loss });
        optimizer.step(control.values_mut(), &grad);
        if !control.is_finite() {
            return Err(Error::NumericFailure {
                step,
                context: "control point diverged".into(),
            });
        }
        if step % config.eval_every == 0 || step == config.max_steps {
            let eval = evaluate(&control, step)?;
            let mean = eval.mean_loss();
            if mean < best.0 {
                best = (mean, step, control.clone());
            }
            dev_trace.push(eval);
        }
    }

    Ok(CurveResult {
        control: best.2,
        best_step: best.1,
        final_control: control,
        history,
        dev_trace,
        eval_alphas: config.eval_alphas.clone(),
    })
}
