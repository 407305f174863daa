use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Optimizer, OptimizerKind, Tuning};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Training knobs of one endpoint.
///
/// `seed` and `init_noise_std` describe how the initial vector was built (the
/// runner consumes them); `train` itself only reads the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_order_seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub init_noise_std: f64,
    pub tuning: Tuning,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data_order_seed: 0,
            learning_rate: 0.01,
            batch_size: 32,
            max_steps: 2000,
            checkpoint_every: 500,
            optimizer: OptimizerKind::AdamwStyle,
            weight_decay: 0.0,
            init_noise_std: 0.0,
            tuning: Tuning::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if !(self.init_noise_std >= 0.0 && self.init_noise_std.is_finite()) {
            return Err(Error::config("init_noise_std must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::config("batch_size and max_steps must be >= 1"));
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.max_steps {
            return Err(Error::config(
                "checkpoint_every must be >= 1 and fit into max_steps at least once",
            ));
        }
        Ok(())
    }

    /// Steps in one full pass over `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

pub const METRICS_HEADER: [&str; 5] = [
    "step",
    "train_loss",
    "train_accuracy",
    "eval_loss",
    "eval_accuracy",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// `(step, params)` at step 0, every `checkpoint_every` steps, and at `max_steps`.
    pub checkpoints: Vec<(usize, ParamVector)>,
    /// `[epoch][sample]` probability of the true label, recorded after each
    /// completed epoch in inference mode.
    pub per_epoch_true_probs: Vec<Vec<f64>>,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutput {
    pub fn final_params(&self) -> &ParamVector {
        &self
            .checkpoints
            .last()
            .expect("at least the initial checkpoint")
            .1
    }

    pub fn checkpoint_at(&self, step: usize) -> Option<&ParamVector> {
        self.checkpoints
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, p)| p)
    }

    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.metrics {
            w.write_record([
                r.step.to_string(),
                r.train_loss.to_string(),
                r.train_accuracy.to_string(),
                opt(r.eval_loss),
                opt(r.eval_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mini-batch training with a deterministic, per-epoch reshuffled data order.
pub fn train(
    model: &Classifier,
    config: &TrainConfig,
    data: &Dataset,
    init: &ParamVector,
    eval: Option<&Dataset>,
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::domain("cannot train on an empty dataset"));
    }
    if config.tuning != model.tuning() {
        return Err(Error::structure(format!(
            "config asks for {:?} tuning but the model was built for {:?}",
            config.tuning,
            model.tuning()
        )));
    }
    if **init.layout() != **model.layout() {
        return Err(Error::structure(
            "initial parameters do not match the model layout",
        ));
    }

    let mut params = init.clone();
    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.weight_decay,
        model.layout(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.data_order_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<&Sample> = Vec::with_capacity(config.batch_size);

    let snapshot = |step: usize, params: &ParamVector| -> Result<MetricsRow> {
        let tr = model.forward_loss(params, &data.samples)?;
        let ev = eval
            .map(|d| model.forward_loss(params, &d.samples))
            .transpose()?;
        Ok(MetricsRow {
            step,
            train_loss: tr.mean_loss,
            train_accuracy: tr.accuracy(),
            eval_loss: ev.as_ref().map(|e| e.mean_loss),
            eval_accuracy: ev.as_ref().map(|e| e.accuracy()),
        })
    };

    let mut out = TrainOutput {
        checkpoints: vec![(0, params.clone())],
        per_epoch_true_probs: Vec::new(),
        metrics: vec![snapshot(0, &params)?],
    };

    let mut step = 0;
    'epochs: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &data.samples[i]));
            let (loss, grad) = model.loss_and_gradient(&params, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericFailure {
                    step,
                    context: format!("training loss {loss}"),
                });
            }
            optimizer.step(params.values_mut(), &grad);
            step += 1;
            if !params.is_finite() {
                return Err(Error::NumericFailure {
                    step,
                    context: "parameters diverged".into(),
                });
            }
            if step % config.checkpoint_every == 0 || step == config.max_steps {
                out.checkpoints.push((step, params.clone()));
                out.metrics.push(snapshot(step, &params)?);
            }
            if step == config.max_steps {
                // An epoch that ends exactly here still counts.
                let finished_epoch = chunk.as_ptr_range().end == order.as_ptr_range().end;
                if finished_epoch {
                    record_epoch(model, &params, data, &mut out)?;
                }
                break 'epochs;
            }
        }
        record_epoch(model, &params, data, &mut out)?;
    }
    Ok(out)
}

fn record_epoch(
    model: &Classifier,
    params: &ParamVector,
    data: &Dataset,
    out: &mut TrainOutput,
) -> Result<()> {
    let e = model.forward_loss(params, &data.samples)?;
    out.per_epoch_true_probs.push(e.per_sample_true_prob);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_task, GenArgs, TaskKind};
    use crate::nn::{Activation, ModelSpec};

    fn setup() -> (Classifier, Dataset) {
        let spec = ModelSpec {
            input_dim: 8,
            hidden_dims: vec![16],
            num_classes: 4,
            activation: Activation::Relu,
            adapter: None,
        };
        let data = gen_task(&GenArgs::new(TaskKind::GaussianBlobs, 100, 1)).unwrap();
        (Classifier::new(spec, Tuning::Full).unwrap(), data)
    }

    #[test]
    fn checkpoint_schedule_and_epochs() {
        let (model, data) = setup();
        let cfg = TrainConfig {
            batch_size: 10,
            max_steps: 35,
            checkpoint_every: 10,
            ..TrainConfig::default()
        };
        let out = train(&model, &cfg, &data, &model.init_params(0), Some(&data)).unwrap();
        let steps: Vec<usize> = out.checkpoints.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 35]);
        // 10 steps per epoch: epochs end at 10, 20, 30.
        assert_eq!(out.per_epoch_true_probs.len(), 3);
        assert!(out.per_epoch_true_probs.iter().all(|r| r.len() == 100));
        assert_eq!(out.metrics.len(), 5);

        let exact = TrainConfig {
            max_steps: 30,
            ..cfg
        };
        let out = train(&model, &exact, &data, &model.init_params(0), None).unwrap();
        assert_eq!(out.per_epoch_true_probs.len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (model, data) = setup();
        let init = model.init_params(0);
        let empty = Dataset::new("e", vec![], "t", "d").unwrap();
        assert!(matches!(
            train(&model, &TrainConfig::default(), &empty, &init, None),
            Err(Error::Domain(_))
        ));
        let cfg = TrainConfig {
            checkpoint_every: 5000,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&model, &cfg, &data, &init, None),
            Err(Error::Config(_))
        ));
        let cfg = TrainConfig {
            tuning: Tuning::Adapter,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&model, &cfg, &data, &init, None),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn metrics_csv_header_is_fixed() {
        let (model, data) = setup();
        let cfg = TrainConfig {
            max_steps: 4,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let out = train(&model, &cfg, &data, &model.init_params(0), None).unwrap();
        let mut buf = Vec::new();
        out.write_metrics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,train_loss,train_accuracy,eval_loss,eval_accuracy\n0,"));
        assert!(text.lines().nth(1).unwrap().ends_with(",,"));
    }
}
