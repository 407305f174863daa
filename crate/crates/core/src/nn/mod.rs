//! Deterministic feed-forward classifier: layout construction, initialization,
//! softmax cross-entropy forward pass and analytic backpropagation.
//!
//! Every hidden layer is `act(W·h + b)`. With an adapter configured, each hidden
//! layer is followed by a bottleneck residual block
//! `h + W_up·act(W_down·h + b_down) + b_up`. The classification head is linear.
//! Under adapter tuning only adapter and head segments are tunable.

mod optim;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::objective::{Objective, PointMetrics};
use crate::params::{ModuleKind, ParamLayout, ParamVector};

pub use optim::{Optimizer, OptimizerKind};
pub use train::{train, MetricsRow, TrainConfig, TrainOutput, METRICS_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub bottleneck_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::domain("num_classes must be at least 2"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::domain("all layer dimensions must be at least 1"));
        }
        if self.adapter.is_some_and(|a| a.bottleneck_dim == 0) {
            return Err(Error::domain("adapter bottleneck_dim must be at least 1"));
        }
        if self.adapter.is_some() && self.hidden_dims.is_empty() {
            return Err(Error::domain("adapters need at least one hidden layer"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tuning {
    #[default]
    Full,
    Adapter,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
    tunable: bool,
}

impl Dense {
    fn forward(&self, p: &[f64], input: &[f64], out: &mut [f64]) {
        let w = &p[self.w..self.w + self.n_in * self.n_out];
        for (o, (row, &bias)) in out.iter_mut().zip(
            w.chunks_exact(self.n_in)
                .zip(&p[self.b..self.b + self.n_out]),
        ) {
            *o = bias + row.iter().zip(input).map(|(x, y)| x * y).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients (when tunable) and, if asked, writes
    /// the gradient w.r.t. the input.
    fn backward(
        &self,
        p: &[f64],
        input: &[f64],
        d_out: &[f64],
        grad: &mut [f64],
        d_in: Option<&mut [f64]>,
    ) {
        if self.tunable {
            let (gw, gb) = (self.w, self.b);
            for (o, &d) in d_out.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[gw + o * self.n_in..gw + (o + 1) * self.n_in];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[gb + o] += d;
            }
        }
        if let Some(d_in) = d_in {
            d_in.fill(0.0);
            let w = &p[self.w..self.w + self.n_in * self.n_out];
            for (row, &d) in w.chunks_exact(self.n_in).zip(d_out) {
                if d == 0.0 {
                    continue;
                }
                for (di, &wv) in d_in.iter_mut().zip(row) {
                    *di += d * wv;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    dense: Dense,
    adapter: Option<(Dense, Dense)>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Clone, Debug)]
struct Trace {
    /// `inputs[l]` is the input to block `l`; the last entry feeds the head.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    adapter_pre: Vec<Vec<f64>>,
    adapter_act: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// Result of a forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub per_sample_true_prob: Vec<f64>,
    pub correct: Vec<bool>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return f64::NAN;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }
}

/// The classifier bound to one layout (architecture + tuning method).
#[derive(Clone, Debug)]
pub struct Classifier {
    spec: ModelSpec,
    tuning: Tuning,
    layout: Arc<ParamLayout>,
    blocks: Vec<Block>,
    head: Dense,
}

impl Classifier {
    pub fn new(spec: ModelSpec, tuning: Tuning) -> Result<Self> {
        spec.validate()?;
        if tuning == Tuning::Adapter && spec.adapter.is_none() {
            return Err(Error::config(
                "adapter tuning requires an adapter in the model spec",
            ));
        }
        let backbone_tunable = tuning == Tuning::Full;
        let mut builder = ParamLayout::builder();
        let mut offset = 0usize;
        let mut dense = |builder: &mut crate::params::LayoutBuilder,
                         prefix: String,
                         n_in: usize,
                         n_out: usize,
                         layer: u32,
                         kinds: (ModuleKind, u32, ModuleKind, u32),
                         tunable: bool| {
            let (w_kind, w_matrix, b_kind, b_matrix) = kinds;
            let b = std::mem::take(builder);
            *builder = b
                .push(
                    format!("{prefix}.weight"),
                    n_in * n_out,
                    layer,
                    w_kind,
                    w_matrix,
                    tunable,
                )
                .push(
                    format!("{prefix}.bias"),
                    n_out,
                    layer,
                    b_kind,
                    b_matrix,
                    tunable,
                );
            let d = Dense {
                w: offset,
                b: offset + n_in * n_out,
                n_in,
                n_out,
                tunable,
            };
            offset += n_in * n_out + n_out;
            d
        };

        let mut blocks = Vec::with_capacity(spec.hidden_dims.len());
        let mut n_in = spec.input_dim;
        for (l, &width) in spec.hidden_dims.iter().enumerate() {
            let layer = l as u32;
            let main = dense(
                &mut builder,
                format!("layer{l}.ff"),
                n_in,
                width,
                layer,
                (ModuleKind::Feedforward, 0, ModuleKind::Bias, 0),
                backbone_tunable,
            );
            let adapter = spec.adapter.map(|a| {
                let down = dense(
                    &mut builder,
                    format!("layer{l}.adapter.down"),
                    width,
                    a.bottleneck_dim,
                    layer,
                    (ModuleKind::Adapter, 0, ModuleKind::Adapter, 1),
                    true,
                );
                let up = dense(
                    &mut builder,
                    format!("layer{l}.adapter.up"),
                    a.bottleneck_dim,
                    width,
                    layer,
                    (ModuleKind::Adapter, 2, ModuleKind::Adapter, 3),
                    true,
                );
                (down, up)
            });
            blocks.push(Block {
                dense: main,
                adapter,
            });
            n_in = width;
        }
        let head = dense(
            &mut builder,
            "head".to_string(),
            n_in,
            spec.num_classes,
            spec.hidden_dims.len() as u32,
            (ModuleKind::Head, 0, ModuleKind::Head, 1),
            true,
        );
        Ok(Classifier {
            spec,
            tuning,
            layout: Arc::new(builder.build()?),
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tuning(&self) -> Tuning {
        self.tuning
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Fan-in scaled Gaussian weights, zero biases. Values do not depend on the
    /// tuning method, only on the architecture and seed.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total_len()];
        let mut denses: Vec<&Dense> = Vec::new();
        for block in &self.blocks {
            denses.push(&block.dense);
            if let Some((down, up)) = &block.adapter {
                denses.push(down);
                denses.push(up);
            }
        }
        denses.push(&self.head);
        for d in denses {
            let scale = 1.0 / (d.n_in as f64).sqrt();
            for v in &mut values[d.w..d.w + d.n_in * d.n_out] {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        }
        ParamVector::new(Arc::clone(&self.layout), values).expect("finite initial weights")
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(params.layout(), &self.layout) || **params.layout() == *self.layout {
            Ok(())
        } else {
            Err(Error::structure(
                "parameter layout does not match the model",
            ))
        }
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.spec.input_dim {
            return Err(Error::structure(format!(
                "sample has {} features, model expects {}",
                s.features.len(),
                self.spec.input_dim
            )));
        }
        if s.label >= self.spec.num_classes {
            return Err(Error::structure(format!(
                "label {} outside the {}-class label space",
                s.label, self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn new_trace(&self) -> Trace {
        let widths = &self.spec.hidden_dims;
        let bottleneck = self.spec.adapter.map_or(0, |a| a.bottleneck_dim);
        let mut inputs = vec![vec![0.0; self.spec.input_dim]];
        inputs.extend(widths.iter().map(|&w| vec![0.0; w]));
        Trace {
            inputs,
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            act: widths.iter().map(|&w| vec![0.0; w]).collect(),
            adapter_pre: widths.iter().map(|_| vec![0.0; bottleneck]).collect(),
            adapter_act: widths.iter().map(|_| vec![0.0; bottleneck]).collect(),
            logits: vec![0.0; self.spec.num_classes],
        }
    }

    fn forward_one(&self, p: &[f64], features: &[f64], t: &mut Trace) {
        let act = self.spec.activation;
        t.inputs[0].copy_from_slice(features);
        for (l, block) in self.blocks.iter().enumerate() {
            let (head, tail) = t.inputs.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            block.dense.forward(p, input, &mut t.pre[l]);
            for (a, &z) in t.act[l].iter_mut().zip(&t.pre[l]) {
                *a = act.apply(z);
            }
            match &block.adapter {
                None => out.copy_from_slice(&t.act[l]),
                Some((down, up)) => {
                    down.forward(p, &t.act[l], &mut t.adapter_pre[l]);
                    for (a, &z) in t.adapter_act[l].iter_mut().zip(&t.adapter_pre[l]) {
                        *a = act.apply(z);
                    }
                    up.forward(p, &t.adapter_act[l], out);
                    for (o, &h) in out.iter_mut().zip(&t.act[l]) {
                        *o += h;
                    }
                }
            }
        }
        let last = t.inputs.last().expect("at least the input layer");
        self.head.forward(p, last, &mut t.logits);
    }

    /// Softmax probabilities in place of the logits; returns (loss, p_true, argmax).
    fn softmax_loss(logits: &mut [f64], label: usize) -> (f64, f64, usize) {
        let mut argmax = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[argmax] {
                argmax = k;
            }
        }
        let max = logits[argmax];
        let mut sum = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let true_shifted = logits[label].ln();
        for v in logits.iter_mut() {
            *v /= sum;
        }
        let loss = sum.ln() - true_shifted;
        (loss, logits[label], argmax)
    }

    /// Mean cross-entropy, per-sample true-label probability, and correctness.
    pub fn forward_loss<S: std::borrow::Borrow<Sample>>(
        &self,
        params: &ParamVector,
        batch: &[S],
    ) -> Result<Evaluation> {
        self.check_params(params)?;
        let p = params.values();
        let mut trace = self.new_trace();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(batch.len());
        let mut correct = Vec::with_capacity(batch.len());
        for s in batch {
            let s = s.borrow();
            self.check_sample(s)?;
            self.forward_one(p, &s.features, &mut trace);
            let (loss, prob, argmax) = Self::softmax_loss(&mut trace.logits, s.label);
            total += loss;
            probs.push(prob);
            correct.push(argmax == s.label);
        }
        let mean_loss = if batch.is_empty() {
            f64::NAN
        } else {
            total / batch.len() as f64
        };
        Ok(Evaluation {
            mean_loss,
            per_sample_true_prob: probs,
            correct,
        })
    }

    /// Mean loss and raw gradient buffer; frozen entries are exactly zero.
    pub fn loss_and_gradient<S: std::borrow::Borrow<Sample>>(
        &self,
        params: &ParamVector,
        batch: &[S],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::domain("gradient of an empty batch"));
        }
        let p = params.values();
        let mut grad = vec![0.0; p.len()];
        let mut t = self.new_trace();
        let scale = 1.0 / batch.len() as f64;
        let act = self.spec.activation;
        let widest = self.spec.hidden_dims.iter().copied().max().unwrap_or(0);
        let bottleneck = self.spec.adapter.map_or(0, |a| a.bottleneck_dim);
        let mut d_out = vec![0.0; widest.max(self.spec.num_classes)];
        let mut d_in = vec![0.0; widest.max(self.spec.input_dim)];
        let mut d_act = vec![0.0; widest];
        let mut d_bottleneck = vec![0.0; bottleneck];
        let mut total = 0.0;

        for s in batch {
            let s = s.borrow();
            self.check_sample(s)?;
            self.forward_one(p, &s.features, &mut t);
            let (loss, _, _) = Self::softmax_loss(&mut t.logits, s.label);
            total += loss;

            // d loss / d logits = softmax - onehot
            let k = self.spec.num_classes;
            for (d, &prob) in d_out[..k].iter_mut().zip(&t.logits) {
                *d = prob * scale;
            }
            d_out[s.label] -= scale;

            let n_blocks = self.blocks.len();
            let last_in = &t.inputs[n_blocks];
            let need_input_grad = n_blocks > 0;
            self.head.backward(
                p,
                last_in,
                &d_out[..k],
                &mut grad,
                need_input_grad.then(|| &mut d_in[..last_in.len()]),
            );

            for l in (0..n_blocks).rev() {
                let block = &self.blocks[l];
                let width = block.dense.n_out;
                // d_in now holds dL/d(block output).
                match &block.adapter {
                    None => d_act[..width].copy_from_slice(&d_in[..width]),
                    Some((down, up)) => {
                        let d_block_out = d_in[..width].to_vec();
                        up.backward(
                            p,
                            &t.adapter_act[l],
                            &d_block_out,
                            &mut grad,
                            Some(&mut d_bottleneck[..]),
                        );
                        for ((d, &z), &a) in d_bottleneck
                            .iter_mut()
                            .zip(&t.adapter_pre[l])
                            .zip(&t.adapter_act[l])
                        {
                            *d *= act.derivative(z, a);
                        }
                        down.backward(
                            p,
                            &t.act[l],
                            &d_bottleneck,
                            &mut grad,
                            Some(&mut d_act[..width]),
                        );
                        for (da, &db) in d_act[..width].iter_mut().zip(&d_block_out) {
                            *da += db;
                        }
                    }
                }
                for ((d, &z), &a) in d_act[..width].iter_mut().zip(&t.pre[l]).zip(&t.act[l]) {
                    *d *= act.derivative(z, a);
                }
                let input = &t.inputs[l];
                let want_input = l > 0;
                let n_in = input.len();
                block.dense.backward(
                    p,
                    input,
                    &d_act[..width],
                    &mut grad,
                    want_input.then(|| &mut d_in[..n_in]),
                );
            }
        }

        Ok((total * scale, grad))
    }

    /// Gradient of the mean loss as a parameter vector.
    pub fn backward<S: std::borrow::Borrow<Sample>>(
        &self,
        params: &ParamVector,
        batch: &[S],
    ) -> Result<ParamVector> {
        let (_, grad) = self.loss_and_gradient(params, batch)?;
        ParamVector::new(Arc::clone(params.layout()), grad)
    }
}

impl Objective for Classifier {
    fn loss_and_grad(&self, params: &ParamVector, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        self.loss_and_gradient(params, batch)
    }

    fn evaluate(&self, params: &ParamVector, samples: &[Sample]) -> Result<PointMetrics> {
        let eval = self.forward_loss(params, samples)?;
        Ok(PointMetrics {
            loss: eval.mean_loss,
            accuracy: eval.accuracy(),
        })
    }
}

/// Adds N(0, std²) noise to every tunable entry.
pub fn perturb_init(base: &ParamVector, std: f64, seed: u64) -> Result<ParamVector> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::domain(format!(
            "noise std must be finite and >= 0, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(base.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = base.clone();
    let ranges: Vec<_> = base
        .layout()
        .tunable_segments()
        .map(|s| s.range())
        .collect();
    let values = out.values_mut();
    for range in ranges {
        for v in &mut values[range] {
            *v += rng.sample(normal);
        }
    }
    Ok(out)
}
