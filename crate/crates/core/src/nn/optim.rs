use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::params::ParamLayout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdamwStyle,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First-order optimizer over the tunable ranges of a layout. Frozen entries
/// are never touched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    ranges: Vec<Range<usize>>,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, layout: &ParamLayout) -> Self {
        let ranges = layout.tunable_segments().map(|s| s.range()).collect();
        Self::with_ranges(kind, lr, weight_decay, ranges, layout.total_len())
    }

    /// Optimizer over every entry of a buffer of length `len`.
    #[allow(clippy::single_range_in_vec_init)]
    pub fn dense(kind: OptimizerKind, lr: f64, weight_decay: f64, len: usize) -> Self {
        Self::with_ranges(kind, lr, weight_decay, vec![0..len], len)
    }

    fn with_ranges(
        kind: OptimizerKind,
        lr: f64,
        weight_decay: f64,
        ranges: Vec<Range<usize>>,
        len: usize,
    ) -> Self {
        let second = match kind {
            OptimizerKind::AdamwStyle => vec![0.0; len],
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Optimizer {
            kind,
            lr,
            weight_decay,
            ranges,
            first: vec![0.0; len],
            second,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t = self.t.saturating_add(1);
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for r in &self.ranges {
                    for k in r.clone() {
                        let g = grad[k] + wd * params[k];
                        self.first[k] = MOMENTUM * self.first[k] + g;
                        params[k] -= lr * self.first[k];
                    }
                }
            }
            OptimizerKind::AdamwStyle => {
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for r in &self.ranges {
                    for k in r.clone() {
                        let g = grad[k];
                        self.first[k] = BETA1 * self.first[k] + (1.0 - BETA1) * g;
                        self.second[k] = BETA2 * self.second[k] + (1.0 - BETA2) * g * g;
                        let m = self.first[k] / c1;
                        let v = self.second[k] / c2;
                        params[k] -= lr * (m / (v.sqrt() + EPS) + wd * params[k]);
                    }
                }
            }
        }
    }
}
