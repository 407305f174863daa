//! Gated weight ensembles: two frozen endpoints mixed per parameter group by
//! `σ(lᵢ)·a + (1 − σ(lᵢ))·b`, with only the logits `l` trained.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Optimizer, OptimizerKind};
use crate::objective::{Objective, PointMetrics};
use crate::params::{ModuleKind, ParamLayout, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Layer,
    Module,
    Matrix,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Layer, Strategy::Module, Strategy::Matrix];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Layer => "layer",
            Strategy::Module => "module",
            Strategy::Matrix => "matrix",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub component_index: usize,
    pub name: String,
    pub segment_names: Vec<String>,
    ranges: Vec<Range<usize>>,
}

impl Group {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

/// Partition of the tunable segments of one layout into mixing groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Division {
    pub strategy: Strategy,
    pub groups: Vec<Group>,
    layout: Arc<ParamLayout>,
}

impl Division {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn check(&self, v: &ParamVector) -> Result<()> {
        if **v.layout() != *self.layout {
            return Err(Error::structure(
                "division was built for a different parameter layout",
            ));
        }
        Ok(())
    }
}

/// Groups tunable segments by layer, by (layer, module kind) or by
/// (layer, module kind, matrix). Head segments always form one group.
/// Groups are ordered by their first offset.
pub fn make_division(layout: &Arc<ParamLayout>, strategy: Strategy) -> Division {
    let mut groups: Vec<Group> = Vec::new();
    let mut keys: Vec<(u32, Option<ModuleKind>, Option<u32>)> = Vec::new();
    for seg in layout.tunable_segments() {
        let key = if seg.module_kind == ModuleKind::Head {
            (seg.layer_id, Some(ModuleKind::Head), None)
        } else {
            match strategy {
                Strategy::Layer => (seg.layer_id, None, None),
                Strategy::Module => (seg.layer_id, Some(seg.module_kind), None),
                Strategy::Matrix => (seg.layer_id, Some(seg.module_kind), Some(seg.matrix_id)),
            }
        };
        let name = match key {
            (_, Some(ModuleKind::Head), _) => "head".to_string(),
            (l, None, _) => format!("layer{l}"),
            (l, Some(kind), None) => format!("layer{l}.{kind}"),
            (_, Some(_), Some(_)) => seg.name.clone(),
        };
        match keys.iter().position(|k| *k == key) {
            Some(i) => {
                groups[i].segment_names.push(seg.name.clone());
                groups[i].ranges.push(seg.range());
            }
            None => {
                keys.push(key);
                groups.push(Group {
                    component_index: groups.len(),
                    name,
                    segment_names: vec![seg.name.clone()],
                    ranges: vec![seg.range()],
                });
            }
        }
    }
    // Segments are visited in offset order, so groups already are too.
    Division {
        strategy,
        groups,
        layout: Arc::clone(layout),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub logits: Vec<f64>,
    pub division: Division,
}

#[derive(Serialize, Deserialize)]
struct GateManifest {
    strategy: Strategy,
    groups: Vec<String>,
    logits: Vec<f64>,
}

impl GateVector {
    /// All logits 0: the elementwise midpoint.
    pub fn zeros(division: Division) -> Self {
        GateVector {
            logits: vec![0.0; division.len()],
            division,
        }
    }

    pub fn new(division: Division, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != division.len() {
            return Err(Error::structure(format!(
                "{} logits for {} groups",
                logits.len(),
                division.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::domain("gate logits must be finite"));
        }
        Ok(GateVector { logits, division })
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn manifest_text(&self) -> Result<String> {
        let m = GateManifest {
            strategy: self.division.strategy,
            groups: self
                .division
                .groups
                .iter()
                .map(|g| g.name.clone())
                .collect(),
            logits: self.logits.clone(),
        };
        toml::to_string(&m).map_err(|e| Error::config(e.to_string()))
    }

    /// Rebuilds a gate against `layout`; group names must match.
    pub fn from_manifest(text: &str, layout: &Arc<ParamLayout>) -> Result<Self> {
        let m: GateManifest = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let division = make_division(layout, m.strategy);
        let names: Vec<&str> = division.groups.iter().map(|g| g.name.as_str()).collect();
        if names != m.groups.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::structure("gate groups do not match the layout"));
        }
        GateVector::new(division, m.logits)
    }
}

/// Mixes tunable entries of group `i` as `σ(lᵢ)·a + (1 − σ(lᵢ))·b`. Entries
/// outside every group are copied from `a`.
pub fn gated_combine(a: &ParamVector, b: &ParamVector, gate: &GateVector) -> Result<ParamVector> {
    a.ensure_same_layout(b)?;
    gate.division.check(a)?;
    let mut values = a.values().to_vec();
    for (group, &logit) in gate.division.groups.iter().zip(&gate.logits) {
        let w_a = sigmoid(logit);
        let w_b = 1.0 - w_a;
        for r in &group.ranges {
            for k in r.clone() {
                let (x, y) = (a.values()[k], b.values()[k]);
                values[k] = if x == y { x } else { w_a * x + w_b * y };
            }
        }
    }
    ParamVector::new(Arc::clone(a.layout()), values)
}

/// Chain rule from the gradient at the combined point to the logits:
/// `σ'(lᵢ) · Σ_{k∈group i} (a_k − b_k) · g_k`.
pub fn gate_gradient(
    a: &ParamVector,
    b: &ParamVector,
    gate: &GateVector,
    point_grad: &[f64],
) -> Result<Vec<f64>> {
    a.ensure_same_layout(b)?;
    gate.division.check(a)?;
    if point_grad.len() != a.len() {
        return Err(Error::structure(
            "gradient length does not match the layout",
        ));
    }
    Ok(gate
        .division
        .groups
        .iter()
        .zip(&gate.logits)
        .map(|(group, &logit)| {
            let s = sigmoid(logit);
            let inner: f64 = group
                .ranges
                .iter()
                .flat_map(|r| r.clone())
                .map(|k| (a.values()[k] - b.values()[k]) * point_grad[k])
                .sum();
            s * (1.0 - s) * inner
        })
        .collect())
}

/// Loss at the combined point and its gradient with respect to the logits.
pub fn gate_loss_and_grad<O: Objective>(
    objective: &O,
    a: &ParamVector,
    b: &ParamVector,
    gate: &GateVector,
    batch: &[&Sample],
) -> Result<(f64, Vec<f64>)> {
    let point = gated_combine(a, b, gate)?;
    let (loss, grad) = objective.loss_and_grad(&point, batch)?;
    Ok((loss, gate_gradient(a, b, gate, &grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateTrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        GateTrainConfig {
            batch_size: 8,
            max_steps: 5000,
            eval_every: 100,
            seed: 0,
            optimizer: OptimizerKind::AdamwStyle,
        }
    }
}

pub const DEFAULT_GATE_LR_GRID: [f64; 3] = [0.1, 0.05, 0.01];

#[derive(Clone, Debug, PartialEq)]
pub struct GateEval {
    pub learning_rate: f64,
    pub step: usize,
    pub dev: PointMetrics,
}

#[derive(Clone, Debug)]
pub struct GateResult {
    pub gate: GateVector,
    pub best_lr: f64,
    pub best_step: usize,
    pub best_dev_loss: f64,
    /// Every evaluation of every branch, grouped by learning rate in grid order.
    pub dev_trace: Vec<GateEval>,
}

impl GateResult {
    pub fn write_dev_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["learning_rate", "step", "dev_loss", "dev_accuracy"])?;
        for e in &self.dev_trace {
            w.write_record([
                e.learning_rate.to_string(),
                e.step.to_string(),
                e.dev.loss.to_string(),
                e.dev.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Branch {
    trace: Vec<GateEval>,
    best: (f64, usize, Vec<f64>),
}

#[allow(clippy::too_many_arguments)]
fn train_branch<O: Objective>(
    objective: &O,
    a: &ParamVector,
    b: &ParamVector,
    train: &[Sample],
    dev: &[Sample],
    division: &Division,
    lr: f64,
    config: &GateTrainConfig,
) -> Result<Branch> {
    let mut gate = GateVector::zeros(division.clone());
    let mut optimizer = Optimizer::dense(config.optimizer, lr, 0.0, gate.logits.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut batch: Vec<&Sample> = Vec::with_capacity(config.batch_size);

    let evaluate = |gate: &GateVector, step: usize| -> Result<GateEval> {
        let point = gated_combine(a, b, gate)?;
        Ok(GateEval {
            learning_rate: lr,
            step,
            dev: objective.evaluate(&point, dev)?,
        })
    };
    let first = evaluate(&gate, 0)?;
    let mut best = (first.dev.loss, 0, gate.logits.clone());
    let mut trace = vec![first];

    for step in 1..=config.max_steps {
        batch.clear();
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = gate_loss_and_grad(objective, a, b, &gate, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericFailure {
                step,
                context: format!("gate loss {loss} at learning rate {lr}"),
            });
        }
        optimizer.step(&mut gate.logits, &grad);
        if step % config.eval_every == 0 || step == config.max_steps {
            let eval = evaluate(&gate, step)?;
            if !eval.dev.loss.is_finite() {
                return Err(Error::NumericFailure {
                    step,
                    context: format!("dev loss {} at learning rate {lr}", eval.dev.loss),
                });
            }
            if eval.dev.loss < best.0 {
                best = (eval.dev.loss, step, gate.logits.clone());
            }
            trace.push(eval);
        }
    }
    Ok(Branch { trace, best })
}

/// Trains the logits from zero once per learning rate and keeps the
/// (learning rate, step) with the lowest dev loss. Ties go to the earlier
/// step, then to the earlier grid entry. The endpoints are never modified.
#[allow(clippy::too_many_arguments)]
pub fn train_gate<O: Objective>(
    objective: &O,
    a: &ParamVector,
    b: &ParamVector,
    train: &[Sample],
    dev: &[Sample],
    division: &Division,
    lr_grid: &[f64],
    config: &GateTrainConfig,
) -> Result<GateResult> {
    a.ensure_same_layout(b)?;
    division.check(a)?;
    if lr_grid.is_empty() || lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
        return Err(Error::config(
            "gate learning-rate grid must be non-empty and positive",
        ));
    }
    if config.batch_size == 0 || config.eval_every == 0 {
        return Err(Error::config("gate batch_size and eval_every must be >= 1"));
    }
    if train.is_empty() && config.max_steps > 0 {
        return Err(Error::domain(
            "gate training needs a non-empty training set",
        ));
    }
    let branches = lr_grid
        .par_iter()
        .map(|&lr| train_branch(objective, a, b, train, dev, division, lr, config))
        .collect::<Result<Vec<_>>>()?;

    let mut pick = 0;
    for (i, br) in branches.iter().enumerate() {
        let (cur, old) = (&br.best, &branches[pick].best);
        if cur.0 < old.0 || (cur.0 == old.0 && cur.1 < old.1) {
            pick = i;
        }
    }
    let (best_dev_loss, best_step, logits) = branches[pick].best.clone();
    Ok(GateResult {
        gate: GateVector::new(division.clone(), logits)?,
        best_lr: lr_grid[pick],
        best_step,
        best_dev_loss,
        dev_trace: branches.into_iter().flat_map(|b| b.trace).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(
            ParamLayout::builder()
                .push("l0.w", 4, 0, ModuleKind::Feedforward, 0, true)
                .push("l0.b", 2, 0, ModuleKind::Bias, 0, true)
                .push("l0.frozen", 2, 0, ModuleKind::Feedforward, 1, false)
                .push("l1.w", 3, 1, ModuleKind::Feedforward, 0, true)
                .push("l1.u", 3, 1, ModuleKind::Feedforward, 1, true)
                .push("head.w", 2, 2, ModuleKind::Head, 0, true)
                .push("head.b", 1, 2, ModuleKind::Head, 1, true)
                .build()
                .unwrap(),
        )
    }

    fn names(d: &Division) -> Vec<&str> {
        d.groups.iter().map(|g| g.name.as_str()).collect()
    }

    #[test]
    fn division_counts_and_names() {
        let l = layout();
        let layer = make_division(&l, Strategy::Layer);
        let module = make_division(&l, Strategy::Module);
        let matrix = make_division(&l, Strategy::Matrix);
        assert_eq!(names(&layer), ["layer0", "layer1", "head"]);
        assert_eq!(
            names(&module),
            [
                "layer0.feedforward",
                "layer0.bias",
                "layer1.feedforward",
                "head"
            ]
        );
        assert_eq!(names(&matrix), ["l0.w", "l0.b", "l1.w", "l1.u", "head"]);
        assert_eq!(matrix.groups[4].segment_names, ["head.w", "head.b"]);
        for d in [&layer, &module, &matrix] {
            let covered: usize = d
                .groups
                .iter()
                .flat_map(|g| g.ranges())
                .map(|r| r.len())
                .sum();
            assert_eq!(covered, l.tunable_len());
        }
    }

    #[test]
    fn combine_examples() {
        let l = layout();
        let a =
            ParamVector::new(Arc::clone(&l), (0..17).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut bv: Vec<f64> = (0..17).map(|i| -(i as f64) * 0.1).collect();
        bv[6..8].copy_from_slice(&a.values()[6..8]);
        let b = ParamVector::new(Arc::clone(&l), bv).unwrap();
        let d = make_division(&l, Strategy::Layer);

        let mid = gated_combine(&a, &b, &GateVector::zeros(d.clone())).unwrap();
        for k in 0..17 {
            assert_eq!(mid.values()[k], 0.5 * a.values()[k] + 0.5 * b.values()[k]);
        }
        let sat =
            gated_combine(&a, &b, &GateVector::new(d.clone(), vec![20.0; 3]).unwrap()).unwrap();
        for k in 0..17 {
            assert!((sat.values()[k] - a.values()[k]).abs() < 1e-8);
        }
        let g = GateVector::new(d, vec![3f64.ln(), 0.0, 0.0]).unwrap();
        let c = gated_combine(&a, &b, &g).unwrap();
        for k in 0..6 {
            let want = 0.75 * a.values()[k] + 0.25 * b.values()[k];
            assert!((c.values()[k] - want).abs() < 1e-12);
        }
        assert_eq!(&c.values()[6..8], &a.values()[6..8]);
    }

    #[test]
    fn manifest_round_trip() {
        let l = layout();
        let g = GateVector::new(
            make_division(&l, Strategy::Module),
            vec![0.1, -2.0, 3.5, 0.0],
        )
        .unwrap();
        let text = g.manifest_text().unwrap();
        assert!(text.contains("strategy = \"module\""));
        let back = GateVector::from_manifest(&text, &l).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn foreign_layout_is_structural() {
        let l = layout();
        let other = Arc::new(
            ParamLayout::builder()
                .push("w", 17, 0, ModuleKind::Feedforward, 0, true)
                .build()
                .unwrap(),
        );
        let a = ParamVector::zeros(other);
        let g = GateVector::zeros(make_division(&l, Strategy::Layer));
        assert!(matches!(
            gated_combine(&a, &a, &g),
            Err(Error::Structure(_))
        ));
    }
}
