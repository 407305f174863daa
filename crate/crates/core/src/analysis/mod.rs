//! Interpolation scans, barrier metrics, dataset cartography and the
//! forgetting/memorization trace along a linear path.

mod cartography;
mod stats;
mod trace;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::{Objective, PointMetrics};
use crate::params::make_alpha_grid;
use crate::paths::{PathKind, PathSpec};
use crate::table::{Cell, Table};

pub use cartography::{compute_cartography, CartographyRecord, SampleDynamics};
pub use stats::{mean, spearman};
pub use trace::{knowledge_trace, transition_sets, PathKnowledgeTrace, TracePoint, Transitions};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricCurve {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult {
    pub alphas: Vec<f64>,
    pub per_dataset: IndexMap<String, MetricCurve>,
    pub path_kind: PathKind,
    pub endpoint_metadata: BTreeMap<String, String>,
}

impl ScanResult {
    pub fn curve(&self, dataset: &str) -> Result<&MetricCurve> {
        self.per_dataset.get(dataset).ok_or_else(|| Error::Lookup {
            kind: "dataset",
            name: dataset.to_string(),
        })
    }

    /// Long format: one row per (alpha, dataset).
    pub fn to_table(&self, name: &str) -> Table {
        let mut t = Table::new(name, &["alpha", "dataset", "loss", "accuracy"]);
        t.metadata = self.endpoint_metadata.clone();
        t.metadata
            .insert("path_kind".into(), self.path_kind.to_string());
        for (ds, curve) in &self.per_dataset {
            for (i, &alpha) in self.alphas.iter().enumerate() {
                t.push(vec![
                    alpha.into(),
                    ds.as_str().into(),
                    curve.loss[i].into(),
                    curve.accuracy[i].into(),
                ]);
            }
        }
        t
    }

    /// Pointwise mean over repeated scans on the same grid and datasets.
    pub fn average(scans: &[ScanResult]) -> Result<ScanResult> {
        let first = scans
            .first()
            .ok_or_else(|| Error::domain("cannot average zero scans"))?;
        for s in scans {
            if s.alphas != first.alphas
                || s.per_dataset.keys().ne(first.per_dataset.keys())
                || s.path_kind != first.path_kind
            {
                return Err(Error::structure("scans to average have different shapes"));
            }
        }
        let n = scans.len() as f64;
        let per_dataset = first
            .per_dataset
            .keys()
            .map(|name| {
                let mut avg = MetricCurve {
                    loss: vec![0.0; first.alphas.len()],
                    accuracy: vec![0.0; first.alphas.len()],
                };
                for s in scans {
                    let c = &s.per_dataset[name];
                    for i in 0..first.alphas.len() {
                        avg.loss[i] += c.loss[i] / n;
                        avg.accuracy[i] += c.accuracy[i] / n;
                    }
                }
                (name.clone(), avg)
            })
            .collect();
        let mut endpoint_metadata = first.endpoint_metadata.clone();
        endpoint_metadata.insert("averaged_over".into(), scans.len().to_string());
        Ok(ScanResult {
            alphas: first.alphas.clone(),
            per_dataset,
            path_kind: first.path_kind,
            endpoint_metadata,
        })
    }
}

/// Evaluates every dataset at each α of `make_alpha_grid(n_interior)`.
/// Grid points are evaluated concurrently and assembled in grid order.
pub fn scan_path<O: Objective>(
    objective: &O,
    path: &PathSpec,
    datasets: &[&Dataset],
    n_interior: usize,
) -> Result<ScanResult> {
    let named: Vec<(&str, &Dataset)> = datasets.iter().map(|d| (d.name.as_str(), *d)).collect();
    scan_named(objective, path, &named, n_interior)
}

fn scan_named<O: Objective>(
    objective: &O,
    path: &PathSpec,
    datasets: &[(&str, &Dataset)],
    n_interior: usize,
) -> Result<ScanResult> {
    let mut seen = std::collections::HashSet::new();
    for (name, _) in datasets {
        if !seen.insert(*name) {
            return Err(Error::structure(format!(
                "dataset name `{name}` appears twice in a scan"
            )));
        }
    }
    let alphas = make_alpha_grid(n_interior);
    let rows: Vec<Vec<PointMetrics>> = alphas
        .par_iter()
        .map(|&alpha| {
            let wrap = |e: Error| Error::AtAlpha {
                alpha,
                source: Box::new(e),
            };
            let point = path.point_at(alpha).map_err(wrap)?;
            datasets
                .iter()
                .map(|(_, d)| objective.evaluate(&point, &d.samples).map_err(wrap))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut per_dataset = IndexMap::new();
    for (j, (name, _)) in datasets.iter().enumerate() {
        let curve = MetricCurve {
            loss: rows.iter().map(|r| r[j].loss).collect(),
            accuracy: rows.iter().map(|r| r[j].accuracy).collect(),
        };
        per_dataset.insert(name.to_string(), curve);
    }
    Ok(ScanResult {
        alphas,
        per_dataset,
        path_kind: path.kind(),
        endpoint_metadata: BTreeMap::new(),
    })
}

/// Scan reporting a source and a target dataset under the keys
/// `"source"` and `"target"`; the dataset names go into the metadata.
pub fn cross_task_scan<O: Objective>(
    objective: &O,
    path: &PathSpec,
    source: &Dataset,
    target: &Dataset,
    n_interior: usize,
) -> Result<ScanResult> {
    let mut scan = scan_named(
        objective,
        path,
        &[("source", source), ("target", target)],
        n_interior,
    )?;
    scan.endpoint_metadata
        .insert("source_dataset".into(), source.name.clone());
    scan.endpoint_metadata
        .insert("target_dataset".into(), target.name.clone());
    Ok(scan)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Barrier {
    pub max_barrier: f64,
    pub argmax_alpha: f64,
    pub max_accuracy_drop: f64,
}

/// Largest excess of path loss over the straight line between the endpoint
/// losses, and largest accuracy drop below the worse endpoint; both floored at 0.
pub fn barrier(scan: &ScanResult, dataset: &str) -> Result<Barrier> {
    let curve = scan.curve(dataset)?;
    let n = scan.alphas.len();
    if n < 2 {
        return Err(Error::structure("a scan needs both endpoints"));
    }
    let (l0, l1) = (curve.loss[0], curve.loss[n - 1]);
    let mut best = (f64::NEG_INFINITY, scan.alphas[0]);
    for (&alpha, &loss) in scan.alphas.iter().zip(&curve.loss) {
        let excess = loss - ((1.0 - alpha) * l0 + alpha * l1);
        if excess > best.0 {
            best = (excess, alpha);
        }
    }
    let floor = curve.accuracy[0].min(curve.accuracy[n - 1]);
    let drop = curve
        .accuracy
        .iter()
        .map(|&a| floor - a)
        .filter(|d| !d.is_nan())
        .fold(0.0f64, f64::max);
    Ok(Barrier {
        max_barrier: best.0.max(0.0),
        argmax_alpha: best.1,
        max_accuracy_drop: drop,
    })
}

pub fn barrier_table(name: &str, rows: &[(String, Barrier)]) -> Table {
    let mut t = Table::new(
        name,
        &["label", "max_barrier", "argmax_alpha", "max_accuracy_drop"],
    );
    for (label, b) in rows {
        t.push(vec![
            Cell::Text(label.clone()),
            b.max_barrier.into(),
            b.argmax_alpha.into(),
            b.max_accuracy_drop.into(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan_of(alphas: Vec<f64>, loss: Vec<f64>, accuracy: Vec<f64>) -> ScanResult {
        let mut per_dataset = IndexMap::new();
        per_dataset.insert("d".to_string(), MetricCurve { loss, accuracy });
        ScanResult {
            alphas,
            per_dataset,
            path_kind: PathKind::Linear,
            endpoint_metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn linear_loss_profile_has_no_barrier() {
        let alphas = make_alpha_grid(9);
        let loss: Vec<f64> = alphas.iter().map(|a| (1.0 - a) * 0.3 + a * 1.1).collect();
        let b = barrier(&scan_of(alphas.clone(), loss, vec![0.9; alphas.len()]), "d").unwrap();
        assert_eq!(b.max_barrier, 0.0);
        assert_eq!(b.max_accuracy_drop, 0.0);
    }

    #[test]
    fn piecewise_barrier_arithmetic() {
        let s = scan_of(
            vec![0.0, 0.5, 1.0],
            vec![0.2, 0.9, 0.4],
            vec![0.8, 0.5, 0.9],
        );
        let b = barrier(&s, "d").unwrap();
        assert!((b.max_barrier - 0.6).abs() < 1e-12);
        assert_eq!(b.argmax_alpha, 0.5);
        assert!((b.max_accuracy_drop - 0.3).abs() < 1e-12);
        assert!(matches!(barrier(&s, "nope"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn convex_profile_is_floored_at_zero() {
        let s = scan_of(vec![0.0, 0.5, 1.0], vec![1.0, 0.1, 1.0], vec![f64::NAN; 3]);
        let b = barrier(&s, "d").unwrap();
        assert_eq!(b.max_barrier, 0.0);
        assert_eq!(b.max_accuracy_drop, 0.0);
    }

    #[test]
    fn averaging_is_pointwise() {
        let a = scan_of(vec![0.0, 1.0], vec![1.0, 3.0], vec![0.5, 0.7]);
        let b = scan_of(vec![0.0, 1.0], vec![3.0, 5.0], vec![0.7, 0.9]);
        let m = ScanResult::average(&[a.clone(), b]).unwrap();
        assert_eq!(m.per_dataset["d"].loss, vec![2.0, 4.0]);
        let c = scan_of(vec![0.0, 0.5, 1.0], vec![0.0; 3], vec![0.0; 3]);
        assert!(ScanResult::average(&[a, c]).is_err());
    }

    #[test]
    fn long_table_shape() {
        let s = scan_of(make_alpha_grid(24), vec![0.0; 26], vec![1.0; 26]);
        let t = s.to_table("scan");
        assert_eq!(t.rows.len(), 26);
        assert_eq!(t.metadata["path_kind"], "linear");
    }
}
