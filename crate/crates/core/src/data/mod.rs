//! Synthetic classification tasks and the dataset manipulations used to set
//! up each experimental condition: domain-shifted variants, disjoint splits,
//! and multi-task mixtures.

mod cache;

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::DatasetCache;

/// Size of the shared label space every task draws from.
pub const DEFAULT_NUM_CLASSES: usize = 4;
pub const DEFAULT_FEATURE_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: Arc<str>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub task_id: String,
    pub distribution_id: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<Sample>,
        task_id: impl Into<String>,
        distribution_id: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if let Some(first) = samples.first() {
            let dim = first.features.len();
            if let Some(bad) = samples.iter().position(|s| s.features.len() != dim) {
                return Err(Error::structure(format!(
                    "dataset `{name}`: sample {bad} has dimension {} but sample 0 has {dim}",
                    samples[bad].features.len()
                )));
            }
        }
        Ok(Dataset {
            name,
            samples,
            task_id: task_id.into(),
            distribution_id: distribution_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.len())
    }

    pub fn max_label(&self) -> Option<usize> {
        self.samples.iter().map(|s| s.label).max()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Columnar CSV: `f0..f{d-1}, label, task_id, distribution_id`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.feature_dim().unwrap_or(0);
        let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
        header.extend(["label", "task_id", "distribution_id"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            row.push(s.label.to_string());
            row.push(s.task_id.to_string());
            row.push(self.distribution_id.clone());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GaussianBlobs,
    #[serde(rename = "two-moons-analog")]
    TwoMoons,
    Spirals,
    ParityLike,
}

impl TaskKind {
    pub fn default_classes(self) -> usize {
        match self {
            TaskKind::GaussianBlobs => 4,
            TaskKind::TwoMoons | TaskKind::ParityLike => 2,
            TaskKind::Spirals => 3,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::GaussianBlobs => "gaussian-blobs",
            TaskKind::TwoMoons => "two-moons-analog",
            TaskKind::Spirals => "spirals",
            TaskKind::ParityLike => "parity-like",
        };
        f.write_str(s)
    }
}

/// Input-distribution transform: rotation in the first feature plane, then a
/// translation; `noise_std` is the per-feature Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Domain {
    pub shift: Vec<f64>,
    pub rotation: f64,
    pub noise_std: f64,
}

impl Default for Domain {
    fn default() -> Self {
        Domain {
            shift: Vec::new(),
            rotation: 0.0,
            noise_std: 0.3,
        }
    }
}

impl Domain {
    pub fn shift_norm(&self) -> f64 {
        self.shift.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Everything that determines a generated dataset; also the cache key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenArgs {
    pub kind: TaskKind,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Number of classes the task uses; `None` picks the kind's default.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Added to every label so tasks can occupy different parts of the label space.
    #[serde(default)]
    pub label_offset: usize,
    #[serde(default)]
    pub domain: Domain,
}

fn default_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

impl GenArgs {
    pub fn new(kind: TaskKind, n: usize, seed: u64) -> Self {
        GenArgs {
            kind,
            n,
            seed,
            dim: DEFAULT_FEATURE_DIM,
            classes: None,
            label_offset: 0,
            domain: Domain::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes.unwrap_or_else(|| self.kind.default_classes())
    }

    pub fn distribution_id(&self) -> String {
        format!(
            "{}:shift={:.4}:rot={:.4}:noise={:.4}",
            self.kind,
            self.domain.shift_norm(),
            self.domain.rotation,
            self.domain.noise_std
        )
    }
}

/// Generates a dataset; a pure function of `args`.
pub fn gen_task(args: &GenArgs) -> Result<Dataset> {
    if args.n == 0 {
        return Err(Error::domain("a generated task needs n >= 1"));
    }
    if args.dim < 2 {
        return Err(Error::domain("feature dimension must be at least 2"));
    }
    if args.domain.shift.len() > args.dim {
        return Err(Error::domain(format!(
            "shift has {} components for dimension {}",
            args.domain.shift.len(),
            args.dim
        )));
    }
    let noise = args.domain.noise_std;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::domain("noise_std must be finite and non-negative"));
    }
    let classes = args.classes();
    let fixed_binary = matches!(args.kind, TaskKind::TwoMoons | TaskKind::ParityLike);
    if classes < 2 || (fixed_binary && classes != 2) {
        return Err(Error::domain(format!(
            "{} cannot use {classes} classes",
            args.kind
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let task_id: Arc<str> = Arc::from(args.kind.to_string());
    let (sin, cos) = args.domain.rotation.sin_cos();
    let mut samples = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let class = i % classes;
        let (u, v) = base_point(args.kind, class, classes, &mut rng);
        let mut features = Vec::with_capacity(args.dim);
        let nu: f64 = rng.sample(StandardNormal);
        let nv: f64 = rng.sample(StandardNormal);
        let (u, v) = (u + noise * nu, v + noise * nv);
        features.push(cos * u - sin * v);
        features.push(sin * u + cos * v);
        for _ in 2..args.dim {
            let z: f64 = rng.sample(StandardNormal);
            features.push(noise * z);
        }
        for (f, s) in features.iter_mut().zip(&args.domain.shift) {
            *f += s;
        }
        samples.push(Sample {
            features,
            label: args.label_offset + class,
            task_id: Arc::clone(&task_id),
        });
    }
    Dataset::new(
        format!("{}-{}", args.kind, args.seed),
        samples,
        args.kind.to_string(),
        args.distribution_id(),
    )
}

/// Noise-free point of `class` in the task's two informative coordinates.
fn base_point(kind: TaskKind, class: usize, classes: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    match kind {
        TaskKind::GaussianBlobs => {
            let angle = 2.0 * PI * class as f64 / classes as f64 + PI / 4.0;
            (2.5 * angle.cos(), 2.5 * angle.sin())
        }
        TaskKind::TwoMoons => {
            let t = PI * rng.random::<f64>();
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            (1.5 * (x - 0.5), 1.5 * (y - 0.25))
        }
        TaskKind::Spirals => {
            let t: f64 = rng.random::<f64>().sqrt();
            let radius = 0.5 + 4.5 * t;
            let angle = 2.0 * PI * (1.0 * t + class as f64 / classes as f64);
            (radius * angle.cos(), radius * angle.sin())
        }
        TaskKind::ParityLike => {
            let u = rng.random_range(-2.0..2.0);
            let v = rng.random_range(-2.0..2.0);
            let parity = (u > 0.0) ^ (v > 0.0);
            // Resample the quadrant sign so the requested class comes out.
            if usize::from(parity) == class {
                (u, v)
            } else {
                (-u, v)
            }
        }
    }
}

/// Random partition into `parts` near-equal, pairwise-disjoint subsets.
/// Earlier parts receive the remainder; each part keeps original sample order.
pub fn split_disjoint(d: &Dataset, parts: usize, seed: u64) -> Result<Vec<Dataset>> {
    if parts < 2 {
        return Err(Error::domain("split_disjoint needs at least 2 parts"));
    }
    if parts > d.len() {
        return Err(Error::domain(format!(
            "cannot split {} samples into {parts} parts",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = d.len() / parts;
    let extra = d.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        start += size;
        let samples = idx.into_iter().map(|i| d.samples[i].clone()).collect();
        out.push(Dataset {
            name: format!("{}/part{p}", d.name),
            samples,
            task_id: d.task_id.clone(),
            distribution_id: d.distribution_id.clone(),
        });
    }
    Ok(out)
}

/// Deterministic interleaving of several tasks at fixed proportions.
///
/// The output length is the largest `N` such that no task is asked for more
/// samples than it has (`N = min_i |task_i| / p_i`). At every position the task
/// furthest behind its target count `p_i · t` is drawn next, ties going to the
/// lower index. Samples are taken from each task in order and keep their
/// `task_id`.
pub fn make_mixture(tasks: &[Dataset], proportions: &[f64]) -> Result<Dataset> {
    if tasks.len() != proportions.len() {
        return Err(Error::structure(format!(
            "{} tasks but {} proportions",
            tasks.len(),
            proportions.len()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::domain("mixture of zero tasks"));
    }
    if proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::domain("proportions must be finite and non-negative"));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("proportions sum to {total}, not 1")));
    }
    let dims: Vec<_> = tasks.iter().filter_map(|t| t.feature_dim()).collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::structure(
            "mixture tasks have different feature dimensions",
        ));
    }

    let n_out = tasks
        .iter()
        .zip(proportions)
        .filter(|(_, &p)| p > 0.0)
        .map(|(t, &p)| (t.len() as f64 / p + 1e-9).floor() as usize)
        .min()
        .unwrap_or(0);
    let mut taken = vec![0usize; tasks.len()];
    let mut samples = Vec::with_capacity(n_out);
    for t in 1..=n_out {
        let pick = (0..tasks.len())
            .filter(|&i| proportions[i] > 0.0 && taken[i] < tasks[i].len())
            .map(|i| (i, proportions[i] * t as f64 - taken[i] as f64))
            .fold(None::<(usize, f64)>, |best, (i, deficit)| match best {
                Some((_, d)) if d >= deficit => best,
                _ => Some((i, deficit)),
            });
        let Some((i, _)) = pick else { break };
        samples.push(tasks[i].samples[taken[i]].clone());
        taken[i] += 1;
    }

    if tasks.len() == 1 {
        return Ok(Dataset {
            samples,
            ..tasks[0].clone()
        });
    }
    let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    let dists: Vec<&str> = tasks.iter().map(|t| t.distribution_id.as_str()).collect();
    Dataset::new(
        format!("mixture({})", names.join("+")),
        samples,
        "mixture",
        dists.join("+"),
    )
}
