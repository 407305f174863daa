//! Config-driven experiment pipelines.
//!
//! A run trains two endpoints per repetition, runs the scenario's analysis and
//! writes every artifact below `output_dir`:
//!
//! ```text
//! <output_dir>/
//!   config.toml            resolved config
//!   summary.json           summary statistics, per-repetition values, artifact list
//!   scan*.csv, ...         tables averaged over repetitions
//!   rep-<r>/               checkpoints, training logs and, with more than one
//!                          repetition, the raw per-repetition tables
//! ```
//!
//! Repetition `r` shifts every seed by `r * 1000`. Repetitions run concurrently
//! and write only to their own directory; aggregation happens after all finish.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde_json::json;

use crate::analysis::{
    barrier, compute_cartography, cross_task_scan, knowledge_trace, scan_path, spearman,
    CartographyRecord, ScanResult,
};
use crate::data::{gen_task, make_mixture, split_disjoint, Dataset, DatasetCache, Domain, GenArgs};
use crate::ensemble::{make_division, train_gate, GateVector};
use crate::error::{Error, Result};
use crate::nn::{perturb_init, train, Classifier, TrainConfig, TrainOutput, Tuning};
use crate::objective::{Objective, PointMetrics};
use crate::params::{euclidean_distance, midpoint, Checkpoint, ModuleKind, ParamVector};
use crate::paths::{train_bezier_control, PathSpec};
use crate::table::{Cell, OutputFormat, Table};

pub use config::{
    derive_seed, AnalysisConfig, DataConfig, DataView, EndpointConfig, ExperimentConfig,
    PretrainConfig, Scenario, TargetConfig, REPETITION_SEED_STRIDE,
};

/// Analyses that can be requested directly instead of a scenario's pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Scan,
    Curve,
    Gate,
    Trace,
    Distance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pipeline {
    Pair,
    Cross,
    StepGrid,
    Tunings,
    Pretrain,
    Curve,
    Trace,
    Gate,
    Distance,
}

fn pipeline_for(config: &ExperimentConfig, analysis: Option<Analysis>) -> Result<Pipeline> {
    let crosses = config
        .resolve_endpoints()
        .map(|(a, b)| a.data_view == DataView::Target || b.data_view == DataView::Target)?;
    Ok(match analysis {
        Some(Analysis::Scan) if crosses => Pipeline::Cross,
        Some(Analysis::Scan) => Pipeline::Pair,
        Some(Analysis::Curve) => Pipeline::Curve,
        Some(Analysis::Gate) => Pipeline::Gate,
        Some(Analysis::Trace) => Pipeline::Trace,
        Some(Analysis::Distance) => Pipeline::Distance,
        None => match config.scenario {
            Scenario::DataOrder
            | Scenario::InitNoise
            | Scenario::LearningRate
            | Scenario::BatchSize
            | Scenario::DisjointSplit => Pipeline::Pair,
            Scenario::DomainShift | Scenario::CrossTask => Pipeline::Cross,
            Scenario::TrainingSteps => Pipeline::StepGrid,
            Scenario::TuningMethod => Pipeline::Tunings,
            Scenario::PretrainProxy => Pipeline::Pretrain,
            Scenario::BezierRescue => Pipeline::Curve,
            Scenario::KnowledgeTrace => Pipeline::Trace,
            Scenario::GatedEnsemble => Pipeline::Gate,
            Scenario::DistanceVsSteps => Pipeline::Distance,
        },
    })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub format: OutputFormat,
    /// Run this analysis instead of the scenario's own pipeline.
    pub analysis: Option<Analysis>,
    /// Use these endpoints instead of training them. Forces one repetition.
    pub endpoints: Option<(ParamVector, ParamVector)>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub output_dir: PathBuf,
    pub config_hash: String,
    /// Every written file, in write order.
    pub artifacts: Vec<PathBuf>,
    /// Mean over repetitions of each per-repetition statistic (NaN skipped).
    pub summary: BTreeMap<String, f64>,
    pub per_repetition: Vec<BTreeMap<String, f64>>,
}

impl ExperimentReport {
    /// First artifact whose file name is `name`.
    pub fn artifact(&self, name: &str) -> Option<&Path> {
        self.artifacts
            .iter()
            .find(|p| p.file_name().is_some_and(|f| f == name))
            .map(PathBuf::as_path)
    }

    pub fn stat(&self, key: &str) -> Result<f64> {
        self.summary.get(key).copied().ok_or_else(|| Error::Lookup {
            kind: "summary statistic",
            name: key.to_string(),
        })
    }
}

/// Distance between same-step checkpoints of two runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistancePoint {
    pub step: usize,
    pub distance: f64,
    pub normalized: f64,
}

/// Pairs the checkpoints of two runs by step; the grids must match.
pub fn distance_series(a: &TrainOutput, b: &TrainOutput) -> Result<Vec<DistancePoint>> {
    let steps_a: Vec<usize> = a.checkpoints.iter().map(|(s, _)| *s).collect();
    let steps_b: Vec<usize> = b.checkpoints.iter().map(|(s, _)| *s).collect();
    if steps_a != steps_b {
        return Err(Error::structure(format!(
            "checkpoint grids differ: {steps_a:?} vs {steps_b:?}"
        )));
    }
    a.checkpoints
        .iter()
        .zip(&b.checkpoints)
        .map(|((step, pa), (_, pb))| {
            Ok(DistancePoint {
                step: *step,
                distance: euclidean_distance(pa, pb, false)?,
                normalized: euclidean_distance(pa, pb, true)?,
            })
        })
        .collect()
}

/// Share of consecutive pairs that do not decrease; `None` below two values.
pub fn non_decreasing_fraction(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let ok = values.windows(2).filter(|w| w[1] >= w[0]).count();
    Some(ok as f64 / (values.len() - 1) as f64)
}

/// Trains the first repetition's endpoint pair and returns its distance
/// series without writing anything.
pub fn run_distance_series(config: &ExperimentConfig) -> Result<Vec<DistancePoint>> {
    config.validate()?;
    let ctx = Context::new(config.clone(), 0)?;
    let model = Classifier::new(config.model.clone(), ctx.a.train.tuning)?;
    let backbone = ctx.backbone(&model, ctx.a.train.tuning, None)?;
    let (a, b) = rayon::join(
        || ctx.train_endpoint(&model, &ctx.a, backbone.as_ref()),
        || ctx.train_endpoint(&model, &ctx.b, backbone.as_ref()),
    );
    distance_series(&a?, &b?)
}

pub fn run_scenario(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_with(config, &RunOptions::default())
}

pub fn run_with(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let pipeline = pipeline_for(config, options.analysis)?;
    let mut config = config.clone();
    if options.endpoints.is_some() {
        if matches!(
            pipeline,
            Pipeline::Trace
                | Pipeline::Distance
                | Pipeline::StepGrid
                | Pipeline::Tunings
                | Pipeline::Pretrain
        ) {
            return Err(Error::config(
                "this analysis needs training histories; it cannot start from given endpoints",
            ));
        }
        config.repetitions = 1;
    }
    let root = config.output_dir.clone();
    let hash = config.hash();
    fs::create_dir_all(&root)?;
    let config_path = root.join("config.toml");
    fs::write(&config_path, config.to_toml()?)?;

    let reps: Vec<Result<RepOutput>> = (0..config.repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rep = Rep::new(&config, r, &hash, options)?;
            rep.run(pipeline)?;
            Ok(rep.out)
        })
        .collect();

    let mut outputs = Vec::with_capacity(reps.len());
    let mut failure = None;
    for rep in reps {
        match rep {
            Ok(o) => outputs.push(o),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    if let Some(err) = failure {
        let mut artifacts: Vec<PathBuf> = vec![config_path];
        artifacts.extend(outputs.iter().flat_map(|o| o.artifacts.iter().cloned()));
        if let Error::Stage {
            artifacts: partial, ..
        } = &err
        {
            artifacts.extend(partial.iter().cloned());
        }
        let manifest = json!({
            "config_hash": hash,
            "error": err.to_string(),
            "artifacts": relative(&root, &artifacts),
        });
        fs::write(
            root.join("partial-manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        return Err(err);
    }
    aggregate(&config, &hash, options.format, config_path, outputs)
}

fn relative(root: &Path, paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string())
        .collect()
}

fn aggregate(
    config: &ExperimentConfig,
    hash: &str,
    format: OutputFormat,
    config_path: PathBuf,
    outputs: Vec<RepOutput>,
) -> Result<ExperimentReport> {
    let root = &config.output_dir;
    let mut artifacts = vec![config_path];
    artifacts.extend(outputs.iter().flat_map(|o| o.artifacts.iter().cloned()));

    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), hash.to_string());
    meta.insert("scenario".to_string(), config.scenario.to_string());
    meta.insert("repetitions".to_string(), outputs.len().to_string());
    meta.insert(
        "seeds".to_string(),
        outputs
            .iter()
            .map(|o| o.seeds.as_str())
            .collect::<Vec<_>>()
            .join(" | "),
    );
    let endpoint_files: Vec<String> = outputs
        .iter()
        .flat_map(|o| relative(root, &o.endpoint_files))
        .collect();
    meta.insert("endpoint_files".to_string(), endpoint_files.join(","));

    let mut scans: IndexMap<String, (String, Vec<ScanResult>)> = IndexMap::new();
    let mut tables: IndexMap<String, Vec<Table>> = IndexMap::new();
    for o in &outputs {
        for (stem, label, scan) in &o.scans {
            scans
                .entry(stem.clone())
                .or_insert_with(|| (label.clone(), Vec::new()))
                .1
                .push(scan.clone());
        }
        for t in &o.tables {
            tables.entry(t.name.clone()).or_default().push(t.clone());
        }
    }

    let mut barrier_rows = Vec::new();
    for (stem, (label, runs)) in &scans {
        let avg = ScanResult::average(runs)?;
        let mut table = avg.to_table(stem).with_metadata(&meta);
        table.metadata.remove("repetition");
        artifacts.push(table.save(root, format)?);
        barrier_rows.extend(barrier_rows_for(label, &avg)?);
    }
    if !barrier_rows.is_empty() {
        let mut t = barrier_table(barrier_rows);
        t.metadata = meta.clone();
        artifacts.push(t.save(root, format)?);
    }
    for runs in tables.values() {
        let mut t = Table::average(runs)?.with_metadata(&meta);
        t.metadata.remove("repetition");
        artifacts.push(t.save(root, format)?);
    }

    let keys: Vec<String> = outputs
        .iter()
        .flat_map(|o| o.summary.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let summary: BTreeMap<String, f64> = keys
        .into_iter()
        .map(|k| {
            let vals: Vec<f64> = outputs
                .iter()
                .filter_map(|o| o.summary.get(&k).copied())
                .filter(|v| v.is_finite())
                .collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (k, mean)
        })
        .collect();
    let per_repetition: Vec<BTreeMap<String, f64>> =
        outputs.iter().map(|o| o.summary.clone()).collect();

    let summary_path = root.join("summary.json");
    artifacts.push(summary_path.clone());
    let doc = json!({
        "scenario": config.scenario,
        "config_hash": hash,
        "repetitions": outputs.len(),
        "seeds": outputs.iter().map(|o| o.seeds.clone()).collect::<Vec<_>>(),
        "summary": summary,
        "per_repetition": per_repetition,
        "artifacts": relative(root, &artifacts),
    });
    fs::write(&summary_path, serde_json::to_string_pretty(&doc)? + "\n")?;

    Ok(ExperimentReport {
        scenario: config.scenario,
        output_dir: root.clone(),
        config_hash: hash.to_string(),
        artifacts,
        summary,
        per_repetition,
    })
}

struct BarrierRow {
    label: String,
    dataset: String,
    max_barrier: f64,
    argmax_alpha: f64,
    max_accuracy_drop: f64,
}

fn barrier_rows_for(label: &str, scan: &ScanResult) -> Result<Vec<BarrierRow>> {
    scan.per_dataset
        .keys()
        .map(|ds| {
            let b = barrier(scan, ds)?;
            Ok(BarrierRow {
                label: label.to_string(),
                dataset: ds.clone(),
                max_barrier: b.max_barrier,
                argmax_alpha: b.argmax_alpha,
                max_accuracy_drop: b.max_accuracy_drop,
            })
        })
        .collect()
}

fn barrier_table(rows: Vec<BarrierRow>) -> Table {
    let mut t = Table::new(
        "barrier",
        &[
            "label",
            "dataset",
            "max_barrier",
            "argmax_alpha",
            "max_accuracy_drop",
        ],
    );
    for r in rows {
        t.push(vec![
            r.label.into(),
            r.dataset.into(),
            r.max_barrier.into(),
            r.argmax_alpha.into(),
            r.max_accuracy_drop.into(),
        ]);
    }
    t
}

/// Train/dev/test sets of one repetition.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: Dataset,
    pub source_dev: Dataset,
    pub source_test: Dataset,
    pub target: Option<[Dataset; 3]>,
    pub halves: [Dataset; 2],
}

impl Datasets {
    pub fn build(config: &DataConfig) -> Result<Self> {
        let cache = config.cache_dir.as_ref().map(DatasetCache::new);
        let make = |args: &GenArgs, name: &str| -> Result<Dataset> {
            let d = match &cache {
                Some(c) => c.load_or_generate(args)?,
                None => gen_task(args)?,
            };
            Ok(d.with_name(name))
        };
        let source_args = |purpose: &str, n: usize| GenArgs {
            kind: config.kind,
            n,
            seed: derive_seed(config.seed, purpose),
            dim: config.dim,
            classes: config.classes,
            label_offset: 0,
            domain: Domain {
                noise_std: config.noise_std,
                ..Domain::default()
            },
        };
        let source_train = make(&source_args("source-train", config.n_train), "source-train")?;
        let source_dev = make(&source_args("source-dev", config.n_dev), "source-dev")?;
        let source_test = make(&source_args("source-test", config.n_test), "source-test")?;

        let target = config
            .target
            .as_ref()
            .map(|t| -> Result<[Dataset; 3]> {
                let kind = t.kind.unwrap_or(config.kind);
                let args = |purpose: &str, n: usize| GenArgs {
                    kind,
                    n,
                    seed: derive_seed(config.seed, purpose),
                    dim: config.dim,
                    classes: t.classes.or(if kind == config.kind {
                        config.classes
                    } else {
                        None
                    }),
                    label_offset: t.label_offset,
                    domain: Domain {
                        shift: t.shift.clone(),
                        rotation: t.rotation,
                        noise_std: t.noise_std.unwrap_or(config.noise_std),
                    },
                };
                Ok([
                    make(&args("target-train", config.n_train), "target-train")?,
                    make(&args("target-dev", config.n_dev), "target-dev")?,
                    make(&args("target-test", config.n_test), "target-test")?,
                ])
            })
            .transpose()?;

        let mut halves = split_disjoint(&source_train, 2, derive_seed(config.seed, "halves"))?;
        let h1 = halves.pop().expect("two halves").with_name("half-1");
        let h0 = halves.pop().expect("two halves").with_name("half-0");
        Ok(Datasets {
            source_train,
            source_dev,
            source_test,
            target,
            halves: [h0, h1],
        })
    }

    /// Training and dev data of a view.
    pub fn view(&self, view: DataView) -> Result<(&Dataset, &Dataset)> {
        Ok(match view {
            DataView::Source => (&self.source_train, &self.source_dev),
            DataView::Half0 => (&self.halves[0], &self.source_dev),
            DataView::Half1 => (&self.halves[1], &self.source_dev),
            DataView::Target => {
                let t = self
                    .target
                    .as_ref()
                    .ok_or_else(|| Error::config("no target data configured"))?;
                (&t[0], &t[1])
            }
        })
    }

    pub fn target_test(&self) -> Result<&Dataset> {
        self.target
            .as_ref()
            .map(|t| &t[2])
            .ok_or_else(|| Error::config("no target data configured"))
    }
}

/// Seed-shifted config, resolved endpoints and data of one repetition.
struct Context {
    config: ExperimentConfig,
    a: EndpointConfig,
    b: EndpointConfig,
    data: Datasets,
}

impl Context {
    fn new(base: ExperimentConfig, r: usize) -> Result<Self> {
        let config = base.for_repetition(r);
        let (a, b) = config.resolve_endpoints()?;
        let data = Datasets::build(&config.data)?;
        Ok(Context { config, a, b, data })
    }

    fn seed(&self) -> u64 {
        self.config.base_train.seed
    }

    /// Shared starting point of the backbone, if the endpoints share one.
    fn backbone(
        &self,
        model: &Classifier,
        tuning: Tuning,
        pretrained: Option<&ParamVector>,
    ) -> Result<Option<ParamVector>> {
        if let Some(p) = pretrained {
            return ParamVector::new(model.layout().clone(), p.values().to_vec()).map(Some);
        }
        let fallback = tuning == Tuning::Adapter || self.config.scenario == Scenario::InitNoise;
        let seed = self
            .config
            .shared_backbone_seed
            .or(fallback.then_some(self.config.base_train.seed));
        Ok(seed.map(|s| model.init_params(s)))
    }

    /// Fresh init from the endpoint seed, or the backbone with freshly drawn
    /// adapter and head segments; then optional Gaussian noise.
    fn endpoint_init(
        &self,
        model: &Classifier,
        train: &TrainConfig,
        backbone: Option<&ParamVector>,
    ) -> Result<ParamVector> {
        let fresh = model.init_params(train.seed);
        let init = match backbone {
            None => fresh,
            Some(base) => {
                let mut v = base.clone();
                for seg in model.layout().segments() {
                    if matches!(seg.module_kind, ModuleKind::Adapter | ModuleKind::Head) {
                        v.values_mut()[seg.range()].copy_from_slice(&fresh.values()[seg.range()]);
                    }
                }
                v
            }
        };
        perturb_init(
            &init,
            train.init_noise_std,
            derive_seed(train.seed, "init-noise"),
        )
    }

    fn train_endpoint(
        &self,
        model: &Classifier,
        endpoint: &EndpointConfig,
        backbone: Option<&ParamVector>,
    ) -> Result<TrainOutput> {
        let init = self.endpoint_init(model, &endpoint.train, backbone)?;
        let (data, dev) = self.data.view(endpoint.data_view)?;
        train(model, &endpoint.train, data, &init, Some(dev))
    }

    /// Full-tuning training on the task mixture.
    fn pretrain(&self, p: &PretrainConfig) -> Result<TrainOutput> {
        let data = &self.config.data;
        let mut tasks = vec![gen_task(&GenArgs {
            kind: data.kind,
            n: p.n_per_task,
            seed: derive_seed(data.seed, "pretrain-source"),
            dim: data.dim,
            classes: data.classes,
            label_offset: 0,
            domain: Domain {
                noise_std: data.noise_std,
                ..Domain::default()
            },
        })?];
        if let (true, Some(t)) = (p.include_target, &data.target) {
            let kind = t.kind.unwrap_or(data.kind);
            tasks.push(gen_task(&GenArgs {
                kind,
                n: p.n_per_task,
                seed: derive_seed(data.seed, "pretrain-target"),
                dim: data.dim,
                classes: t.classes.or(if kind == data.kind {
                    data.classes
                } else {
                    None
                }),
                label_offset: t.label_offset,
                domain: Domain {
                    shift: t.shift.clone(),
                    rotation: t.rotation,
                    noise_std: t.noise_std.unwrap_or(data.noise_std),
                },
            })?);
        }
        let share = 1.0 / tasks.len() as f64;
        let mixture = make_mixture(&tasks, &vec![share; tasks.len()])?;
        let steps: Vec<usize> = p.schedule.iter().copied().filter(|&s| s > 0).collect();
        let mut cfg = p.train.clone();
        cfg.tuning = Tuning::Full;
        if let Some(&max) = steps.iter().max() {
            cfg.max_steps = max;
            cfg.checkpoint_every = steps.iter().copied().fold(0, gcd);
        }
        let model = Classifier::new(self.config.model.clone(), Tuning::Full)?;
        let init = model.init_params(cfg.seed);
        train(&model, &cfg, &mixture, &init, None)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Default)]
struct RepOutput {
    artifacts: Vec<PathBuf>,
    endpoint_files: Vec<PathBuf>,
    /// `(file stem, label, scan)`; averaged across repetitions by stem.
    scans: Vec<(String, String, ScanResult)>,
    /// Averaged across repetitions by name.
    tables: Vec<Table>,
    summary: BTreeMap<String, f64>,
    seeds: String,
}

struct Trained {
    a: ParamVector,
    b: ParamVector,
    runs: Option<(TrainOutput, TrainOutput)>,
}

struct Rep<'a> {
    ctx: Context,
    dir: PathBuf,
    meta: BTreeMap<String, String>,
    keep_raw_tables: bool,
    options: &'a RunOptions,
    pretrained: Option<ParamVector>,
    out: RepOutput,
}

impl<'a> Rep<'a> {
    fn new(
        config: &ExperimentConfig,
        r: usize,
        hash: &str,
        options: &'a RunOptions,
    ) -> Result<Self> {
        let dir = config.output_dir.join(format!("rep-{r}"));
        let shifted_seed = config.for_repetition(r).base_train.seed;
        let ctx = Context::new(config.clone(), r).map_err(|e| Error::Stage {
            stage: "data".into(),
            seed: shifted_seed,
            artifacts: Vec::new(),
            source: Box::new(e),
        })?;
        let seeds = format!(
            "a.seed={},a.data_order_seed={},b.seed={},b.data_order_seed={},data.seed={}",
            ctx.a.train.seed,
            ctx.a.train.data_order_seed,
            ctx.b.train.seed,
            ctx.b.train.data_order_seed,
            ctx.config.data.seed
        );
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), hash.to_string());
        meta.insert("scenario".to_string(), config.scenario.to_string());
        meta.insert("repetition".to_string(), r.to_string());
        meta.insert("seeds".to_string(), seeds.clone());
        fs::create_dir_all(&dir)?;
        Ok(Rep {
            ctx,
            dir,
            meta,
            keep_raw_tables: config.repetitions > 1,
            options,
            pretrained: None,
            out: RepOutput {
                seeds,
                ..RepOutput::default()
            },
        })
    }

    fn stage<T>(&self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.staged(stage, f())
    }

    fn staged<T>(&self, stage: &str, result: Result<T>) -> Result<T> {
        result.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                seed: self.ctx.seed(),
                artifacts: self.out.artifacts.clone(),
                source: Box::new(e),
            },
        })
    }

    fn run(&mut self, pipeline: Pipeline) -> Result<()> {
        match pipeline {
            Pipeline::Pair => self.pair(),
            Pipeline::Cross => self.cross(),
            Pipeline::StepGrid => self.step_grid(),
            Pipeline::Tunings => self.tunings(),
            Pipeline::Pretrain => self.pretrain_proxy(),
            Pipeline::Curve => self.curve(),
            Pipeline::Trace => self.trace(),
            Pipeline::Gate => self.gate(),
            Pipeline::Distance => self.distance(),
        }
    }

    fn model(&self, tuning: Tuning) -> Result<Classifier> {
        Classifier::new(self.ctx.config.model.clone(), tuning)
    }

    fn with_tuning(e: &EndpointConfig, tuning: Tuning) -> EndpointConfig {
        let mut e = e.clone();
        e.train.tuning = tuning;
        e
    }

    /// Trains (or takes) both endpoints and writes their checkpoints and logs.
    fn endpoints(
        &mut self,
        model: &Classifier,
        tag: &str,
        pretrained: Option<&ParamVector>,
    ) -> Result<Trained> {
        let tuning = model.tuning();
        let ea = Self::with_tuning(&self.ctx.a, tuning);
        let eb = Self::with_tuning(&self.ctx.b, tuning);
        let shared;
        let pretrained = match pretrained {
            Some(p) => Some(p),
            None => {
                shared = self.pretrained_backbone()?;
                shared.as_ref()
            }
        };
        let trained = if let Some((a, b)) = &self.options.endpoints {
            for p in [a, b] {
                if **p.layout() != **model.layout() {
                    return Err(Error::structure(
                        "given endpoints do not match the model layout",
                    ));
                }
            }
            Trained {
                a: a.clone(),
                b: b.clone(),
                runs: None,
            }
        } else {
            let backbone = self.stage("init", || self.ctx.backbone(model, tuning, pretrained))?;
            let (ra, rb) = rayon::join(
                || {
                    self.stage("train-a", || {
                        self.ctx.train_endpoint(model, &ea, backbone.as_ref())
                    })
                },
                || {
                    self.stage("train-b", || {
                        self.ctx.train_endpoint(model, &eb, backbone.as_ref())
                    })
                },
            );
            let (ra, rb) = (ra?, rb?);
            Trained {
                a: ra.final_params().clone(),
                b: rb.final_params().clone(),
                runs: Some((ra, rb)),
            }
        };
        let written = self.write_endpoints(tag, [&ea, &eb], &trained);
        self.staged("write", written)?;
        Ok(trained)
    }

    fn write_endpoints(
        &mut self,
        tag: &str,
        configs: [&EndpointConfig; 2],
        trained: &Trained,
    ) -> Result<()> {
        {
            for (name, e, params) in [("a", configs[0], &trained.a), ("b", configs[1], &trained.b)]
            {
                let path = self.dir.join(format!("endpoint-{tag}{name}.ckpt"));
                let ckpt = Checkpoint::new(params.clone())
                    .with_seed("init", e.train.seed)
                    .with_seed("data_order", e.train.data_order_seed)
                    .with_meta("config_hash", &self.meta["config_hash"])
                    .with_meta("scenario", self.ctx.config.scenario)
                    .with_meta("endpoint", name)
                    .with_meta("tuning", format!("{:?}", e.train.tuning).to_lowercase())
                    .with_meta(
                        "data_view",
                        serde_json::to_value(e.data_view)?.as_str().unwrap_or(""),
                    );
                let manifest = ckpt.save(&path)?;
                self.out.artifacts.push(path.clone());
                self.out.artifacts.push(manifest);
                self.out.endpoint_files.push(path);
            }
            if let Some((ra, rb)) = &trained.runs {
                for (name, run) in [("a", ra), ("b", rb)] {
                    let t = metrics_table(&format!("endpoint-{tag}{name}.metrics"), run);
                    self.save_raw(t)?;
                }
            }
            Ok(())
        }
    }

    /// Final vector of the configured pretraining run, computed once.
    fn pretrained_backbone(&mut self) -> Result<Option<ParamVector>> {
        if self.pretrained.is_none() {
            if let Some(p) = self.ctx.config.pretrain.clone() {
                let run = self.stage("pretrain", || self.ctx.pretrain(&p))?;
                self.save_raw(metrics_table("pretrain.metrics", &run))?;
                self.pretrained = Some(run.final_params().clone());
            }
        }
        Ok(self.pretrained.clone())
    }

    fn save_raw(&mut self, table: Table) -> Result<()> {
        let t = table.with_metadata(&self.meta);
        let path = t.save(&self.dir, self.options.format)?;
        self.out.artifacts.push(path);
        Ok(())
    }

    /// A table averaged across repetitions; kept per repetition too when
    /// there is more than one.
    fn emit(&mut self, table: Table) -> Result<()> {
        if self.keep_raw_tables {
            self.save_raw(table.clone())?;
        }
        self.out.tables.push(table);
        Ok(())
    }

    fn emit_scan(&mut self, stem: &str, label: &str, mut scan: ScanResult) -> Result<()> {
        scan.endpoint_metadata.extend(self.meta.clone());
        for (ds, curve) in &scan.per_dataset {
            let b = barrier(&scan, ds)?;
            let n = curve.loss.len();
            let s = &mut self.out.summary;
            s.insert(format!("{label}.{ds}.max_barrier"), b.max_barrier);
            s.insert(format!("{label}.{ds}.argmax_alpha"), b.argmax_alpha);
            s.insert(
                format!("{label}.{ds}.max_accuracy_drop"),
                b.max_accuracy_drop,
            );
            s.insert(format!("{label}.{ds}.accuracy_a"), curve.accuracy[0]);
            s.insert(format!("{label}.{ds}.accuracy_b"), curve.accuracy[n - 1]);
            s.insert(format!("{label}.{ds}.loss_a"), curve.loss[0]);
            s.insert(format!("{label}.{ds}.loss_b"), curve.loss[n - 1]);
        }
        if self.keep_raw_tables {
            let t = scan.to_table(stem);
            self.save_raw(t)?;
        }
        self.out
            .scans
            .push((stem.to_string(), label.to_string(), scan));
        Ok(())
    }

    fn n_interior(&self) -> usize {
        self.ctx.config.analysis.n_interior
    }

    fn linear_scan(
        &self,
        model: &Classifier,
        a: &ParamVector,
        b: &ParamVector,
    ) -> Result<ScanResult> {
        self.stage("scan", || {
            let path = PathSpec::linear(a.clone(), b.clone())?;
            scan_path(
                model,
                &path,
                &[&self.ctx.data.source_test],
                self.n_interior(),
            )
        })
    }

    fn pair(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let scan = self.linear_scan(&model, &t.a, &t.b)?;
        self.emit_scan("scan", "linear", scan)
    }

    fn cross(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let (source, _) = self.ctx.data.view(self.ctx.a.data_view)?;
        let (target, _) = self.ctx.data.view(self.ctx.b.data_view)?;
        // Score on the held-out split of each endpoint's distribution.
        let source = if source.name.starts_with("target") {
            self.ctx.data.target_test()?
        } else {
            &self.ctx.data.source_test
        };
        let target = if target.name.starts_with("target") {
            self.ctx.data.target_test()?
        } else {
            &self.ctx.data.source_test
        };
        let scan = self.stage("scan", || {
            let path = PathSpec::linear(t.a.clone(), t.b.clone())?;
            cross_task_scan(&model, &path, source, target, self.n_interior())
        })?;
        let s_acc = &scan.per_dataset["source"].accuracy;
        let t_acc = &scan.per_dataset["target"].accuracy;
        let n = s_acc.len();
        let floor_s = s_acc[0].min(s_acc[n - 1]);
        let floor_t = t_acc[0].min(t_acc[n - 1]);
        let joint_drop = (0..n)
            .map(|i| (floor_s - s_acc[i]).min(floor_t - t_acc[i]))
            .fold(0.0f64, f64::max);
        let nan = f64::NAN;
        let sum = &mut self.out.summary;
        sum.insert(
            "cross.spearman_source_accuracy".into(),
            spearman(&scan.alphas, s_acc).unwrap_or(nan),
        );
        sum.insert(
            "cross.spearman_target_accuracy".into(),
            spearman(&scan.alphas, t_acc).unwrap_or(nan),
        );
        sum.insert("cross.joint_accuracy_drop".into(), joint_drop);
        self.emit_scan("scan", "linear", scan)
    }

    fn step_grid(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let scan = self.linear_scan(&model, &t.a, &t.b)?;
        self.emit_scan("scan", "linear", scan)?;
        let (_, rb) = t.runs.as_ref().expect("trained here");
        let last = self.ctx.b.train.max_steps;
        for (step, p) in &rb.checkpoints {
            if *step == 0 || *step == last {
                continue;
            }
            let scan = self.linear_scan(&model, &t.a, p)?;
            self.emit_scan(&format!("scan-step-{step}"), &format!("step-{step}"), scan)?;
        }
        Ok(())
    }

    fn tunings(&mut self) -> Result<()> {
        for (tuning, tag) in [(Tuning::Full, "full"), (Tuning::Adapter, "adapter")] {
            let model = self.model(tuning)?;
            let t = self.endpoints(&model, &format!("{tag}-"), None)?;
            let scan = self.linear_scan(&model, &t.a, &t.b)?;
            self.emit_scan(&format!("scan-{tag}"), tag, scan)?;
        }
        Ok(())
    }

    fn pretrain_proxy(&mut self) -> Result<()> {
        let p = self.ctx.config.pretrain.clone().unwrap_or_default();
        let run = self.stage("pretrain", || self.ctx.pretrain(&p))?;
        let model = self.model(self.ctx.a.train.tuning)?;
        for &step in &p.schedule {
            let base = run.checkpoint_at(step).cloned().ok_or_else(|| {
                Error::structure(format!("no pretraining checkpoint at step {step}"))
            })?;
            let path = self.dir.join(format!("pretrain-{step}.ckpt"));
            self.stage("write", || {
                let m = Checkpoint::new(base.clone())
                    .with_seed("init", p.train.seed)
                    .with_seed("data_order", p.train.data_order_seed)
                    .with_meta("config_hash", &self.meta["config_hash"])
                    .with_meta("pretrain_step", step)
                    .save(&path)?;
                Ok(m)
            })
            .map(|m| {
                self.out.artifacts.push(path.clone());
                self.out.artifacts.push(m);
            })?;
            let t = self.endpoints(&model, &format!("pretrain-{step}-"), Some(&base))?;
            let scan = self.linear_scan(&model, &t.a, &t.b)?;
            self.emit_scan(
                &format!("scan-pretrain-{step}"),
                &format!("pretrain-{step}"),
                scan,
            )?;
        }
        self.save_raw(metrics_table("pretrain.metrics", &run))
    }

    fn curve(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let linear = self.linear_scan(&model, &t.a, &t.b)?;
        let (train_set, dev_set) = self.ctx.data.view(self.ctx.a.data_view)?;
        let curve_cfg = self.ctx.config.analysis.curve.clone();
        let curve = self.stage("curve", || {
            train_bezier_control(
                &model,
                &t.a,
                &t.b,
                &train_set.samples,
                &dev_set.samples,
                &curve_cfg,
            )
        })?;
        let bezier = self.stage("scan", || {
            let path = PathSpec::bezier(t.a.clone(), curve.control.clone(), t.b.clone())?;
            scan_path(
                &model,
                &path,
                &[&self.ctx.data.source_test],
                self.n_interior(),
            )
        })?;

        let control_path = self.dir.join("bezier-control.ckpt");
        let manifest = self.stage("write", || {
            Checkpoint::new(curve.control.clone())
                .with_seed("curve", curve_cfg.seed)
                .with_meta("config_hash", &self.meta["config_hash"])
                .with_meta("best_step", curve.best_step)
                .save(&control_path)
        })?;
        self.out.artifacts.push(control_path);
        self.out.artifacts.push(manifest);

        let mut history = Table::new("curve-history", &["step", "alpha", "loss"]);
        for h in &curve.history {
            history.push(vec![h.step.into(), h.alpha.into(), h.loss.into()]);
        }
        self.save_raw(history)?;

        let mut columns = vec!["step".to_string(), "mean_dev_loss".to_string()];
        for a in &curve.eval_alphas {
            columns.push(format!("dev_loss@{a}"));
            columns.push(format!("dev_accuracy@{a}"));
        }
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        let mut trace = Table::new("curve-dev-trace", &cols);
        for e in &curve.dev_trace {
            let mut row: Vec<Cell> = vec![e.step.into(), e.mean_loss().into()];
            for p in &e.points {
                row.push(p.loss.into());
                row.push(p.accuracy.into());
            }
            trace.push(row);
        }
        self.emit(trace)?;

        let ds = self.ctx.data.source_test.name.clone();
        let lb = barrier(&linear, &ds)?;
        let bb = barrier(&bezier, &ds)?;
        let acc = &bezier.per_dataset[&ds].accuracy;
        let worse = acc[0].min(acc[acc.len() - 1]);
        let min_acc = acc.iter().copied().fold(f64::INFINITY, f64::min);
        let reduction = if lb.max_barrier > 0.0 {
            1.0 - bb.max_barrier / lb.max_barrier
        } else {
            f64::NAN
        };
        let mut red = Table::new(
            "barrier-reduction",
            &[
                "dataset",
                "linear_max_barrier",
                "bezier_max_barrier",
                "reduction",
                "worse_endpoint_accuracy",
                "bezier_min_accuracy",
            ],
        );
        red.push(vec![
            ds.as_str().into(),
            lb.max_barrier.into(),
            bb.max_barrier.into(),
            reduction.into(),
            worse.into(),
            min_acc.into(),
        ]);
        self.emit(red)?;
        let s = &mut self.out.summary;
        s.insert("curve.reduction".into(), reduction);
        s.insert("curve.accuracy_gap".into(), worse - min_acc);
        s.insert("curve.best_step".into(), curve.best_step as f64);
        self.emit_scan("scan-linear", "linear", linear)?;
        self.emit_scan("scan-bezier", "bezier", bezier)
    }

    fn trace(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let (ra, rb) = t.runs.as_ref().expect("trained here");
        let (source, _) = self.ctx.data.view(self.ctx.a.data_view)?;
        let (target, _) = self.ctx.data.view(self.ctx.b.data_view)?;
        let n_points = self.ctx.config.analysis.n_points;
        let (carto_s, carto_t, trace) = self.stage("trace", || {
            let cs = compute_cartography(&ra.per_epoch_true_probs)?;
            let ct = compute_cartography(&rb.per_epoch_true_probs)?;
            let tr = knowledge_trace(&model, &t.a, &t.b, source, target, n_points, &cs, &ct)?;
            Ok((cs, ct, tr))
        })?;
        self.save_raw(cartography_table("cartography-source", &carto_s))?;
        self.save_raw(cartography_table("cartography-target", &carto_t))?;

        let (jf, cf) = trace.confidence_series_forgotten();
        let (jm, cm) = trace.confidence_series_memorized();
        let s = &mut self.out.summary;
        s.insert(
            "trace.spearman_forgotten_confidence".into(),
            spearman(&jf, &cf).unwrap_or(f64::NAN),
        );
        s.insert(
            "trace.spearman_memorized_confidence".into(),
            spearman(&jm, &cm).unwrap_or(f64::NAN),
        );
        s.insert(
            "trace.source_rememorized".into(),
            trace.source_rememorized as f64,
        );
        s.insert(
            "trace.target_reforgotten".into(),
            trace.target_reforgotten as f64,
        );
        let forgotten: usize = trace.points.iter().map(|p| p.forgotten.len()).sum();
        let memorized: usize = trace.points.iter().map(|p| p.memorized.len()).sum();
        s.insert("trace.forgotten_total".into(), forgotten as f64);
        s.insert("trace.memorized_total".into(), memorized as f64);
        self.emit(trace.to_table("trace"))
    }

    fn gate(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let (train_set, dev_set) = self.ctx.data.view(self.ctx.a.data_view)?;
        let (train_set, dev_set) = (train_set.clone(), dev_set.clone());
        let test = &self.ctx.data.source_test.clone();
        let analysis = self.ctx.config.analysis.clone();

        let mut table = Table::new(
            "gate",
            &[
                "label",
                "groups",
                "best_lr",
                "best_step",
                "dev_loss",
                "test_loss",
                "test_accuracy",
            ],
        );
        let eval = |p: &ParamVector, d: &Dataset| -> Result<PointMetrics> {
            model.evaluate(p, &d.samples)
        };
        let mid = midpoint(&t.a, &t.b)?;
        // (label, (groups, best lr, best step) for trained gates, dev, test)
        type GateRow = (
            String,
            Option<(usize, f64, usize)>,
            PointMetrics,
            PointMetrics,
        );
        let mut rows: Vec<GateRow> = Vec::new();
        for (label, p) in [
            ("endpoint-a", &t.a),
            ("endpoint-b", &t.b),
            ("midpoint", &mid),
        ] {
            rows.push((label.to_string(), None, eval(p, &dev_set)?, eval(p, test)?));
        }
        for strategy in &analysis.strategies {
            let division = make_division(model.layout(), *strategy);
            let res = self.stage("gate", || {
                train_gate(
                    &model,
                    &t.a,
                    &t.b,
                    &train_set.samples,
                    &dev_set.samples,
                    &division,
                    &analysis.gate_lr_grid,
                    &analysis.gate,
                )
            })?;
            let combined = crate::ensemble::gated_combine(&t.a, &t.b, &res.gate)?;
            let path = self.dir.join(format!("gate-{strategy}.toml"));
            self.stage("write", || {
                fs::write(
                    &path,
                    gate_manifest(&res.gate, &self.meta, res.best_lr, res.best_step)?,
                )?;
                Ok(())
            })?;
            self.out.artifacts.push(path);

            let mut trace = Table::new(
                format!("gate-{strategy}-dev-trace"),
                &["learning_rate", "step", "dev_loss", "dev_accuracy"],
            );
            for e in &res.dev_trace {
                trace.push(vec![
                    e.learning_rate.into(),
                    e.step.into(),
                    e.dev.loss.into(),
                    e.dev.accuracy.into(),
                ]);
            }
            self.emit(trace)?;
            rows.push((
                strategy.to_string(),
                Some((division.len(), res.best_lr, res.best_step)),
                PointMetrics {
                    loss: res.best_dev_loss,
                    accuracy: f64::NAN,
                },
                eval(&combined, test)?,
            ));
        }
        for (label, info, dev, test_m) in rows {
            let s = &mut self.out.summary;
            s.insert(format!("{label}.dev_loss"), dev.loss);
            s.insert(format!("{label}.test_loss"), test_m.loss);
            s.insert(format!("{label}.test_accuracy"), test_m.accuracy);
            let (groups, lr, step): (Cell, Cell, Cell) = match info {
                Some((g, lr, step)) => (g.into(), lr.into(), step.into()),
                None => (Cell::Absent, Cell::Absent, Cell::Absent),
            };
            table.push(vec![
                label.into(),
                groups,
                lr,
                step,
                dev.loss.into(),
                test_m.loss.into(),
                test_m.accuracy.into(),
            ]);
        }
        self.emit(table)
    }

    fn distance(&mut self) -> Result<()> {
        let model = self.model(self.ctx.a.train.tuning)?;
        let t = self.endpoints(&model, "", None)?;
        let (ra, rb) = t.runs.as_ref().expect("trained here");
        let series = self.stage("distance", || distance_series(ra, rb))?;
        let mut table = Table::new("distance", &["step", "distance", "normalized_distance"]);
        for p in &series {
            table.push(vec![p.step.into(), p.distance.into(), p.normalized.into()]);
        }
        // The step-0 pair is excluded from the trend: it only reflects the init.
        let trend: Vec<f64> = series
            .iter()
            .filter(|p| p.step > 0)
            .map(|p| p.distance)
            .collect();
        let s = &mut self.out.summary;
        s.insert(
            "distance.non_decreasing_fraction".into(),
            non_decreasing_fraction(&trend).unwrap_or(f64::NAN),
        );
        s.insert("distance.initial".into(), series[0].distance);
        s.insert("distance.final".into(), series[series.len() - 1].distance);
        self.emit(table)
    }
}

fn metrics_table(name: &str, run: &TrainOutput) -> Table {
    let mut t = Table::new(name, &crate::nn::METRICS_HEADER);
    for r in &run.metrics {
        t.push(vec![
            r.step.into(),
            r.train_loss.into(),
            r.train_accuracy.into(),
            r.eval_loss.into(),
            r.eval_accuracy.into(),
        ]);
    }
    t
}

fn cartography_table(name: &str, record: &CartographyRecord) -> Table {
    let mut t = Table::new(name, &["sample", "confidence", "variability"]);
    t.metadata
        .insert("epochs".into(), record.epochs.to_string());
    for (i, s) in record.per_sample.iter().enumerate() {
        t.push(vec![i.into(), s.confidence.into(), s.variability.into()]);
    }
    t
}

fn gate_manifest(
    gate: &GateVector,
    meta: &BTreeMap<String, String>,
    best_lr: f64,
    best_step: usize,
) -> Result<String> {
    let mut text = String::new();
    for (k, v) in meta {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push_str(&format!(
        "# best_lr = {best_lr}\n# best_step = {best_step}\n"
    ));
    text.push_str(&gate.manifest_text()?);
    Ok(text)
}
