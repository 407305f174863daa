use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{TaskKind, DEFAULT_FEATURE_DIM};
use crate::ensemble::{GateTrainConfig, Strategy, DEFAULT_GATE_LR_GRID};
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, TrainConfig, Tuning};
use crate::paths::CurveTrainConfig;

/// Seed distance between repetitions.
pub const REPETITION_SEED_STRIDE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    DataOrder,
    InitNoise,
    TrainingSteps,
    TuningMethod,
    LearningRate,
    BatchSize,
    DisjointSplit,
    DomainShift,
    CrossTask,
    PretrainProxy,
    BezierRescue,
    KnowledgeTrace,
    GatedEnsemble,
    DistanceVsSteps,
}

impl Scenario {
    pub const ALL: [Scenario; 14] = [
        Scenario::DataOrder,
        Scenario::InitNoise,
        Scenario::TrainingSteps,
        Scenario::TuningMethod,
        Scenario::LearningRate,
        Scenario::BatchSize,
        Scenario::DisjointSplit,
        Scenario::DomainShift,
        Scenario::CrossTask,
        Scenario::PretrainProxy,
        Scenario::BezierRescue,
        Scenario::KnowledgeTrace,
        Scenario::GatedEnsemble,
        Scenario::DistanceVsSteps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::DataOrder => "data-order",
            Scenario::InitNoise => "init-noise",
            Scenario::TrainingSteps => "training-steps",
            Scenario::TuningMethod => "tuning-method",
            Scenario::LearningRate => "learning-rate",
            Scenario::BatchSize => "batch-size",
            Scenario::DisjointSplit => "disjoint-split",
            Scenario::DomainShift => "domain-shift",
            Scenario::CrossTask => "cross-task",
            Scenario::PretrainProxy => "pretrain-proxy",
            Scenario::BezierRescue => "bezier-rescue",
            Scenario::KnowledgeTrace => "knowledge-trace",
            Scenario::GatedEnsemble => "gated-ensemble",
            Scenario::DistanceVsSteps => "distance-vs-steps",
        }
    }

    /// Data the first endpoint trains on.
    pub fn base_view(self) -> DataView {
        match self {
            Scenario::DisjointSplit => DataView::Half0,
            _ => DataView::Source,
        }
    }

    pub fn needs_target(self) -> bool {
        matches!(
            self,
            Scenario::DomainShift | Scenario::CrossTask | Scenario::KnowledgeTrace
        )
    }

    /// The single knob endpoint 2 changes when no overrides are given.
    fn default_overrides(self, base: &TrainConfig) -> BTreeMap<String, Value> {
        let (key, value) = match self {
            Scenario::DataOrder | Scenario::TuningMethod | Scenario::GatedEnsemble => (
                "data_order_seed",
                Value::from(base.data_order_seed.wrapping_add(1)),
            ),
            Scenario::InitNoise
            | Scenario::PretrainProxy
            | Scenario::BezierRescue
            | Scenario::DistanceVsSteps => ("seed", Value::from(base.seed.wrapping_add(1))),
            Scenario::TrainingSteps => (
                "max_steps",
                Value::from((base.max_steps / 2).max(base.checkpoint_every)),
            ),
            Scenario::LearningRate => ("learning_rate", Value::from(base.learning_rate * 2.0)),
            Scenario::BatchSize => ("batch_size", Value::from(base.batch_size * 2)),
            Scenario::DisjointSplit => ("data_view", Value::from("half-1")),
            Scenario::DomainShift | Scenario::CrossTask | Scenario::KnowledgeTrace => {
                ("data_view", Value::from("target"))
            }
        };
        BTreeMap::from([(key.to_string(), value)])
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataView {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "half-0")]
    Half0,
    #[serde(rename = "half-1")]
    Half1,
    #[serde(rename = "target")]
    Target,
}

/// Fully resolved settings of one endpoint. Endpoint 2 is endpoint 1 with the
/// variant overrides applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data_view: DataView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    /// Task of the target data; `None` keeps the source task.
    pub kind: Option<TaskKind>,
    pub shift: Vec<f64>,
    pub rotation: f64,
    pub noise_std: Option<f64>,
    pub classes: Option<usize>,
    pub label_offset: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            kind: None,
            shift: vec![2.0, 0.0],
            rotation: 0.6,
            noise_std: None,
            classes: None,
            label_offset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    pub dim: usize,
    pub classes: Option<usize>,
    pub noise_std: f64,
    pub target: Option<TargetConfig>,
    /// Generated datasets are cached here when set.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: TaskKind::GaussianBlobs,
            n_train: 1000,
            n_dev: 300,
            n_test: 1000,
            seed: 0,
            dim: DEFAULT_FEATURE_DIM,
            classes: None,
            noise_std: 0.3,
            target: None,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n_interior: usize,
    /// Points φ_0..φ_{n−1} of the knowledge trace.
    pub n_points: usize,
    pub curve: CurveTrainConfig,
    pub gate: GateTrainConfig,
    pub gate_lr_grid: Vec<f64>,
    pub strategies: Vec<Strategy>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_interior: 24,
            n_points: 6,
            curve: CurveTrainConfig::default(),
            gate: GateTrainConfig::default(),
            gate_lr_grid: DEFAULT_GATE_LR_GRID.to_vec(),
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

/// Full-tuning training on a task mixture that produces the shared backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_per_task: usize,
    /// Mix the target distribution in as well when one is configured.
    pub include_target: bool,
    pub train: TrainConfig,
    /// Checkpoint steps adapted from in the pretrain-proxy scenario.
    pub schedule: Vec<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_per_task: 2000,
            include_target: true,
            train: TrainConfig {
                seed: 7,
                data_order_seed: 7,
                max_steps: 4096,
                checkpoint_every: 64,
                ..TrainConfig::default()
            },
            schedule: vec![64, 256, 1024, 4096],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub base_train: TrainConfig,
    /// Keys of the endpoint config that endpoint 2 changes; empty picks the
    /// scenario's default knob.
    #[serde(default)]
    pub variant_overrides: BTreeMap<String, Value>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    /// Backbone init shared by both endpoints. Adapter tuning and the
    /// init-noise scenario fall back to `base_train.seed` when unset.
    #[serde(default)]
    pub shared_backbone_seed: Option<u64>,
}

fn default_repetitions() -> usize {
    3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Hex digest of the canonical JSON form; output placement is excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Adds `offset` to every seed, including seed-valued overrides.
    pub fn shift_seeds(&mut self, offset: u64) {
        let shift = |s: &mut u64| *s = s.wrapping_add(offset);
        shift(&mut self.base_train.seed);
        shift(&mut self.base_train.data_order_seed);
        shift(&mut self.data.seed);
        shift(&mut self.analysis.curve.seed);
        shift(&mut self.analysis.gate.seed);
        if let Some(s) = self.shared_backbone_seed.as_mut() {
            shift(s);
        }
        if let Some(p) = self.pretrain.as_mut() {
            shift(&mut p.train.seed);
            shift(&mut p.train.data_order_seed);
        }
        for key in ["seed", "data_order_seed"] {
            if let Some(v) = self.variant_overrides.get_mut(key) {
                if let Some(n) = v.as_u64() {
                    *v = Value::from(n.wrapping_add(offset));
                }
            }
        }
    }

    /// The config of repetition `r`.
    pub fn for_repetition(&self, r: usize) -> Self {
        let mut c = self.clone();
        c.shift_seeds(r as u64 * REPETITION_SEED_STRIDE);
        c
    }

    pub fn effective_overrides(&self) -> BTreeMap<String, Value> {
        if self.variant_overrides.is_empty() {
            self.scenario.default_overrides(&self.base_train)
        } else {
            self.variant_overrides.clone()
        }
    }

    /// Resolves both endpoint configs and checks that they differ in exactly
    /// the overridden keys.
    pub fn resolve_endpoints(&self) -> Result<(EndpointConfig, EndpointConfig)> {
        let first = EndpointConfig {
            train: self.base_train.clone(),
            data_view: self.scenario.base_view(),
        };
        let overrides = self.effective_overrides();
        let Value::Object(base) = serde_json::to_value(&first)? else {
            unreachable!("endpoint config serializes to an object")
        };
        let mut varied = base.clone();
        for (key, value) in &overrides {
            if !base.contains_key(key) {
                return Err(Error::config(format!("unknown override key `{key}`")));
            }
            varied.insert(key.clone(), value.clone());
        }
        let second: EndpointConfig = serde_json::from_value(Value::Object(varied))
            .map_err(|e| Error::config(format!("variant overrides: {e}")))?;
        let Value::Object(resolved) = serde_json::to_value(&second)? else {
            unreachable!("endpoint config serializes to an object")
        };
        let changed: BTreeSet<&String> = base
            .iter()
            .filter(|(k, v)| resolved.get(*k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        let named: BTreeSet<&String> = overrides.keys().collect();
        if changed != named {
            return Err(Error::config(format!(
                "endpoints differ in {changed:?} but the overrides name {named:?}"
            )));
        }
        if first.train.tuning != second.train.tuning {
            return Err(Error::config(
                "endpoints must share a tuning method; the tuning-method scenario runs both",
            ));
        }
        Ok((first, second))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be >= 1"));
        }
        self.model.validate()?;
        let (a, b) = self.resolve_endpoints()?;
        a.train.validate()?;
        b.train.validate()?;
        let data = &self.data;
        if data.n_train < 2 || data.n_dev == 0 || data.n_test == 0 {
            return Err(Error::config(
                "data needs n_train >= 2 and non-empty dev/test sets",
            ));
        }
        if data.dim != self.model.input_dim {
            return Err(Error::config(format!(
                "data dim {} does not match model input_dim {}",
                data.dim, self.model.input_dim
            )));
        }
        let source_classes = data.classes.unwrap_or_else(|| data.kind.default_classes());
        let mut needed = source_classes;
        if let Some(t) = &data.target {
            let kind = t.kind.unwrap_or(data.kind);
            let classes = t.classes.unwrap_or_else(|| kind.default_classes());
            needed = needed.max(classes + t.label_offset);
        }
        if needed > self.model.num_classes {
            return Err(Error::config(format!(
                "data uses {needed} labels but the model has {} classes",
                self.model.num_classes
            )));
        }
        let uses_target = [&a, &b].iter().any(|e| e.data_view == DataView::Target);
        if (self.scenario.needs_target() || uses_target) && data.target.is_none() {
            return Err(Error::config(format!(
                "scenario {} needs [data.target]",
                self.scenario
            )));
        }
        match self.scenario {
            Scenario::CrossTask => {
                let t = data.target.as_ref().expect("checked above");
                if t.kind.is_none_or(|k| k == data.kind) {
                    return Err(Error::config(
                        "cross-task needs a target task of another kind",
                    ));
                }
            }
            Scenario::DomainShift | Scenario::KnowledgeTrace => {
                let t = data.target.as_ref().expect("checked above");
                if t.kind.is_some_and(|k| k != data.kind) {
                    return Err(Error::config(format!(
                        "{} keeps the task and shifts the inputs; use cross-task for another task",
                        self.scenario
                    )));
                }
            }
            Scenario::TuningMethod if self.model.adapter.is_none() => {
                return Err(Error::config("tuning-method needs an adapter in [model]"));
            }
            Scenario::PretrainProxy => {
                let schedule = &self.pretrain.clone().unwrap_or_default().schedule;
                if schedule.is_empty() {
                    return Err(Error::config("pretrain schedule is empty"));
                }
            }
            _ => {}
        }
        if a.train.tuning == Tuning::Adapter && self.model.adapter.is_none() {
            return Err(Error::config("adapter tuning needs an adapter in [model]"));
        }
        if self.analysis.n_points < 2 {
            return Err(Error::config("analysis.n_points must be >= 2"));
        }
        self.analysis.curve.validate()?;
        if let Some(p) = &self.pretrain {
            p.train.validate()?;
        }
        Ok(())
    }
}

/// Independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
