//! Run configuration and the end-to-end ablation pipeline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::Variant;
use crate::geometry::{make_depth_bins, CameraRig, DepthBins, GeometryError, GridSpec};
use crate::metrics::{AblationReport, EvalResult};
use crate::nets::{BevNet, NetError, NetworkSpec};
use crate::synthworld::{derive_seed, Dataset, TeacherCache, WorldParams};
use crate::trainer::{self, streams, EvalSettings, OptimConfig, TrainError, TrainHistory, VariantConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {0:?}: expected KEY=VALUE")]
    Override(String),
    #[error("override {key}: {reason}")]
    Path { key: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 256,
            eval_scenes: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub mount_height: f64,
    pub depth_near: f64,
    pub depth_far: f64,
    pub depth_bins: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 6,
            width: 64,
            height: 64,
            hfov_deg: 75.0,
            mount_height: 1.5,
            depth_near: 1.0,
            depth_far: 35.0,
            depth_bins: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub extent: f64,
    pub resolution: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            extent: 64.0,
            resolution: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    /// Teacher heatmap score above which a peak becomes a cached agent.
    pub threshold: f64,
    pub max_agents: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_agents: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub max_detections: usize,
    pub batch_size: usize,
    pub ego_width: f64,
    pub ego_length: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        Self {
            score_threshold: s.score_threshold,
            max_detections: s.max_detections,
            batch_size: s.batch_size,
            ego_width: s.ego_width,
            ego_length: s.ego_length,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            score_threshold: self.score_threshold,
            max_detections: self.max_detections,
            batch_size: self.batch_size,
            ego_width: self.ego_width,
            ego_length: self.ego_length,
        }
    }
}

/// Everything one experiment needs. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldParams,
    pub data: DataConfig,
    pub rig: RigConfig,
    pub grid: GridConfig,
    pub student: NetworkSpec,
    pub teacher: NetworkSpec,
    pub teacher_optim: OptimConfig,
    pub cache: CacheConfig,
    pub train: VariantConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs"),
            world: WorldParams::default(),
            data: DataConfig::default(),
            rig: RigConfig::default(),
            grid: GridConfig::default(),
            student: NetworkSpec::student(),
            teacher: NetworkSpec::teacher(),
            teacher_optim: OptimConfig {
                epochs: 40,
                base_lr: 1e-3,
                ..OptimConfig::default()
            },
            cache: CacheConfig::default(),
            train: VariantConfig {
                optim: OptimConfig {
                    base_lr: 1e-3,
                    ..OptimConfig::default()
                },
                ..VariantConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Path {
            key: key.into(),
            reason: format!("{p} is not a table"),
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.into()))
}

impl RunConfig {
    /// Parses TOML text and applies `KEY=VALUE` overrides with dotted keys.
    /// Keys not given keep their [`RunConfig::default`] values; unknown keys
    /// are errors.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = toml::Table::try_from(Self::default()).expect("config is always representable");
        merge(&mut table, toml::from_str(text)?);
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig = table.try_into()?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn rig(&self) -> Result<CameraRig, GeometryError> {
        let r = &self.rig;
        CameraRig::surround(r.cameras, r.width, r.height, r.hfov_deg, r.mount_height)
    }

    pub fn bins(&self) -> Result<DepthBins, GeometryError> {
        make_depth_bins(self.rig.depth_near, self.rig.depth_far, self.rig.depth_bins)
    }

    pub fn grid(&self) -> Result<GridSpec, GeometryError> {
        GridSpec::new(self.grid.extent, self.grid.resolution)
    }

    pub fn variant_config(&self, variant: Variant) -> VariantConfig {
        VariantConfig {
            variant,
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    World(#[from] crate::synthworld::WorldError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Scenes for training and held-out evaluation, from separate seed streams.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), RunError> {
    let (rig, grid) = (cfg.rig()?, cfg.grid()?);
    let train = Dataset::generate(cfg.seed, streams::TRAIN_DATA, cfg.data.train_scenes, &cfg.world, &rig, &grid)?;
    let eval = Dataset::generate(cfg.seed, streams::EVAL_DATA, cfg.data.eval_scenes, &cfg.world, &rig, &grid)?;
    Ok((train, eval))
}

pub fn init_net(cfg: &RunConfig, spec: &NetworkSpec) -> Result<BevNet<f32>, RunError> {
    let stream = match spec.role {
        crate::nets::Role::Student => streams::STUDENT_INIT,
        crate::nets::Role::Teacher => streams::TEACHER_INIT,
    };
    Ok(BevNet::new(
        spec,
        &cfg.rig()?,
        &cfg.bins()?,
        &cfg.grid()?,
        derive_seed(cfg.seed, stream, 0),
    )?)
}

pub struct TeacherRun {
    pub net: BevNet<f32>,
    pub history: TrainHistory,
    pub cache: TeacherCache,
    pub eval: EvalResult,
}

pub fn run_teacher(cfg: &RunConfig, train: &Dataset, eval: &Dataset) -> Result<TeacherRun, RunError> {
    let settings = cfg.eval.settings();
    let (net, history) = trainer::train_teacher(init_net(cfg, &cfg.teacher)?, train, &cfg.teacher_optim, cfg.seed, None)?;
    let cache = trainer::build_cache(&net, train, cfg.cache.threshold, cfg.cache.max_agents, settings.batch_size)?;
    let eval = trainer::evaluate(&net, eval, &settings)?;
    Ok(TeacherRun {
        net,
        history,
        cache,
        eval,
    })
}

pub struct VariantRun {
    pub variant: Variant,
    pub net: BevNet<f32>,
    pub history: TrainHistory,
    pub eval: EvalResult,
}

pub fn run_variant(
    cfg: &RunConfig,
    variant: Variant,
    train: &Dataset,
    eval: &Dataset,
    cache: Option<&TeacherCache>,
) -> Result<VariantRun, RunError> {
    let settings = cfg.eval.settings();
    let vc = cfg.variant_config(variant);
    let (net, history) = trainer::train_variant(&vc, init_net(cfg, &cfg.student)?, train, cache, None)?;
    let eval = trainer::evaluate(&net, eval, &settings)?;
    Ok(VariantRun {
        variant,
        net,
        history,
        eval,
    })
}

pub struct Ablation {
    pub teacher: TeacherRun,
    pub variants: Vec<VariantRun>,
    pub report: AblationReport,
}

/// Teacher, cache, then S0–S3 in order on one dataset and seed.
pub fn run_ablation(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<Ablation, RunError> {
    let (train, eval) = datasets(cfg)?;
    progress(&format!("generated {} train / {} eval scenes", train.len(), eval.len()));
    let teacher = run_teacher(cfg, &train, &eval)?;
    progress(&format!("teacher {:?}", teacher.eval));
    let mut variants = Vec::new();
    for v in Variant::ALL {
        let cache = v.uses_teacher().then_some(&teacher.cache);
        let run = run_variant(cfg, v, &train, &eval, cache)?;
        progress(&format!("{v} {:?}", run.eval));
        variants.push(run);
    }
    let report = AblationReport::new(variants.iter().map(|r| (r.variant.to_string(), r.eval)).collect());
    Ok(Ablation {
        teacher,
        variants,
        report,
    })
}
