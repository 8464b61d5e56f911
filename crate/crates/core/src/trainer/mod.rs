//! Ground-truth loss, AdamW, the warmup-cosine schedule and the training
//! loops for the teacher and the student variants.

mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{ParamSet, Scalar};
use crate::distill::{DistillError, LossBreakdown, LossWeights, Variant};
use crate::metrics::EvalResult;
use crate::nets::{NetError, REG_CHANNELS, TRAJ_DIM, TRAJ_SCALE};
use crate::synthworld::{Targets, WorldError};

pub use run::{build_cache, evaluate, train_teacher, train_variant, EvalSettings};

/// Seed streams split off the top-level seed.
pub mod streams {
    pub const TRAIN_DATA: u64 = 0;
    pub const EVAL_DATA: u64 = 1;
    pub const STUDENT_INIT: u64 = 2;
    pub const TEACHER_INIT: u64 = 3;
    pub const STUDENT_BATCHES: u64 = 4;
    pub const TEACHER_BATCHES: u64 = 5;
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning rate schedule: {0}")]
    Schedule(String),
    #[error("non-finite gradient in {param} at index {index}")]
    NonFiniteGrad { param: String, index: usize },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("{0}")]
    Shape(String),
    #[error("teacher cache does not match the dataset: {0}")]
    CacheMismatch(String),
    #[error("variant {0} needs a teacher cache")]
    MissingCache(Variant),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `floor_lr`.
pub fn lr_at(step: usize, s: &ScheduleSpec) -> Result<f64> {
    if s.warmup_steps >= s.total_steps {
        return Err(TrainError::Schedule(format!(
            "warmup {} must be below total {}",
            s.warmup_steps, s.total_steps
        )));
    }
    if step > s.total_steps {
        return Err(TrainError::Schedule(format!("step {step} beyond total {}", s.total_steps)));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let phase = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(s.floor_lr + 0.5 * (s.base_lr - s.floor_lr) * (1.0 + (std::f64::consts::PI * phase).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new<T: Scalar>(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One decoupled-decay AdamW update from the gradients stored in `params`.
pub fn adamw_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut OptimState, lr: f64, hp: &AdamW) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(TrainError::Schedule(format!("learning rate {lr}")));
    }
    if state.m.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "optimizer holds {} tensors, network {}",
            state.m.len(),
            params.len()
        )));
    }
    for p in params.iter() {
        if let Some((index, _)) = p.grad.first_non_finite() {
            return Err(TrainError::NonFiniteGrad {
                param: p.name.clone(),
                index,
            });
        }
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data().to_vec();
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.to_f64();
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let (mh, vh) = (*m / c1, *v / c2);
            let x = w.to_f64();
            *w = T::from_f64(x - lr * mh / (vh.sqrt() + hp.eps) - lr * hp.weight_decay * x);
        }
    }
    Ok(())
}

/// Components of the ground-truth loss and its gradients for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GtLoss {
    pub heatmap: f64,
    pub regression: f64,
    pub forecast: f64,
    pub plan: f64,
    pub value: f64,
    /// Gradient with respect to the heatmap logits.
    pub d_heat_logit: Vec<f64>,
    pub d_regression: Vec<f64>,
    pub d_forecast: Vec<f64>,
    pub d_plan: Vec<f64>,
}

/// Unit-weight sum of: heatmap BCE summed over cells and divided by the
/// number of agent cells (at least 1); L1 over the regression channels,
/// averaged over agent cells; forecast MSE over agents and steps; plan MSE.
/// Trajectory errors are measured in units of [`TRAJ_SCALE`] meters.
///
/// `heat` holds sigmoid scores; `forecast` holds one row of 12 per target
/// agent, in target order.
pub fn gt_loss(heat: &[f64], regression: &[f64], forecast: &[f64], plan: &[f64], t: &Targets) -> Result<GtLoss> {
    let cells = t.heatmap.len();
    let shape = |name: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(TrainError::Shape(format!("{name}: {got} values, expected {want}")))
        }
    };
    shape("heatmap", heat.len(), cells)?;
    shape("regression", regression.len(), REG_CHANNELS * cells)?;
    shape("forecast", forecast.len(), TRAJ_DIM * t.agents.len())?;
    shape("plan", plan.len(), TRAJ_DIM)?;

    let norm = t.foreground.len().max(1) as f64;
    let mut heatmap = 0.0;
    let mut d_heat_logit = vec![0.0; cells];
    for ((&p, &y), d) in heat.iter().zip(&t.heatmap).zip(&mut d_heat_logit) {
        let pc = p.clamp(1e-12, 1.0 - 1e-12);
        heatmap -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        *d = (p - y) / norm;
    }
    heatmap /= norm;

    let mut reg = 0.0;
    let mut d_regression = vec![0.0; regression.len()];
    if !t.foreground.is_empty() {
        let n = t.foreground.len() as f64;
        for ch in 0..REG_CHANNELS {
            for &i in &t.foreground {
                let k = ch * cells + i;
                let e = regression[k] - t.regression[k];
                reg += e.abs() / n;
                d_regression[k] = e.signum() / n;
            }
        }
    }

    let mut fc = 0.0;
    let mut d_forecast = vec![0.0; forecast.len()];
    if !t.agents.is_empty() {
        let n = forecast.len() as f64;
        for (a, target) in t.agents.iter().enumerate() {
            for k in 0..TRAJ_DIM {
                let i = a * TRAJ_DIM + k;
                let e = (forecast[i] - target.future[k]) / TRAJ_SCALE;
                fc += e * e / n;
                d_forecast[i] = 2.0 * e / (n * TRAJ_SCALE);
            }
        }
    }

    let mut pl = 0.0;
    let mut d_plan = vec![0.0; TRAJ_DIM];
    for k in 0..TRAJ_DIM {
        let e = (plan[k] - t.plan[k]) / TRAJ_SCALE;
        pl += e * e / TRAJ_DIM as f64;
        d_plan[k] = 2.0 * e / (TRAJ_DIM as f64 * TRAJ_SCALE);
    }

    Ok(GtLoss {
        heatmap,
        regression: reg,
        forecast: fc,
        plan: pl,
        value: heatmap + reg + fc + pl,
        d_heat_logit,
        d_regression,
        d_forecast,
        d_plan,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub floor_lr: f64,
    /// Warmup length in epochs.
    pub warmup_epochs: usize,
    pub adamw: AdamW,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            base_lr: 2e-4,
            floor_lr: 0.0,
            warmup_epochs: 1,
            adamw: AdamW::default(),
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self, samples: usize) -> Result<ScheduleSpec> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        let per_epoch = samples.div_ceil(self.batch_size);
        Ok(ScheduleSpec {
            base_lr: self.base_lr,
            warmup_steps: per_epoch * self.warmup_epochs,
            total_steps: per_epoch * self.epochs,
            floor_lr: self.floor_lr,
        })
    }
}

/// One student training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub variant: Variant,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    /// Taken from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            variant: Variant::S3,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            seed: 7,
            manifest: None,
            cache: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// Held-out metrics after each epoch, when an eval set is given.
    pub epochs: Vec<EvalResult>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,l_gt,l_feat,l_det,l_bbox,l_mot,l_plan,l_adapt,total\n");
        for r in &self.steps {
            let l = &r.loss;
            s += &format!(
                "{},{:e},{},{},{},{},{},{},{},{}\n",
                r.step, r.lr, l.gt, l.feat, l.det, l.bbox, l.mot, l.plan, l.adapt, l.total
            );
        }
        s
    }
}
