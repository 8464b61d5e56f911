//! Distillation losses, salient-region masks and the combined objective.
//!
//! Every loss takes per-sample `f64` slices and returns its value together
//! with the gradient w.r.t. the student input. BEV buffers are laid out
//! `[channels, cells]`, regression maps `[8, cells]`, trajectories as flat
//! `(x, y)` pairs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GridSpec, LaneBand, OrientedRect};

/// Additive smoothing applied to normalized heatmaps before the KL term.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("{loss}: shape mismatch, student {student} vs teacher {teacher}")]
    Shape {
        loss: &'static str,
        student: usize,
        teacher: usize,
    },
    #[error("{0}: heatmap sums to zero")]
    ZeroHeatmap(&'static str),
    #[error("{0}: heatmap has a negative or non-finite entry")]
    InvalidHeatmap(&'static str),
    #[error("adaptive_kd: region mask is empty")]
    EmptyMask,
    #[error("negative loss weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("unknown variant {0:?} (expected s0, s1, s2 or s3)")]
    UnknownVariant(String),
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;

/// A loss value and its gradient w.r.t. the student input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(loss: &'static str, s: &[f64], t: &[f64]) -> Result<()> {
    if s.len() != t.len() {
        return Err(DistillError::Shape {
            loss,
            student: s.len(),
            teacher: t.len(),
        });
    }
    Ok(())
}

/// Mean over cells of the squared channel-wise distance.
pub fn feat_kd(student: &[f64], teacher: &[f64], channels: usize) -> Result<LossGrad> {
    check_len("feat_kd", student, teacher)?;
    let cells = student.len() / channels.max(1);
    let n = cells.max(1) as f64;
    let mut value = 0.0;
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let d = s - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Masked version of [`feat_kd`] averaged over the `|F|` marked cells.
pub fn adaptive_kd(student: &[f64], teacher: &[f64], channels: usize, mask: &RegionMask) -> Result<LossGrad> {
    check_len("adaptive_kd", student, teacher)?;
    if student.len() != channels * mask.cells.len() {
        return Err(DistillError::Shape {
            loss: "adaptive_kd",
            student: student.len(),
            teacher: channels * mask.cells.len(),
        });
    }
    let f = mask.count();
    if f == 0 {
        return Err(DistillError::EmptyMask);
    }
    let n = f as f64;
    let cells = mask.cells.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; student.len()];
    for ch in 0..channels {
        for (c, _) in mask.cells.iter().enumerate().filter(|(_, &m)| m) {
            let i = ch * cells + c;
            let d = student[i] - teacher[i];
            value += d * d;
            grad[i] = 2.0 * d / n;
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

fn normalize(loss: &'static str, h: &[f64]) -> Result<(Vec<f64>, f64)> {
    if h.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(DistillError::InvalidHeatmap(loss));
    }
    let sum: f64 = h.iter().sum();
    if sum <= 0.0 {
        return Err(DistillError::ZeroHeatmap(loss));
    }
    let z = 1.0 + h.len() as f64 * KL_EPS;
    Ok((h.iter().map(|&v| (v / sum + KL_EPS) / z).collect(), sum))
}

/// Spatially normalized heatmaps, `P = (h/Σh + ε)/(1 + Nε)`.
pub fn heatmap_distribution(h: &[f64]) -> Result<Vec<f64>> {
    Ok(normalize("heatmap_distribution", h)?.0)
}

/// `KL(P_T ‖ P_S)` between spatially normalized heatmaps.
pub fn det_kd(student: &[f64], teacher: &[f64]) -> Result<LossGrad> {
    check_len("det_kd", student, teacher)?;
    let (ps, s_sum) = normalize("det_kd", student)?;
    let (pt, _) = normalize("det_kd", teacher)?;
    Ok(kl_with_grad(&ps, &pt, student, s_sum))
}

/// KL between two already-normalized distributions.
pub fn kl_divergence(p_teacher: &[f64], p_student: &[f64]) -> f64 {
    p_teacher
        .iter()
        .zip(p_student)
        .map(|(&t, &s)| kl_term(t, s))
        .sum()
}

/// `t·ln(t/s) − t + s`, which sums to the KL when both sides sum to one and
/// is nonnegative term by term.
fn kl_term(t: f64, s: f64) -> f64 {
    if t == 0.0 {
        return s;
    }
    let d = s / t - 1.0;
    (t * (d - d.ln_1p())).max(0.0)
}

fn kl_with_grad(ps: &[f64], pt: &[f64], h: &[f64], sum: f64) -> LossGrad {
    let z = 1.0 + h.len() as f64 * KL_EPS;
    let value = kl_divergence(pt, ps);
    // dKL/dh_v = −(1/z)·[T_v/(P_v·S) − Σ_u T_u·h_u/(P_u·S²)]
    let ratio: Vec<f64> = pt.iter().zip(ps).map(|(&t, &p)| t / p).collect();
    let cross: f64 = ratio.iter().zip(h).map(|(&r, &hu)| r * hu).sum::<f64>() / (sum * sum);
    let grad = ratio.iter().map(|&r| -(r / sum - cross) / z).collect();
    LossGrad { value, grad }
}

/// Mean over foreground cells of the channel-summed L1 distance.
pub fn bbox_kd(student: &[f64], teacher: &[f64], channels: usize, foreground: &[usize]) -> Result<LossGrad> {
    check_len("bbox_kd", student, teacher)?;
    let mut grad = vec![0.0; student.len()];
    if foreground.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let cells = student.len() / channels.max(1);
    let n = foreground.len() as f64;
    let mut value = 0.0;
    for &c in foreground {
        if c >= cells {
            return Err(DistillError::Shape {
                loss: "bbox_kd",
                student: cells,
                teacher: c + 1,
            });
        }
        for ch in 0..channels {
            let i = ch * cells + c;
            let d = student[i] - teacher[i];
            value += d.abs();
            grad[i] += d.signum() * f64::from(d != 0.0) / n;
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// `(1/A) Σ_a Σ_t ‖x_S − x_T‖²` over index-aligned forecasts `[A, 12]`.
pub fn mot_kd(student: &[f64], teacher: &[f64], agents: usize) -> Result<LossGrad> {
    check_len("mot_kd", student, teacher)?;
    if agents == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad: vec![0.0; student.len()],
        });
    }
    let a = agents as f64;
    let mut value = 0.0;
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let d = s - t;
            value += d * d;
            2.0 * d / a
        })
        .collect();
    Ok(LossGrad { value: value / a, grad })
}

/// `Σ_t ‖τ_S − τ_T‖²`, summed over the horizon without averaging.
pub fn plan_kd(student: &[f64], teacher: &[f64]) -> Result<LossGrad> {
    check_len("plan_kd", student, teacher)?;
    let mut value = 0.0;
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let d = s - t;
            value += d * d;
            2.0 * d
        })
        .collect();
    Ok(LossGrad { value, grad })
}

/// Salient BEV pillars, row-major over the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub resolution: usize,
    pub cells: Vec<bool>,
}

impl RegionMask {
    pub fn empty(resolution: usize) -> Self {
        Self {
            resolution,
            cells: vec![false; resolution * resolution],
        }
    }

    pub fn full(resolution: usize) -> Self {
        Self {
            resolution,
            cells: vec![true; resolution * resolution],
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.resolution + col]
    }

    pub fn union(&mut self, other: &RegionMask) {
        for (a, &b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= b;
        }
    }

    /// Marks every cell within Chebyshev distance `radius` of a marked cell.
    pub fn dilate(&self, radius: usize) -> Self {
        let r = self.resolution;
        let mut out = Self::empty(r);
        for row in 0..r {
            for col in 0..r {
                if !self.get(row, col) {
                    continue;
                }
                for rr in row.saturating_sub(radius)..=(row + radius).min(r - 1) {
                    for cc in col.saturating_sub(radius)..=(col + radius).min(r - 1) {
                        out.cells[rr * r + cc] = true;
                    }
                }
            }
        }
        out
    }
}

/// Cells whose center lies inside `rect`, plus the cell holding its center.
pub fn footprint_cells(rect: &OrientedRect, grid: &GridSpec) -> RegionMask {
    let r = grid.resolution;
    let mut m = RegionMask::empty(r);
    for row in 0..r {
        for col in 0..r {
            let (x, y) = grid.cell_center(row, col);
            if rect.contains(x, y) {
                m.cells[row * r + col] = true;
            }
        }
    }
    if let Some((row, col)) = grid.cell_of(rect.cx, rect.cy) {
        m.cells[row * r + col] = true;
    }
    m
}

/// Union of agent footprints dilated by one cell and the lane band cells.
pub fn build_region_mask(footprints: &[OrientedRect], lane: Option<&LaneBand>, grid: &GridSpec) -> RegionMask {
    let r = grid.resolution;
    let mut agents = RegionMask::empty(r);
    for f in footprints {
        agents.union(&footprint_cells(f, grid));
    }
    let mut mask = agents.dilate(1);
    if let Some(lane) = lane {
        for row in 0..r {
            for col in 0..r {
                let (x, y) = grid.cell_center(row, col);
                if lane.contains(x, y) {
                    mask.cells[row * r + col] = true;
                }
            }
        }
    }
    mask
}

/// Loss weights of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub feat: f64,
    pub det: f64,
    /// Box-regression weight; `None` shares the detection weight.
    pub bbox: Option<f64>,
    pub mot: f64,
    pub plan: f64,
    pub adapt: f64,
    /// Whether the feature-only variant also keeps the region-masked term.
    pub s1_adapt: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feat: 1.0,
            det: 0.2,
            bbox: None,
            mot: 0.5,
            plan: 0.5,
            adapt: 0.5,
            s1_adapt: true,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            feat: 0.0,
            det: 0.0,
            bbox: None,
            mot: 0.0,
            plan: 0.0,
            adapt: 0.0,
            s1_adapt: true,
        }
    }

    pub fn bbox_weight(&self) -> f64 {
        self.bbox.unwrap_or(self.det)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("feat", self.feat),
            ("det", self.det),
            ("bbox", self.bbox_weight()),
            ("mot", self.mot),
            ("plan", self.plan),
            ("adapt", self.adapt),
        ] {
            if !(value >= 0.0) {
                return Err(DistillError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S0,
    S1,
    S2,
    S3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::S0, Variant::S1, Variant::S2, Variant::S3];

    pub fn uses_teacher(self) -> bool {
        self != Variant::S0
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::S0 => "S0",
            Variant::S1 => "S1",
            Variant::S2 => "S2",
            Variant::S3 => "S3",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = DistillError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s0" => Ok(Variant::S0),
            "s1" => Ok(Variant::S1),
            "s2" => Ok(Variant::S2),
            "s3" => Ok(Variant::S3),
            _ => Err(DistillError::UnknownVariant(s.into())),
        }
    }
}

/// Per-term coefficients after variant masking.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Coefficients {
    pub feat: f64,
    pub det: f64,
    pub bbox: f64,
    pub mot: f64,
    pub plan: f64,
    pub adapt: f64,
}

impl Coefficients {
    pub fn new(w: &LossWeights, variant: Variant) -> Result<Self> {
        w.validate()?;
        let feature = matches!(variant, Variant::S1 | Variant::S3);
        let output = matches!(variant, Variant::S2 | Variant::S3);
        let adapt = variant == Variant::S3 || (variant == Variant::S1 && w.s1_adapt);
        let on = |keep: bool, v: f64| if keep { v } else { 0.0 };
        Ok(Self {
            feat: on(feature, w.feat),
            det: on(output, w.det),
            bbox: on(output, w.bbox_weight()),
            mot: on(output, w.mot),
            plan: on(output, w.plan),
            adapt: on(adapt, w.adapt),
        })
    }
}

/// Raw distillation term values for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KdTerms {
    pub feat: f64,
    pub det: f64,
    pub bbox: f64,
    pub mot: f64,
    pub plan: f64,
    pub adapt: f64,
}

/// Component losses as they enter the objective; masked-out terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gt: f64,
    pub feat: f64,
    pub det: f64,
    pub bbox: f64,
    pub mot: f64,
    pub plan: f64,
    pub adapt: f64,
    pub total: f64,
}

/// `L_GT + λ_feat·L_feat + λ_det·L_det + λ_bbox·L_bbox + λ_mot·L_mot +
/// λ_plan·L_plan + λ_adapt·L_adapt` with the variant's masking.
pub fn total_loss(gt: f64, kd: &KdTerms, weights: &LossWeights, variant: Variant) -> Result<LossBreakdown> {
    let c = Coefficients::new(weights, variant)?;
    let keep = |coef: f64, v: f64| if coef == 0.0 { 0.0 } else { v };
    let mut b = LossBreakdown {
        gt,
        feat: keep(c.feat, kd.feat),
        det: keep(c.det, kd.det),
        bbox: keep(c.bbox, kd.bbox),
        mot: keep(c.mot, kd.mot),
        plan: keep(c.plan, kd.plan),
        adapt: keep(c.adapt, kd.adapt),
        total: 0.0,
    };
    b.total = b.weighted_total(&c);
    Ok(b)
}

impl LossBreakdown {
    pub fn weighted_total(&self, c: &Coefficients) -> f64 {
        self.gt
            + c.feat * self.feat
            + c.det * self.det
            + c.bbox * self.bbox
            + c.mot * self.mot
            + c.plan * self.plan
            + c.adapt * self.adapt
    }
}
