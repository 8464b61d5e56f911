//! Detection, forecasting and planning metrics, and the relative-change
//! ablation report.

use std::fmt::Write as _;

use thiserror::Error;

use crate::distill::Variant;
use crate::geometry::OrientedRect;
use crate::nets::HORIZON;
use crate::synthworld::Scene;

/// Center-distance matching thresholds in meters.
pub const MAP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const EGO_WIDTH: f64 = 1.8;
pub const EGO_LENGTH: f64 = 4.5;
pub const CSV_HEADER: &str = "variant,map,min_ade,l2_at_3s,collision_rate,rel_map,rel_min_ade,rel_l2,rel_collision";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("trajectory lengths differ: {pred} vs {gt}")]
    Horizon { pred: usize, gt: usize },
    #[error("trajectory has {len} values, need at least {need}")]
    Short { len: usize, need: usize },
    #[error("no scenes to evaluate")]
    NoScenes,
    #[error("{0} plans for {1} scenes")]
    Count(usize, usize),
    #[error("baseline value is zero; relative change undefined")]
    ZeroBaseline,
    #[error("results csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredCenter {
    pub scene: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtCenter {
    pub scene: usize,
    pub x: f64,
    pub y: f64,
}

/// All-point interpolated AP of greedy score-ordered matching. `None` when
/// there is no ground truth.
pub fn average_precision(preds: &[ScoredCenter], gts: &[GtCenter], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(preds.len());
    for (k, &i) in order.iter().enumerate() {
        let p = &preds[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.scene == p.scene)
            .map(|(j, g)| (j, (g.x - p.x).hypot(g.y - p.y)))
            .filter(|&(_, d)| d <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((j, _)) = best {
            taken[j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        envelope[k] = envelope[k + 1].max(curve[k].1);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(recall, _)) in curve.iter().enumerate() {
        if recall > prev {
            ap += (recall - prev) * envelope[k];
            prev = recall;
        }
    }
    Some(ap)
}

/// Mean AP over `thresholds`; `None` without ground truth.
pub fn map_score(preds: &[ScoredCenter], gts: &[GtCenter], thresholds: &[f64]) -> Option<f64> {
    let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| average_precision(preds, gts, t)).collect();
    aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(MetricError::Horizon {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Average displacement error of the best of `modes`, each a flat
/// `(x, y)` sequence like `gt`.
pub fn min_ade(modes: &[&[f64]], gt: &[f64]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for m in modes {
        check_pair(m, gt)?;
        let steps = gt.len() / 2;
        if steps == 0 {
            return Err(MetricError::Short { len: 0, need: 2 });
        }
        let ade = (0..steps)
            .map(|t| (m[2 * t] - gt[2 * t]).hypot(m[2 * t + 1] - gt[2 * t + 1]))
            .sum::<f64>()
            / steps as f64;
        best = best.min(ade);
    }
    Ok(best)
}

/// Distance between the waypoints at `step` (1-based).
pub fn l2_at_horizon(plan: &[f64], gt: &[f64], step: usize) -> Result<f64> {
    let need = 2 * step;
    for len in [plan.len(), gt.len()] {
        if len < need || step == 0 {
            return Err(MetricError::Short { len, need });
        }
    }
    let i = 2 * (step - 1);
    Ok((plan[i] - gt[i]).hypot(plan[i + 1] - gt[i + 1]))
}

/// Ego footprints along `plan`, heading along each segment from the
/// previous waypoint (the origin before step 1). Zero-length segments keep
/// the previous heading.
pub fn ego_footprints(plan: &[f64], width: f64, length: f64) -> Vec<OrientedRect> {
    let mut prev = [0.0, 0.0];
    let mut yaw = 0.0;
    plan.chunks_exact(2)
        .map(|w| {
            let (dx, dy) = (w[0] - prev[0], w[1] - prev[1]);
            if dx.hypot(dy) > 1e-9 {
                yaw = dy.atan2(dx);
            }
            prev = [w[0], w[1]];
            OrientedRect::new(w[0], w[1], width, length, yaw)
        })
        .collect()
}

pub fn scene_collides(plan: &[f64], scene: &Scene, width: f64, length: f64) -> bool {
    let ego = ego_footprints(plan, width, length);
    scene.agents.iter().any(|a| {
        a.rollout(ego.len())
            .iter()
            .zip(&ego)
            .any(|(p, e)| OrientedRect::new(p.x, p.y, a.w, a.l, p.yaw).intersects(e))
    })
}

/// Fraction of scenes whose plan overlaps any agent at some step 1..=6.
pub fn collision_rate(plans: &[Vec<f64>], scenes: &[Scene], width: f64, length: f64) -> Result<f64> {
    if scenes.is_empty() {
        return Err(MetricError::NoScenes);
    }
    if plans.len() != scenes.len() {
        return Err(MetricError::Count(plans.len(), scenes.len()));
    }
    for p in plans {
        if p.len() < 2 * HORIZON {
            return Err(MetricError::Short {
                len: p.len(),
                need: 2 * HORIZON,
            });
        }
    }
    let hits = plans
        .iter()
        .zip(scenes)
        .filter(|(p, s)| scene_collides(&p[..2 * HORIZON], s, width, length))
        .count();
    Ok(hits as f64 / scenes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Improvement over the baseline in percent; positive is better.
pub fn relative_change(value: f64, baseline: f64, direction: Direction) -> Result<f64> {
    if baseline == 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    Ok(match direction {
        Direction::HigherBetter => (value - baseline) / baseline * 100.0,
        Direction::LowerBetter => (baseline - value) / baseline * 100.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub map: f64,
    pub min_ade: f64,
    pub l2_at_3s: f64,
    pub collision_rate: f64,
    pub n_scenes: usize,
}

impl EvalResult {
    pub const DIRECTIONS: [Direction; 4] = [
        Direction::HigherBetter,
        Direction::LowerBetter,
        Direction::LowerBetter,
        Direction::LowerBetter,
    ];

    pub fn values(&self) -> [f64; 4] {
        [self.map, self.min_ade, self.l2_at_3s, self.collision_rate]
    }

    /// Per-metric improvement over `baseline` in percent. A zero baseline
    /// yields 0 when the value also is zero and NaN otherwise.
    pub fn relative_to(&self, baseline: &EvalResult) -> [f64; 4] {
        let (v, b) = (self.values(), baseline.values());
        std::array::from_fn(|i| match relative_change(v[i], b[i], Self::DIRECTIONS[i]) {
            Ok(r) => r,
            Err(_) if v[i] == b[i] => 0.0,
            Err(_) => f64::NAN,
        })
    }

    /// Metrics where `self` is strictly better than `other`.
    pub fn wins_over(&self, other: &EvalResult) -> [bool; 4] {
        let (a, b) = (self.values(), other.values());
        std::array::from_fn(|i| match Self::DIRECTIONS[i] {
            Direction::HigherBetter => a[i] > b[i],
            Direction::LowerBetter => a[i] < b[i],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub result: EvalResult,
    pub relative: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
}

impl AblationReport {
    /// Relative changes are taken against the `S0` row, or the first row
    /// when there is none.
    pub fn new(results: Vec<(String, EvalResult)>) -> Self {
        let base = results
            .iter()
            .find(|(v, _)| v.eq_ignore_ascii_case(&Variant::S0.to_string()))
            .or(results.first())
            .map(|r| r.1);
        let rows = results
            .into_iter()
            .map(|(variant, result)| ReportRow {
                relative: base.map_or([0.0; 4], |b| result.relative_to(&b)),
                variant,
                result,
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant.eq_ignore_ascii_case(variant))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let v = r.result.values();
            let _ = write!(s, "{}", r.variant);
            for x in v.iter().chain(&r.relative) {
                let _ = write!(s, ",{x:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Reads any CSV with a `variant` column and the four metric columns;
    /// other columns (including stale relative changes) are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(MetricError::Csv {
                line: 1,
                reason: "empty file".into(),
            });
        };
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| {
            cols.iter().position(|c| c.eq_ignore_ascii_case(name)).ok_or_else(|| MetricError::Csv {
                line: 1,
                reason: format!("missing column {name}"),
            })
        };
        let idx = [
            find("variant")?,
            find("map")?,
            find("min_ade")?,
            find("l2_at_3s")?,
            find("collision_rate")?,
        ];
        let mut results = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |k: usize| {
                fields.get(idx[k]).copied().ok_or_else(|| MetricError::Csv {
                    line: i + 1,
                    reason: format!("missing field {}", cols[idx[k]]),
                })
            };
            let num = |k: usize| -> Result<f64> {
                get(k)?.parse().map_err(|e| MetricError::Csv {
                    line: i + 1,
                    reason: format!("{}: {e}", cols[idx[k]]),
                })
            };
            results.push((
                get(0)?.to_string(),
                EvalResult {
                    map: num(1)?,
                    min_ade: num(2)?,
                    l2_at_3s: num(3)?,
                    collision_rate: num(4)?,
                    n_scenes: 0,
                },
            ));
        }
        Ok(Self::new(results))
    }
}

#[cfg(test)]
mod tests;
