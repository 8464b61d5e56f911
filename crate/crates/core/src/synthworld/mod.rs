//! Procedural driving scenes: a curved lane through the ego position, agents
//! on and beside it, and a scripted ego controller that follows the lane.

pub mod cache;
pub mod dataset;
pub mod render;
pub mod targets;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{LaneBand, OrientedRect};
use crate::nets::HORIZON;

pub use cache::{read_cache, write_cache, CachedAgent, TeacherCache, TeacherSample};
pub use dataset::{derive_seed, parse_manifest, Dataset, Sample};
pub use render::rasterize_views;
pub use targets::{make_targets, AgentTarget, Targets};

/// Seconds per trajectory step (2 Hz).
pub const DT: f64 = 0.5;
/// Center-to-center distance the ego controller keeps to its lead.
pub const FOLLOW_DISTANCE: f64 = 7.0;
pub const HEADWAY: f64 = 1.5;
const MAX_ATTEMPTS: usize = 100;
/// Keep-out box around the ego vehicle at t = 0.
const EGO_CLEARANCE: OrientedRect = OrientedRect {
    cx: 0.0,
    cy: 0.0,
    width: 2.4,
    length: 6.0,
    yaw: 0.0,
};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world parameters: {0}")]
    Params(String),
    #[error("could not place agent {agent} after {attempts} attempts (seed {seed})")]
    Placement { seed: u64, agent: usize, attempts: usize },
    #[error("horizon must be {HORIZON} steps, got {0}")]
    Horizon(usize),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("cache {0}")]
    Format(#[from] crate::binio::FormatError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub min_agents: usize,
    pub max_agents: usize,
    /// Side of the square (meters, ego-centered) agents are placed in.
    pub extent: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_curvature: f64,
    pub lane_half_width: f64,
    /// Chance that a slow lead vehicle sits just ahead of the ego.
    pub lead_probability: f64,
    pub ego_speed: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            min_agents: 2,
            max_agents: 8,
            extent: 64.0,
            min_speed: 2.0,
            max_speed: 7.0,
            max_curvature: 0.03,
            lane_half_width: 2.0,
            lead_probability: 0.6,
            ego_speed: 5.0,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WorldError::Params(m));
        if self.min_agents > self.max_agents {
            return bad(format!("agent range [{}, {}]", self.min_agents, self.max_agents));
        }
        if !(self.extent >= 24.0 && self.extent.is_finite()) {
            return bad(format!("extent {} must be at least 24 m", self.extent));
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return bad(format!("speed range [{}, {}]", self.min_speed, self.max_speed));
        }
        if !(self.max_curvature >= 0.0 && self.lane_half_width > 0.0 && self.ego_speed >= 0.0) {
            return bad("curvature, lane width and ego speed must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.lead_probability) {
            return bad(format!("lead probability {}", self.lead_probability));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    ConstantVelocity { vx: f64, vy: f64 },
    /// Speed along the heading and heading rate (rad/s).
    ConstantTurn { speed: f64, yaw_rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub motion: Motion,
}

impl Agent {
    pub fn rect(&self) -> OrientedRect {
        OrientedRect::new(self.x, self.y, self.w, self.l, self.yaw)
    }

    pub fn velocity(&self) -> (f64, f64) {
        match self.motion {
            Motion::ConstantVelocity { vx, vy } => (vx, vy),
            Motion::ConstantTurn { speed, .. } => (speed * self.yaw.cos(), speed * self.yaw.sin()),
        }
    }

    /// Poses at steps `1..=steps`. Constant-turn steps move `speed·DT` along
    /// the mid-step heading, so every step covers exactly `speed·DT`.
    pub fn rollout(&self, steps: usize) -> Vec<Pose> {
        let mut p = Pose {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
        };
        (0..steps)
            .map(|k| {
                match self.motion {
                    Motion::ConstantVelocity { vx, vy } => {
                        let t = (k + 1) as f64 * DT;
                        p = Pose {
                            x: self.x + vx * t,
                            y: self.y + vy * t,
                            yaw: self.yaw,
                        };
                    }
                    Motion::ConstantTurn { speed, yaw_rate } => {
                        let mid = p.yaw + 0.5 * yaw_rate * DT;
                        p.x += speed * DT * mid.cos();
                        p.y += speed * DT * mid.sin();
                        p.yaw += yaw_rate * DT;
                    }
                }
                p
            })
            .collect()
    }
}

/// Arc of constant curvature through the origin, heading +x at `s = 0`.
pub fn lane_point(curvature: f64, s: f64) -> Pose {
    if curvature.abs() < 1e-9 {
        return Pose { x: s, y: 0.0, yaw: 0.0 };
    }
    let th = curvature * s;
    Pose {
        x: th.sin() / curvature,
        y: (1.0 - th.cos()) / curvature,
        yaw: th,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub curvature: f64,
    pub lane: LaneBand,
    pub agents: Vec<Agent>,
    /// Arc-length start and speed of the agents driving along the lane.
    pub lane_agents: Vec<(usize, f64, f64)>,
    /// Ego waypoints for steps 1..=6.
    pub ego_plan: Vec<[f64; 2]>,
}

impl Scene {
    /// Ground-truth agent poses at steps 1..=6.
    pub fn futures(&self) -> Vec<Vec<Pose>> {
        self.agents.iter().map(|a| a.rollout(HORIZON)).collect()
    }
}

fn placement_ok(rect: &OrientedRect, placed: &[Agent], half: f64) -> bool {
    let inflated = OrientedRect {
        width: rect.width + 1.0,
        length: rect.length + 1.0,
        ..*rect
    };
    rect.corners().iter().all(|c| c[0].abs() < half && c[1].abs() < half)
        && !inflated.intersects(&EGO_CLEARANCE)
        && placed.iter().all(|a| !inflated.intersects(&a.rect()))
}

/// Deterministic in `(seed, params)`; agents never overlap at t = 0.
pub fn gen_scene(seed: u64, params: &WorldParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kmax = params.max_curvature;
    let curvature = if kmax > 0.0 { rng.random_range(-kmax..=kmax) } else { 0.0 };
    let reach = params.extent;
    let steps = (2.0 * reach) as usize;
    let centerline = (0..=steps)
        .map(|i| {
            let p = lane_point(curvature, -reach + i as f64);
            [p.x, p.y]
        })
        .collect();
    let lane = LaneBand {
        centerline,
        half_width: params.lane_half_width,
    };

    let n = rng.random_range(params.min_agents..=params.max_agents);
    let half = params.extent / 2.0;
    let far = (half - 3.0).min(30.0);
    let lane_slots = (((far - 8.0) / 6.0) as usize).clamp(1, 3);
    let n_lane = if n == 0 { 0 } else { rng.random_range(0..=n.min(lane_slots)) };
    let mut agents: Vec<Agent> = Vec::with_capacity(n);
    let mut lane_agents = Vec::new();
    let with_lead = n_lane > 0 && rng.random_bool(params.lead_probability);

    for i in 0..n {
        let on_lane = i < n_lane;
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let w = rng.random_range(1.6..2.2);
            let l = rng.random_range(3.8..5.0);
            let candidate = if on_lane {
                let lead = with_lead && i == 0;
                let s0 = if lead {
                    rng.random_range(8.0..far.min(13.0))
                } else {
                    rng.random_range(8.0..far)
                };
                let speed = if lead {
                    rng.random_range(0.0..=params.min_speed)
                } else {
                    rng.random_range(params.min_speed..=params.max_speed)
                };
                let p = lane_point(curvature, s0);
                let a = Agent {
                    x: p.x,
                    y: p.y,
                    w,
                    l,
                    yaw: p.yaw,
                    motion: Motion::ConstantTurn {
                        speed,
                        yaw_rate: speed * curvature,
                    },
                };
                (a, Some((s0, speed)))
            } else {
                let x = rng.random_range(-half..half);
                let y = rng.random_range(-half..half);
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let a = Agent {
                    x,
                    y,
                    w,
                    l,
                    yaw,
                    motion: Motion::ConstantVelocity { vx: 0.0, vy: 0.0 },
                };
                if lane.distance(x, y) < params.lane_half_width + 3.0 {
                    continue;
                }
                (a, None)
            };
            if placement_ok(&candidate.0.rect(), &agents, half) {
                placed = Some(candidate);
                break;
            }
        }
        let Some((agent, lane_state)) = placed else {
            return Err(WorldError::Placement {
                seed,
                agent: i,
                attempts: MAX_ATTEMPTS,
            });
        };
        if let Some((s0, speed)) = lane_state {
            lane_agents.push((agents.len(), s0, speed));
        }
        agents.push(agent);
    }

    let ego_plan = ego_controller(curvature, &lane_agents, params.ego_speed);
    Ok(Scene {
        seed,
        curvature,
        lane,
        agents,
        lane_agents,
        ego_plan,
    })
}

/// Follows the lane centerline at `speed`, slowing to keep
/// [`FOLLOW_DISTANCE`] (arc length) behind the nearest lane agent ahead.
pub fn ego_controller(curvature: f64, lane_agents: &[(usize, f64, f64)], speed: f64) -> Vec<[f64; 2]> {
    let mut s = 0.0;
    (0..HORIZON)
        .map(|k| {
            let t = k as f64 * DT;
            let gap = lane_agents
                .iter()
                .map(|&(_, s0, v)| s0 + v * t - s)
                .filter(|&g| g > 0.0)
                .fold(f64::INFINITY, f64::min);
            let v = ((gap - FOLLOW_DISTANCE) / HEADWAY).clamp(0.0, speed);
            s += v * DT;
            let p = lane_point(curvature, s);
            [p.x, p.y]
        })
        .collect()
}

#[cfg(test)]
mod tests;
