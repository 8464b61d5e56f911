//! Ground-truth supervision derived from a scene.

use crate::distill::{build_region_mask, RegionMask};
use crate::geometry::GridSpec;
use crate::nets::{AgentQuery, HORIZON, REG_CHANNELS, TRAJ_DIM};

use super::{Result, Scene, WorldError};

/// Heatmap Gaussian width in cells.
pub const HEATMAP_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTarget {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    /// Cumulative displacements `(dx, dy)` for steps 1..=6.
    pub future: [f64; TRAJ_DIM],
}

impl AgentTarget {
    pub fn query(&self, sample: usize, grid: &GridSpec) -> AgentQuery {
        AgentQuery::new(sample, grid, self.x, self.y, self.w, self.l, self.yaw, self.vx, self.vy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `[R·R]`, Gaussian bumps peaking at exactly 1 on each center cell.
    pub heatmap: Vec<f64>,
    /// `[8, R·R]`, written only at center cells.
    pub regression: Vec<f64>,
    /// Distinct center cells carrying regression targets.
    pub foreground: Vec<usize>,
    pub agents: Vec<AgentTarget>,
    pub plan: [f64; TRAJ_DIM],
    pub mask: RegionMask,
}

pub fn make_targets(scene: &Scene, grid: &GridSpec, horizon: usize) -> Result<Targets> {
    if horizon != HORIZON {
        return Err(WorldError::Horizon(horizon));
    }
    let r = grid.resolution;
    let cells = grid.num_cells();
    let cs = grid.cell_size();
    let mut heatmap = vec![0.0f64; cells];
    let mut regression = vec![0.0; REG_CHANNELS * cells];
    let mut foreground = Vec::new();
    let mut agents = Vec::with_capacity(scene.agents.len());
    for (a, future) in scene.agents.iter().zip(scene.futures()) {
        let (vx, vy) = a.velocity();
        let mut f = [0.0; TRAJ_DIM];
        for (t, p) in future.iter().enumerate() {
            f[2 * t] = p.x - a.x;
            f[2 * t + 1] = p.y - a.y;
        }
        agents.push(AgentTarget {
            x: a.x,
            y: a.y,
            w: a.w,
            l: a.l,
            yaw: a.yaw,
            vx,
            vy,
            future: f,
        });
        let Some((row, col)) = grid.cell_of(a.x, a.y) else { continue };
        for rr in 0..r {
            for cc in 0..r {
                let d2 = (rr as f64 - row as f64).powi(2) + (cc as f64 - col as f64).powi(2);
                let g = (-d2 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp();
                let h = &mut heatmap[rr * r + cc];
                *h = h.max(g);
            }
        }
        let i = row * r + col;
        if foreground.contains(&i) {
            continue;
        }
        foreground.push(i);
        let (cx, cy) = grid.cell_center(row, col);
        let vals = [(a.x - cx) / cs, (a.y - cy) / cs, a.w, a.l, a.yaw.sin(), a.yaw.cos(), vx, vy];
        for (ch, v) in vals.into_iter().enumerate() {
            regression[ch * cells + i] = v;
        }
    }
    let mut plan = [0.0; TRAJ_DIM];
    for (t, w) in scene.ego_plan.iter().enumerate() {
        plan[2 * t] = w[0];
        plan[2 * t + 1] = w[1];
    }
    let rects: Vec<_> = scene.agents.iter().map(|a| a.rect()).collect();
    let mask = build_region_mask(&rects, Some(&scene.lane), grid);
    Ok(Targets {
        heatmap,
        regression,
        foreground,
        agents,
        plan,
        mask,
    })
}
