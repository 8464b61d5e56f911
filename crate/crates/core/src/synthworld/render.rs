//! Single-channel ray-cast rendering: agents are solid boxes whose intensity
//! falls off with hit distance, the lane band is painted on the ground at a
//! low constant intensity, everything else is background 0.

use crate::geometry::{Camera, CameraRig};

use super::{Agent, Scene};

pub const AGENT_HEIGHT: f64 = 1.6;
pub const LANE_INTENSITY: f32 = 0.1;

/// Brightness of an agent surface hit at `distance` meters.
pub fn agent_intensity(distance: f64) -> f32 {
    (0.2 + 0.8 / (1.0 + 0.1 * distance)) as f32
}

/// Ray parameter of the entry point into the agent's box, if the ray from
/// `o` along `d` hits it in front of the origin.
fn hit_box(agent: &Agent, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let (s, c) = agent.yaw.sin_cos();
    let (ox, oy) = (o[0] - agent.x, o[1] - agent.y);
    let lo = [c * ox + s * oy, -s * ox + c * oy, o[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let bounds = [
        (-agent.l / 2.0, agent.l / 2.0),
        (-agent.w / 2.0, agent.w / 2.0),
        (0.0, AGENT_HEIGHT),
    ];
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let (a, b) = bounds[k];
        if ld[k].abs() < 1e-12 {
            if lo[k] < a || lo[k] > b {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((a - lo[k]) / ld[k], (b - lo[k]) / ld[k]);
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    (tmin <= tmax && tmin > 0.0).then_some(tmin)
}

fn render_camera(scene: &Scene, cam: &Camera) -> Vec<f32> {
    let o = cam.translation;
    let mut img = vec![0.0f32; cam.width * cam.height];
    for v in 0..cam.height {
        for u in 0..cam.width {
            let ray = [
                (u as f64 + 0.5 - cam.cx) / cam.fx,
                (v as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            ];
            let r = &cam.rotation;
            let d = [
                r[0][0] * ray[0] + r[0][1] * ray[1] + r[0][2] * ray[2],
                r[1][0] * ray[0] + r[1][1] * ray[1] + r[1][2] * ray[2],
                r[2][0] * ray[0] + r[2][1] * ray[1] + r[2][2] * ray[2],
            ];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let mut best = f64::INFINITY;
            for a in &scene.agents {
                if let Some(t) = hit_box(a, o, d) {
                    best = best.min(t);
                }
            }
            let px = &mut img[v * cam.width + u];
            if best.is_finite() {
                *px = agent_intensity(best * norm);
            } else if d[2] < 0.0 {
                let t = -o[2] / d[2];
                if scene.lane.contains(o[0] + t * d[0], o[1] + t * d[1]) {
                    *px = LANE_INTENSITY;
                }
            }
        }
    }
    img
}

/// One `height × width` image per camera, row-major, values in `[0, 1]`.
pub fn rasterize_views(scene: &Scene, rig: &CameraRig) -> Vec<Vec<f32>> {
    rig.cameras.iter().map(|c| render_camera(scene, c)).collect()
}
