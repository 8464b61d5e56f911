//! Brute-force reference for lift/splat, used by tests and `selftest`.
//!
//! It shares nothing with [`super::SplatPlan`]: for every BEV cell it walks
//! every camera, feature pixel and depth bin, re-derives the 3D point from
//! the pinhole model and tests it against that cell's bounds.

use super::{CameraRig, DepthBins, GridSpec};

/// `features[cam][ch][pixel]`, `depths[cam][bin][pixel]` over `feat_h × feat_w`
/// maps. Returns `[ch][row][col]` in `f64`.
pub fn brute_force_splat(
    features: &[Vec<Vec<f64>>],
    depths: &[Vec<Vec<f64>>],
    rig: &CameraRig,
    bins: &DepthBins,
    grid: &GridSpec,
    feat_h: usize,
    feat_w: usize,
) -> Vec<f64> {
    let channels = features[0].len();
    let res = grid.resolution;
    let cs = grid.extent / res as f64;
    let half = grid.extent / 2.0;
    let mut out = vec![0.0; channels * res * res];
    for row in 0..res {
        for col in 0..res {
            for (c, cam) in rig.cameras.iter().enumerate() {
                for i in 0..feat_h {
                    for j in 0..feat_w {
                        let u = (j as f64 + 0.5) * cam.width as f64 / feat_w as f64;
                        let v = (i as f64 + 0.5) * cam.height as f64 / feat_h as f64;
                        let ray = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
                        for (b, &d) in bins.centers.iter().enumerate() {
                            let r = &cam.rotation;
                            let x = cam.translation[0] + d * (r[0][0] * ray[0] + r[0][1] * ray[1] + r[0][2] * ray[2]);
                            let y = cam.translation[1] + d * (r[1][0] * ray[0] + r[1][1] * ray[1] + r[1][2] * ray[2]);
                            // row r holds (half − y)/cs ∈ [r, r+1), col c holds (x + half)/cs ∈ [c, c+1)
                            let rf = (half - y) / cs;
                            let cf = (x + half) / cs;
                            let in_row = rf >= row as f64 && rf < row as f64 + 1.0;
                            let in_col = cf >= col as f64 && cf < col as f64 + 1.0;
                            if !(in_row && in_col) {
                                continue;
                            }
                            let p = i * feat_w + j;
                            let w = depths[c][b][p];
                            for ch in 0..channels {
                                out[(ch * res + row) * res + col] += w * features[c][ch][p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
