//! Lift/splat pooling: every feature pixel is spread along its depth bins and
//! sum-pooled into the BEV pillar each (pixel, bin center) projects into.
//!
//! The geometry is fixed per rig, so projection happens once when the
//! [`SplatPlan`] is built; forward and backward are pure index passes.

use super::{project_pixel, BevGrid, CameraRig, DepthBins, GeometryError, GridSpec, Result};
use crate::diffcore::{Scalar, Tensor};

const NO_CELL: u32 = u32::MAX;

/// Precomputed (camera, feature pixel, depth bin) → BEV cell table.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPlan {
    pub cameras: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub bins: usize,
    pub grid: GridSpec,
    /// Layout `[camera][pixel][bin]`.
    cells: Vec<u32>,
}

impl SplatPlan {
    /// Feature pixel `(i, j)` of an `feat_h × feat_w` map is placed at the
    /// image point `((j + ½)·W/feat_w, (i + ½)·H/feat_h)`.
    pub fn new(rig: &CameraRig, bins: &DepthBins, grid: &GridSpec, feat_h: usize, feat_w: usize) -> Result<Self> {
        rig.validate()?;
        grid.validate()?;
        if feat_h == 0 || feat_w == 0 {
            return Err(GeometryError::Shape("empty feature map".into()));
        }
        let mut cells = Vec::with_capacity(rig.len() * feat_h * feat_w * bins.count());
        for cam in &rig.cameras {
            let su = cam.width as f64 / feat_w as f64;
            let sv = cam.height as f64 / feat_h as f64;
            for i in 0..feat_h {
                for j in 0..feat_w {
                    let (u, v) = ((j as f64 + 0.5) * su, (i as f64 + 0.5) * sv);
                    for &d in &bins.centers {
                        let p = project_pixel(cam, u, v, d, grid)?;
                        cells.push(match p.cell {
                            Some((r, c)) => (r * grid.resolution + c) as u32,
                            None => NO_CELL,
                        });
                    }
                }
            }
        }
        Ok(Self {
            cameras: rig.len(),
            feat_h,
            feat_w,
            bins: bins.count(),
            grid: *grid,
            cells,
        })
    }

    pub fn pixels(&self) -> usize {
        self.feat_h * self.feat_w
    }

    /// Flat BEV cell of (camera, pixel, bin), `None` when outside the grid.
    pub fn cell(&self, cam: usize, pixel: usize, bin: usize) -> Option<usize> {
        let c = self.cells[(cam * self.pixels() + pixel) * self.bins + bin];
        (c != NO_CELL).then_some(c as usize)
    }

    /// Sum-pools one sample. `feats` is `[ch, n, P]` and `depth` is
    /// `[D, n, P]` over `n` stacked images, of which cameras
    /// `first_image .. first_image + cameras` belong to this sample.
    /// Accumulation order is camera-major, then pixel, then bin.
    pub fn forward<T: Scalar>(&self, feats: &[T], depth: &[T], channels: usize, n: usize, first_image: usize) -> Vec<T> {
        let p_count = self.pixels();
        let cells = self.grid.num_cells();
        let mut bev = vec![T::ZERO; channels * cells];
        for cam in 0..self.cameras {
            let img = first_image + cam;
            for p in 0..p_count {
                for b in 0..self.bins {
                    let Some(cell) = self.cell(cam, p, b) else { continue };
                    let w = depth[(b * n + img) * p_count + p];
                    for ch in 0..channels {
                        bev[ch * cells + cell] += w * feats[(ch * n + img) * p_count + p];
                    }
                }
            }
        }
        bev
    }

    /// Backward of [`SplatPlan::forward`], accumulating into `dfeats` and
    /// `ddepth` (same layouts as the forward inputs).
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        feats: &[T],
        depth: &[T],
        dbev: &[T],
        channels: usize,
        n: usize,
        first_image: usize,
        dfeats: &mut [T],
        ddepth: &mut [T],
    ) {
        let p_count = self.pixels();
        let cells = self.grid.num_cells();
        for cam in 0..self.cameras {
            let img = first_image + cam;
            for p in 0..p_count {
                for b in 0..self.bins {
                    let Some(cell) = self.cell(cam, p, b) else { continue };
                    let di = (b * n + img) * p_count + p;
                    let w = depth[di];
                    let mut dw = T::ZERO;
                    for ch in 0..channels {
                        let fi = (ch * n + img) * p_count + p;
                        let g = dbev[ch * cells + cell];
                        dfeats[fi] += w * g;
                        dw += feats[fi] * g;
                    }
                    ddepth[di] += dw;
                }
            }
        }
    }
}

/// Pools per-camera feature maps `[ch, h, w]` weighted by per-camera depth
/// distributions `[D, h, w]` into a BEV grid.
pub fn lift_splat<T: Scalar>(features: &[Tensor<T>], depths: &[Tensor<T>], plan: &SplatPlan) -> Result<BevGrid<T>> {
    let (feats, depth, channels) = pack_cameras(features, depths, plan)?;
    let data = plan.forward(&feats, &depth, channels, plan.cameras, 0);
    BevGrid::from_vec(channels, plan.grid, data)
}

/// Validates per-camera inputs and packs them into the `[ch, n, P]` /
/// `[D, n, P]` layouts the plan works on.
pub fn pack_cameras<T: Scalar>(
    features: &[Tensor<T>],
    depths: &[Tensor<T>],
    plan: &SplatPlan,
) -> Result<(Vec<T>, Vec<T>, usize)> {
    if features.len() != plan.cameras || depths.len() != plan.cameras {
        return Err(GeometryError::Shape(format!(
            "expected {} cameras, got {} feature maps and {} depth maps",
            plan.cameras,
            features.len(),
            depths.len()
        )));
    }
    let p_count = plan.pixels();
    let channels = features[0].shape().first().copied().unwrap_or(0);
    for (c, (f, d)) in features.iter().zip(depths).enumerate() {
        if f.shape().len() != 3 || f.shape()[0] != channels {
            return Err(GeometryError::ChannelMismatch {
                camera: c,
                expected: channels,
                got: f.shape().first().copied().unwrap_or(0),
            });
        }
        if f.shape()[1..] != [plan.feat_h, plan.feat_w] || d.shape() != [plan.bins, plan.feat_h, plan.feat_w] {
            return Err(GeometryError::Shape(format!(
                "camera {c}: features {:?}, depth {:?}",
                f.shape(),
                d.shape()
            )));
        }
        for p in 0..p_count {
            let mut sum = 0.0;
            for b in 0..plan.bins {
                let w = d.data()[b * p_count + p].to_f64();
                if w < 0.0 {
                    return Err(GeometryError::NotNormalized { camera: c, pixel: p, sum: w });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(GeometryError::NotNormalized { camera: c, pixel: p, sum });
            }
        }
    }
    let n = plan.cameras;
    let mut feats = vec![T::ZERO; channels * n * p_count];
    let mut depth = vec![T::ZERO; plan.bins * n * p_count];
    for c in 0..n {
        for ch in 0..channels {
            feats[(ch * n + c) * p_count..(ch * n + c + 1) * p_count]
                .copy_from_slice(&features[c].data()[ch * p_count..(ch + 1) * p_count]);
        }
        for b in 0..plan.bins {
            depth[(b * n + c) * p_count..(b * n + c + 1) * p_count]
                .copy_from_slice(&depths[c].data()[b * p_count..(b + 1) * p_count]);
        }
    }
    Ok((feats, depth, channels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_depth_bins, Camera};

    fn forward_rig() -> CameraRig {
        CameraRig {
            cameras: vec![Camera::looking_at_yaw(0.0, 90f64.to_radians(), 16, 16, 0.0)],
        }
    }

    #[test]
    fn one_hot_depth_lands_in_one_cell() {
        let rig = forward_rig();
        let bins = make_depth_bins(1.0, 9.0, 4).unwrap();
        let grid = GridSpec::new(24.0, 12).unwrap();
        let plan = SplatPlan::new(&rig, &bins, &grid, 1, 1).unwrap();
        let feat = Tensor::from_vec(&[2, 1, 1], vec![3.0, -1.5]).unwrap();
        let depth = Tensor::from_vec(&[4, 1, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let bev = lift_splat(&[feat], &[depth], &plan).unwrap();
        // bin 2 center 6 m straight ahead
        let (r, c) = grid.cell_of(6.0, 0.0).unwrap();
        let nonzero: Vec<usize> = (0..bev.data.len()).filter(|&i| bev.data[i] != 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        assert_eq!(bev.at(0, r, c), 3.0);
        assert_eq!(bev.at(1, r, c), -1.5);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let rig = CameraRig::surround(2, 12, 8, 100.0, 1.5).unwrap();
        let bins = make_depth_bins(1.0, 14.0, 6).unwrap();
        let grid = GridSpec::new(20.0, 10).unwrap();
        let (fh, fw) = (2, 3);
        let plan = SplatPlan::new(&rig, &bins, &grid, fh, fw).unwrap();
        let feats: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|c| (0..2).map(|ch| (0..6).map(|p| (c * 13 + ch * 7 + p) as f64 * 0.1 - 1.0).collect()).collect())
            .collect();
        let depths: Vec<Vec<Vec<f64>>> = (0..2).map(|_| vec![vec![1.0 / 6.0; 6]; 6]).collect();
        let want = super::super::oracle::brute_force_splat(&feats, &depths, &rig, &bins, &grid, fh, fw);
        let ft: Vec<Tensor<f64>> = feats.iter().map(|c| Tensor::from_vec(&[2, fh, fw], c.concat()).unwrap()).collect();
        let dt: Vec<Tensor<f64>> = depths.iter().map(|c| Tensor::from_vec(&[6, fh, fw], c.concat()).unwrap()).collect();
        let got = lift_splat(&ft, &dt, &plan).unwrap();
        assert!(want.iter().any(|&v| v != 0.0));
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_depth_spreads_evenly() {
        let rig = forward_rig();
        let bins = make_depth_bins(1.0, 9.0, 4).unwrap();
        let grid = GridSpec::new(24.0, 12).unwrap();
        let plan = SplatPlan::new(&rig, &bins, &grid, 1, 1).unwrap();
        let feat = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let depth = Tensor::from_vec(&[4, 1, 1], vec![0.25; 4]).unwrap();
        let bev = lift_splat(&[feat], &[depth], &plan).unwrap();
        // centers 2, 4, 6, 8 m fall in distinct 2 m cells
        for d in [2.0, 4.0, 6.0, 8.0] {
            let (r, c) = grid.cell_of(d, 0.0).unwrap();
            assert_eq!(bev.at(0, r, c), 0.5);
        }
        assert_eq!(bev.data.iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn everything_outside_gives_zero_grid() {
        let rig = forward_rig();
        let bins = make_depth_bins(20.0, 30.0, 2).unwrap();
        let grid = GridSpec::new(16.0, 8).unwrap();
        let plan = SplatPlan::new(&rig, &bins, &grid, 2, 2).unwrap();
        let feat = Tensor::from_vec(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let depth = Tensor::from_vec(&[2, 2, 2], vec![0.5; 8]).unwrap();
        let bev = lift_splat(&[feat], &[depth], &plan).unwrap();
        assert!(bev.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_unnormalized_and_mismatched_inputs() {
        let rig = forward_rig();
        let bins = make_depth_bins(1.0, 9.0, 2).unwrap();
        let grid = GridSpec::new(24.0, 12).unwrap();
        let plan = SplatPlan::new(&rig, &bins, &grid, 1, 1).unwrap();
        let feat = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let bad = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.6]).unwrap();
        assert!(matches!(
            lift_splat(&[feat.clone()], &[bad], &plan),
            Err(GeometryError::NotNormalized { .. })
        ));

        let rig2 = CameraRig {
            cameras: vec![rig.cameras[0].clone(), rig.cameras[0].clone()],
        };
        let plan2 = SplatPlan::new(&rig2, &bins, &grid, 1, 1).unwrap();
        let ok = Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        let feat3 = Tensor::from_vec(&[3, 1, 1], vec![1.0; 3]).unwrap();
        assert!(matches!(
            lift_splat(&[feat, feat3], &[ok.clone(), ok], &plan2),
            Err(GeometryError::ChannelMismatch { camera: 1, .. })
        ));
    }
}
