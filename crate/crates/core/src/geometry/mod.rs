//! Camera rig, depth discretisation, the BEV grid and the lift/splat pooling
//! that turns per-camera features into it.
//!
//! Ego frame: x forward, y left, z up, origin at the ego center. BEV rows
//! grow towards −y and columns towards +x, so row 0 is the left edge
//! (max y) and col 0 the rear edge (min x).

pub mod lane;
pub mod lss;
pub mod obb;
pub mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Scalar;

pub use lane::LaneBand;
pub use lss::{lift_splat, SplatPlan};
pub use obb::OrientedRect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth range: near {near}, far {far}, count {count}")]
    DepthRange { near: f64, far: f64, count: usize },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid camera {index}: {reason}")]
    Camera { index: usize, reason: String },
    #[error("depth distribution of camera {camera} pixel {pixel} sums to {sum}")]
    NotNormalized { camera: usize, pixel: usize, sum: f64 },
    #[error("channel mismatch: camera {camera} has {got} channels, expected {expected}")]
    ChannelMismatch { camera: usize, expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Pinhole camera; `rotation` maps camera axes (x right, y down, z along the
/// optical axis) into the ego frame, `translation` is the camera center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Level camera at `height` meters looking along ego yaw `yaw` (radians),
    /// with horizontal field of view `hfov` (radians) and square pixels.
    pub fn looking_at_yaw(yaw: f64, hfov: f64, width: usize, height: usize, mount_height: f64) -> Self {
        let fx = width as f64 / 2.0 / (hfov / 2.0).tan();
        let (s, c) = yaw.sin_cos();
        // columns: right = (sin, −cos, 0), down = (0, 0, −1), forward = (cos, sin, 0)
        let rotation = [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]];
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: [0.0, 0.0, mount_height],
            width,
            height,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| GeometryError::Camera {
            index,
            reason: reason.into(),
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(bad("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("empty image"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-9 {
                    return Err(bad("rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Camera-frame point to ego frame.
    pub fn to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Ego-frame point to camera frame (inverse of [`Camera::to_ego`]).
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, pc: [f64; 3]) -> Option<(f64, f64)> {
        if pc[2] <= 1e-6 {
            return None;
        }
        Some((self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    /// `count` level cameras evenly spaced in yaw, camera 0 facing forward.
    pub fn surround(count: usize, width: usize, height: usize, hfov_deg: f64, mount_height: f64) -> Result<Self> {
        let rig = Self {
            cameras: (0..count)
                .map(|c| {
                    let yaw = (c as f64) * std::f64::consts::TAU / count as f64;
                    Camera::looking_at_yaw(yaw, hfov_deg.to_radians(), width, height, mount_height)
                })
                .collect(),
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(GeometryError::Camera {
                index: 0,
                reason: "rig has no cameras".into(),
            });
        }
        let (w, h) = (self.cameras[0].width, self.cameras[0].height);
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate(i)?;
            if c.width != w || c.height != h {
                return Err(GeometryError::Camera {
                    index: i,
                    reason: "cameras must share one image size".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].width, self.cameras[0].height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthBins {
    pub near: f64,
    pub far: f64,
    pub centers: Vec<f64>,
}

impl DepthBins {
    pub fn count(&self) -> usize {
        self.centers.len()
    }
}

/// Uniform bins over `[near, far]`; center `i` is `near + (i + ½)·(far − near)/count`.
pub fn make_depth_bins(near: f64, far: f64, count: usize) -> Result<DepthBins> {
    if !(near > 0.0 && far > near && count >= 1 && far.is_finite()) {
        return Err(GeometryError::DepthRange { near, far, count });
    }
    let width = (far - near) / count as f64;
    Ok(DepthBins {
        near,
        far,
        centers: (0..count).map(|i| near + (i as f64 + 0.5) * width).collect(),
    })
}

/// Ego-centered square grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Side length in meters.
    pub extent: f64,
    /// Cells per side.
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(extent: f64, resolution: usize) -> Result<Self> {
        let g = Self { extent, resolution };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(GeometryError::Grid(format!("resolution {} < 8", self.resolution)));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(GeometryError::Grid(format!("extent {} must be positive", self.extent)));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.extent / self.resolution as f64
    }

    pub fn half_extent(&self) -> f64 {
        self.extent / 2.0
    }

    pub fn num_cells(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Continuous (row, col) coordinates; integer parts are cell indices.
    pub fn continuous_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let cs = self.cell_size();
        ((self.half_extent() - y) / cs, (x + self.half_extent()) / cs)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (rf, cf) = self.continuous_cell(x, y);
        let (r, c) = (rf.floor(), cf.floor());
        let n = self.resolution as f64;
        if r >= 0.0 && r < n && c >= 0.0 && c < n {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    /// Ego-frame (x, y) of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let cs = self.cell_size();
        (
            (col as f64 + 0.5) * cs - self.half_extent(),
            self.half_extent() - (row as f64 + 0.5) * cs,
        )
    }
}

/// Result of projecting one pixel at one depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: [f64; 3],
    /// `None` is the outside-of-grid marker.
    pub cell: Option<(usize, usize)>,
}

/// Back-projects pixel `(u, v)` at `depth` along the optical axis into the
/// ego frame and finds its BEV cell.
pub fn project_pixel(camera: &Camera, u: f64, v: f64, depth: f64, grid: &GridSpec) -> Result<Projection> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !(u >= 0.0 && v >= 0.0 && u <= camera.width as f64 && v <= camera.height as f64) {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: camera.width,
            height: camera.height,
        });
    }
    let pc = [(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth];
    let point = camera.to_ego(pc);
    Ok(Projection {
        point,
        cell: grid.cell_of(point[0], point[1]),
    })
}

/// Planar feature map `channels × resolution × resolution`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid<T> {
    pub channels: usize,
    pub spec: GridSpec,
    pub data: Vec<T>,
}

impl<T: Scalar> BevGrid<T> {
    pub fn zeros(channels: usize, spec: GridSpec) -> Self {
        Self {
            channels,
            spec,
            data: vec![T::ZERO; channels * spec.num_cells()],
        }
    }

    pub fn from_vec(channels: usize, spec: GridSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * spec.num_cells() {
            return Err(GeometryError::Shape(format!(
                "{} values for {} channels at resolution {}",
                data.len(),
                channels,
                spec.resolution
            )));
        }
        Ok(Self { channels, spec, data })
    }

    pub fn rows(&self) -> usize {
        self.spec.resolution
    }

    pub fn cols(&self) -> usize {
        self.spec.resolution
    }

    pub fn at(&self, ch: usize, row: usize, col: usize) -> T {
        let r = self.spec.resolution;
        self.data[(ch * r + row) * r + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.spec.resolution == other.spec.resolution
    }

    pub fn cast<U: Scalar>(&self) -> BevGrid<U> {
        BevGrid {
            channels: self.channels,
            spec: self.spec,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
