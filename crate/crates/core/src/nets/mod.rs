//! Student and teacher networks: a strided conv backbone, lift/splat into the
//! BEV grid, and the detection, motion and plan heads.
//!
//! Both roles share one implementation. The teacher differs only in its
//! widths and in a 1×1 projection that maps its lifted BEV down to the
//! student's channel count, so every head and every distillation loss sees
//! the same shapes.

pub mod checkpoint;
pub mod decode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::FormatError;
use crate::diffcore::layers::{sigmoid, silu, silu_backward, softmax_rows, softmax_rows_backward, Conv2d, ConvCache, Linear};
use crate::diffcore::{DiffError, ParamSet, Scalar, Tensor};
use crate::geometry::{CameraRig, DepthBins, GeometryError, GridSpec, SplatPlan};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use decode::{decode_detections, Detection, DetectionMaps};

/// Forecast and plan horizon in 0.5 s steps.
pub const HORIZON: usize = 6;
pub const TRAJ_DIM: usize = 2 * HORIZON;
/// dx, dy (cells), w, l (m), sin, cos, vx, vy (m/s).
pub const REG_CHANNELS: usize = 8;
pub const STATE_DIM: usize = 8;
/// Motion and plan heads emit trajectories in units of this many meters.
pub const TRAJ_SCALE: f64 = 5.0;
pub const VEL_SCALE: f64 = 5.0;
pub const SIZE_SCALE: f64 = 5.0;
/// Initial heatmap logit, sigmoid ≈ 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("empty camera set")]
    EmptyCameras,
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("checkpoint {0}")]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub role: Role,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Channels of the lifted image features.
    pub lift_channels: usize,
    /// Channels of the BEV grid the heads read; the teacher projects to it.
    pub bev_channels: usize,
    pub det_hidden: usize,
    pub motion_hidden: usize,
    pub plan_hidden: usize,
}

impl NetworkSpec {
    pub fn student() -> Self {
        Self {
            role: Role::Student,
            stage_widths: vec![16, 32, 64, 64],
            stage_strides: vec![2, 2, 2, 1],
            lift_channels: 16,
            bev_channels: 16,
            det_hidden: 32,
            motion_hidden: 64,
            plan_hidden: 64,
        }
    }

    pub fn teacher() -> Self {
        Self {
            role: Role::Teacher,
            stage_widths: vec![32, 64, 128, 128, 256, 256],
            stage_strides: vec![2, 2, 2, 1, 1, 1],
            lift_channels: 32,
            bev_channels: 16,
            det_hidden: 64,
            motion_hidden: 128,
            plan_hidden: 128,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::Spec(m.into()));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_strides.len() {
            return bad("stage widths and strides must be nonempty and of equal length");
        }
        if self.stage_widths.contains(&0) || self.stage_strides.contains(&0) {
            return bad("zero stage width or stride");
        }
        if [self.lift_channels, self.bev_channels, self.det_hidden, self.motion_hidden, self.plan_hidden].contains(&0) {
            return bad("zero channel count");
        }
        if self.role == Role::Student && self.lift_channels != self.bev_channels {
            return bad("student lifts directly into its BEV channels");
        }
        Ok(())
    }
}

/// Side of the central BEV patch the plan head reads.
pub fn plan_patch(resolution: usize) -> usize {
    (resolution / 4).max(1)
}

/// Motion-head query: where to sample the BEV and the normalized agent state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentQuery {
    pub sample: usize,
    pub x: f64,
    pub y: f64,
    pub state: [f64; STATE_DIM],
}

impl AgentQuery {
    #[allow(clippy::too_many_arguments)]
    pub fn new(sample: usize, grid: &GridSpec, x: f64, y: f64, w: f64, l: f64, yaw: f64, vx: f64, vy: f64) -> Self {
        let h = grid.half_extent();
        let (s, c) = yaw.sin_cos();
        Self {
            sample,
            x,
            y,
            state: [
                x / h,
                y / h,
                s,
                c,
                vx / VEL_SCALE,
                vy / VEL_SCALE,
                w / SIZE_SCALE,
                l / SIZE_SCALE,
            ],
        }
    }

    pub fn from_detection(sample: usize, grid: &GridSpec, d: &Detection) -> Self {
        Self::new(sample, grid, d.x, d.y, d.w, d.l, d.yaw, d.vx, d.vy)
    }
}

/// Bilinear taps `(cell, weight)` around `(x, y)` over cell centers; taps
/// outside the grid are dropped and an agent outside the grid gets none.
pub fn bilinear_taps(grid: &GridSpec, x: f64, y: f64) -> Vec<(usize, f64)> {
    if !grid.contains(x, y) {
        return Vec::new();
    }
    let n = grid.resolution as i64;
    let (rf, cf) = grid.continuous_cell(x, y);
    let (r, c) = (rf - 0.5, cf - 0.5);
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let mut taps = Vec::with_capacity(4);
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let (rr, cc) = (r0 as i64 + dr, c0 as i64 + dc);
            if rr >= 0 && rr < n && cc >= 0 && cc < n {
                taps.push(((rr * n + cc) as usize, wr * wc));
            }
        }
    }
    taps
}

/// Copies sample `b` out of a `[channels, batch, cells]` buffer as `f64`.
pub fn gather_sample<T: Scalar>(data: &[T], channels: usize, batch: usize, b: usize) -> Vec<f64> {
    let cells = data.len() / (channels * batch);
    let mut out = Vec::with_capacity(channels * cells);
    for ch in 0..channels {
        let base = (ch * batch + b) * cells;
        out.extend(data[base..base + cells].iter().map(|v| v.to_f64()));
    }
    out
}

/// Adds `scale · src` (laid out `[channels, cells]`) into sample `b` of a
/// `[channels, batch, cells]` buffer.
pub fn scatter_add_sample<T: Scalar>(dst: &mut [T], channels: usize, batch: usize, b: usize, src: &[f64], scale: f64) {
    let cells = dst.len() / (channels * batch);
    for ch in 0..channels {
        let base = (ch * batch + b) * cells;
        for (d, s) in dst[base..base + cells].iter_mut().zip(&src[ch * cells..(ch + 1) * cells]) {
            *d += T::from_f64(scale * s);
        }
    }
}

/// Batched network outputs. Spatial maps use the `[C, B, R, R]` layout.
#[derive(Clone, Debug)]
pub struct Outputs<T> {
    pub batch: usize,
    pub grid: GridSpec,
    pub bev: Tensor<T>,
    /// Sigmoid scores `[1, B, R, R]`.
    pub heatmap: Tensor<T>,
    pub regression: Tensor<T>,
    /// Ego waypoints `[B, 12]` in meters.
    pub plan: Tensor<T>,
    /// Lifted image features `[lift_channels, B·C, fh, fw]`.
    pub features: Tensor<T>,
    /// Per-pixel depth distributions `[D, B·C, fh, fw]`.
    pub depth: Tensor<T>,
}

impl<T: Scalar> Outputs<T> {
    pub fn bev_channels(&self) -> usize {
        self.bev.shape()[0]
    }

    pub fn bev_sample(&self, b: usize) -> Vec<f64> {
        gather_sample(self.bev.data(), self.bev_channels(), self.batch, b)
    }

    pub fn heatmap_sample(&self, b: usize) -> Vec<f64> {
        gather_sample(self.heatmap.data(), 1, self.batch, b)
    }

    pub fn regression_sample(&self, b: usize) -> Vec<f64> {
        gather_sample(self.regression.data(), REG_CHANNELS, self.batch, b)
    }

    pub fn plan_sample(&self, b: usize) -> Vec<f64> {
        self.plan.data()[b * TRAJ_DIM..(b + 1) * TRAJ_DIM].iter().map(|v| v.to_f64()).collect()
    }

    pub fn detection_maps(&self, b: usize) -> DetectionMaps {
        DetectionMaps {
            grid: self.grid,
            heatmap: self.heatmap_sample(b),
            regression: self.regression_sample(b),
        }
    }
}

/// Loss gradients with respect to [`Outputs`], same layouts. Heatmap
/// gradients may be given against the scores or directly against the logits.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub bev: Vec<T>,
    pub heat_prob: Vec<T>,
    pub heat_logit: Vec<T>,
    pub regression: Vec<T>,
    pub plan: Vec<T>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn zeros(out: &Outputs<T>) -> Self {
        Self {
            bev: vec![T::ZERO; out.bev.numel()],
            heat_prob: vec![T::ZERO; out.heatmap.numel()],
            heat_logit: vec![T::ZERO; out.heatmap.numel()],
            regression: vec![T::ZERO; out.regression.numel()],
            plan: vec![T::ZERO; out.plan.numel()],
        }
    }
}

pub struct ForwardCache<T> {
    stages: Vec<(ConvCache<T>, Tensor<T>)>,
    lift: ConvCache<T>,
    proj: Option<ConvCache<T>>,
    det: Vec<ConvCache<T>>,
    det_pre: Vec<Tensor<T>>,
    plan_x: Tensor<T>,
    plan_pre: Tensor<T>,
    plan_h: Tensor<T>,
}

pub struct MotionCache<T> {
    batch: usize,
    agents: Vec<(usize, Vec<(usize, f64)>)>,
    x: Tensor<T>,
    pre: Tensor<T>,
    h: Tensor<T>,
}

struct BackboneOut<T> {
    features: Tensor<T>,
    depth: Tensor<T>,
    stages: Vec<(ConvCache<T>, Tensor<T>)>,
    lift: ConvCache<T>,
}

#[derive(Clone, Debug)]
pub struct BevNet<T> {
    pub spec: NetworkSpec,
    pub splat: SplatPlan,
    pub params: ParamSet<T>,
    image_hw: (usize, usize),
    stages: Vec<Conv2d>,
    lift: Conv2d,
    proj: Option<Conv2d>,
    det: Vec<Conv2d>,
    motion: Vec<Linear>,
    plan: Vec<Linear>,
}

/// Exact trainable scalar count.
pub fn count_params<T: Scalar>(params: &ParamSet<T>) -> usize {
    params.scalar_count()
}

impl<T: Scalar> BevNet<T> {
    pub fn new(spec: &NetworkSpec, rig: &CameraRig, bins: &DepthBins, grid: &GridSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        rig.validate()?;
        grid.validate()?;
        let (w, h) = rig.image_size();
        if rig.cameras.iter().any(|c| (c.width, c.height) != (w, h)) {
            return Err(NetError::Input("cameras must share one image size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut stages = Vec::with_capacity(spec.stages());
        let (mut cin, mut fh, mut fw) = (1, h, w);
        for (i, (&width, &stride)) in spec.stage_widths.iter().zip(&spec.stage_strides).enumerate() {
            let conv = Conv2d::new(&mut params, &format!("backbone.{i}"), cin, width, 3, stride, &mut rng)?;
            (fh, fw) = conv.out_size(fh, fw);
            cin = width;
            stages.push(conv);
        }
        let d = bins.count();
        let lift = Conv2d::new(&mut params, "lift", cin, spec.lift_channels + d, 1, 1, &mut rng)?;
        let proj = match spec.role {
            Role::Teacher => Some(Conv2d::new(
                &mut params,
                "bev_proj",
                spec.lift_channels,
                spec.bev_channels,
                1,
                1,
                &mut rng,
            )?),
            Role::Student => None,
        };
        let (bc, dh) = (spec.bev_channels, spec.det_hidden);
        let det = vec![
            Conv2d::new(&mut params, "det.0", bc, dh, 3, 1, &mut rng)?,
            Conv2d::new(&mut params, "det.1", dh, dh, 3, 1, &mut rng)?,
            Conv2d::new(&mut params, "det.out", dh, 1 + REG_CHANNELS, 1, 1, &mut rng)?,
        ];
        params.get_mut(det[2].bias).value.data_mut()[0] = T::from_f64(HEATMAP_PRIOR_BIAS);
        let motion = vec![
            Linear::new(&mut params, "motion.0", STATE_DIM + bc, spec.motion_hidden, &mut rng)?,
            Linear::new(&mut params, "motion.out", spec.motion_hidden, TRAJ_DIM, &mut rng)?,
        ];
        let k = plan_patch(grid.resolution);
        let plan = vec![
            Linear::new(&mut params, "plan.0", bc * k * k, spec.plan_hidden, &mut rng)?,
            Linear::new(&mut params, "plan.out", spec.plan_hidden, TRAJ_DIM, &mut rng)?,
        ];
        let splat = SplatPlan::new(rig, bins, grid, fh, fw)?;
        Ok(Self {
            spec: spec.clone(),
            splat,
            params,
            image_hw: (h, w),
            stages,
            lift,
            proj,
            det,
            motion,
            plan,
        })
    }

    pub fn count_params(&self) -> usize {
        count_params(&self.params)
    }

    pub fn grid(&self) -> GridSpec {
        self.splat.grid
    }

    pub fn cameras(&self) -> usize {
        self.splat.cameras
    }

    pub fn image_hw(&self) -> (usize, usize) {
        self.image_hw
    }

    /// Same architecture in another scalar type.
    pub fn cast<U: Scalar>(&self) -> BevNet<U> {
        BevNet {
            spec: self.spec.clone(),
            splat: self.splat.clone(),
            params: self.params.cast(),
            image_hw: self.image_hw,
            stages: self.stages.clone(),
            lift: self.lift.clone(),
            proj: self.proj.clone(),
            det: self.det.clone(),
            motion: self.motion.clone(),
            plan: self.plan.clone(),
        }
    }

    /// Loads values from a checkpoint parameter set (any scalar type).
    pub fn load_params<U: Scalar>(&mut self, values: &ParamSet<U>) -> Result<()> {
        self.params.load_values(&values.cast())?;
        Ok(())
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[0] != 1 || (s[2], s[3]) != self.image_hw {
            return Err(NetError::Input(format!(
                "images must be [1, n, {}, {}], got {:?}",
                self.image_hw.0, self.image_hw.1, s
            )));
        }
        if s[1] == 0 {
            return Err(NetError::EmptyCameras);
        }
        if s[1] % self.cameras() != 0 {
            return Err(NetError::Input(format!(
                "{} images is not a multiple of {} cameras",
                s[1],
                self.cameras()
            )));
        }
        Ok(s[1] / self.cameras())
    }

    fn backbone(&self, images: &Tensor<T>) -> Result<BackboneOut<T>> {
        self.check_images(images)?;
        let mut x = images.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (pre, c) = conv.forward(&self.params, &x)?;
            x = silu(&pre);
            stages.push((c, pre));
        }
        let (lifted, lift) = self.lift.forward(&self.params, &x)?;
        let s = lifted.shape().to_vec();
        let (n, fh, fw) = (s[1], s[2], s[3]);
        let lc = self.spec.lift_channels;
        let d = self.splat.bins;
        let split = lc * n * fh * fw;
        let data = lifted.into_data();
        let features = Tensor::from_vec(&[lc, n, fh, fw], data[..split].to_vec())?;
        let depth = Tensor::from_vec(&[d, n, fh, fw], softmax_rows(&data[split..], d))?;
        Ok(BackboneOut {
            features,
            depth,
            stages,
            lift,
        })
    }

    /// Per-image features `[lift_channels, n, fh, fw]` and depth
    /// distributions `[D, n, fh, fw]` for images `[1, n, H, W]`.
    pub fn backbone_forward(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = self.backbone(images)?;
        Ok((b.features, b.depth))
    }

    /// Forward pass over `B` samples stacked as `[1, B·C, H, W]`, camera
    /// index fastest.
    pub fn forward(&self, images: &Tensor<T>) -> Result<(Outputs<T>, ForwardCache<T>)> {
        let bb = self.backbone(images)?;
        let grid = self.grid();
        let (r, cells) = (grid.resolution, grid.num_cells());
        let n = bb.features.shape()[1];
        let batch = n / self.cameras();
        let lc = self.spec.lift_channels;
        let mut lifted = vec![T::ZERO; lc * batch * cells];
        for b in 0..batch {
            let s = self
                .splat
                .forward(bb.features.data(), bb.depth.data(), lc, n, b * self.cameras());
            for ch in 0..lc {
                let dst = (ch * batch + b) * cells;
                lifted[dst..dst + cells].copy_from_slice(&s[ch * cells..(ch + 1) * cells]);
            }
        }
        let lifted = Tensor::from_vec(&[lc, batch, r, r], lifted)?;
        let (bev, proj) = match &self.proj {
            Some(p) => {
                let (y, c) = p.forward(&self.params, &lifted)?;
                (y, Some(c))
            }
            None => (lifted, None),
        };

        let mut det = Vec::with_capacity(3);
        let mut det_pre = Vec::with_capacity(2);
        let mut x = bev.clone();
        for conv in &self.det[..2] {
            let (pre, c) = conv.forward(&self.params, &x)?;
            x = silu(&pre);
            det.push(c);
            det_pre.push(pre);
        }
        let (o, c) = self.det[2].forward(&self.params, &x)?;
        det.push(c);
        let plane = batch * cells;
        let heat: Vec<T> = o.data()[..plane].iter().map(|&v| sigmoid(v)).collect();
        let heatmap = Tensor::from_vec(&[1, batch, r, r], heat)?;
        let regression = Tensor::from_vec(&[REG_CHANNELS, batch, r, r], o.data()[plane..].to_vec())?;

        let plan_x = self.plan_input(&bev, batch);
        let plan_pre = self.plan[0].forward(&self.params, &plan_x)?;
        let plan_h = silu(&plan_pre);
        let raw = self.plan[1].forward(&self.params, &plan_h)?;
        let scale = T::from_f64(TRAJ_SCALE);
        let plan = Tensor::from_vec(&[batch, TRAJ_DIM], raw.data().iter().map(|&v| v * scale).collect())?;

        bev.ensure_finite("bev")?;
        heatmap.ensure_finite("heatmap")?;
        regression.ensure_finite("regression")?;
        plan.ensure_finite("plan")?;
        let out = Outputs {
            batch,
            grid,
            bev,
            heatmap,
            regression,
            plan,
            features: bb.features,
            depth: bb.depth,
        };
        let cache = ForwardCache {
            stages: bb.stages,
            lift: bb.lift,
            proj,
            det,
            det_pre,
            plan_x,
            plan_pre,
            plan_h,
        };
        Ok((out, cache))
    }

    fn plan_input(&self, bev: &Tensor<T>, batch: usize) -> Tensor<T> {
        let bc = self.spec.bev_channels;
        let r = self.grid().resolution;
        let k = plan_patch(r);
        let start = (r - k) / 2;
        let din = bc * k * k;
        let mut x = vec![T::ZERO; batch * din];
        for b in 0..batch {
            for ch in 0..bc {
                let base = (ch * batch + b) * r * r;
                for i in 0..k {
                    let src = base + (start + i) * r + start;
                    let dst = b * din + (ch * k + i) * k;
                    x[dst..dst + k].copy_from_slice(&bev.data()[src..src + k]);
                }
            }
        }
        Tensor::from_vec(&[batch, din], x).expect("patch size")
    }

    /// Accumulates parameter gradients for the loss whose output gradients
    /// are `g`.
    pub fn backward(&mut self, out: &Outputs<T>, cache: &ForwardCache<T>, g: &OutputGrads<T>) -> Result<()> {
        let batch = out.batch;
        let grid = self.grid();
        let (r, cells) = (grid.resolution, grid.num_cells());
        let plane = batch * cells;

        let mut dout = vec![T::ZERO; (1 + REG_CHANNELS) * plane];
        for (i, d) in dout[..plane].iter_mut().enumerate() {
            let p = out.heatmap.data()[i];
            *d = g.heat_logit[i] + g.heat_prob[i] * p * (T::ONE - p);
        }
        dout[plane..].copy_from_slice(&g.regression);
        let mut dx = Tensor::from_vec(&[1 + REG_CHANNELS, batch, r, r], dout)?;
        dx = self.det[2].backward(&mut self.params, &cache.det[2], &dx)?;
        for i in (0..2).rev() {
            let dpre = silu_backward(&cache.det_pre[i], &dx);
            dx = self.det[i].backward(&mut self.params, &cache.det[i], &dpre)?;
        }
        let mut dbev = dx.into_data();
        for (d, &v) in dbev.iter_mut().zip(&g.bev) {
            *d += v;
        }

        let scale = T::from_f64(TRAJ_SCALE);
        let draw = Tensor::from_vec(&[batch, TRAJ_DIM], g.plan.iter().map(|&v| v * scale).collect())?;
        let dh = self.plan[1].backward(&mut self.params, &cache.plan_h, &draw)?;
        let dpre = silu_backward(&cache.plan_pre, &dh);
        let dpatch = self.plan[0].backward(&mut self.params, &cache.plan_x, &dpre)?;
        let bc = self.spec.bev_channels;
        let k = plan_patch(r);
        let start = (r - k) / 2;
        let din = bc * k * k;
        for b in 0..batch {
            for ch in 0..bc {
                let base = (ch * batch + b) * cells;
                for i in 0..k {
                    for j in 0..k {
                        dbev[base + (start + i) * r + start + j] += dpatch.data()[b * din + (ch * k + i) * k + j];
                    }
                }
            }
        }

        let dbev = Tensor::from_vec(&[bc, batch, r, r], dbev)?;
        let dlifted = match (&self.proj, &cache.proj) {
            (Some(p), Some(c)) => p.backward(&mut self.params, c, &dbev)?,
            _ => dbev,
        };

        let lc = self.spec.lift_channels;
        let n = out.features.shape()[1];
        let mut dfeat = vec![T::ZERO; out.features.numel()];
        let mut ddepth = vec![T::ZERO; out.depth.numel()];
        let mut db = vec![T::ZERO; lc * cells];
        for b in 0..batch {
            for ch in 0..lc {
                let src = (ch * batch + b) * cells;
                db[ch * cells..(ch + 1) * cells].copy_from_slice(&dlifted.data()[src..src + cells]);
            }
            self.splat.backward(
                out.features.data(),
                out.depth.data(),
                &db,
                lc,
                n,
                b * self.cameras(),
                &mut dfeat,
                &mut ddepth,
            );
        }
        let d = self.splat.bins;
        let dlogits = softmax_rows_backward(out.depth.data(), &ddepth, d);
        let fs = out.features.shape();
        dfeat.extend(dlogits);
        let dlift = Tensor::from_vec(&[lc + d, n, fs[2], fs[3]], dfeat)?;
        let mut dx = self.lift.backward(&mut self.params, &cache.lift, &dlift)?;
        for (conv, (c, pre)) in self.stages.iter().zip(&cache.stages).rev() {
            let dpre = silu_backward(pre, &dx);
            dx = conv.backward(&mut self.params, c, &dpre)?;
        }
        Ok(())
    }

    /// Forecasts `[A, 12]` (cumulative displacements in meters) for agent
    /// queries against the batched BEV `[bc, B, R, R]`.
    pub fn motion_forward(&self, bev: &Tensor<T>, agents: &[AgentQuery]) -> Result<(Tensor<T>, MotionCache<T>)> {
        let bc = self.spec.bev_channels;
        let grid = self.grid();
        let cells = grid.num_cells();
        let s = bev.shape();
        if s.len() != 4 || s[0] != bc || s[2] * s[3] != cells {
            return Err(NetError::Input(format!("motion head expects BEV [{bc}, B, R, R], got {s:?}")));
        }
        let batch = s[1];
        let din = STATE_DIM + bc;
        let mut x = vec![T::ZERO; agents.len() * din];
        let mut taps = Vec::with_capacity(agents.len());
        for (a, q) in agents.iter().enumerate() {
            if q.sample >= batch {
                return Err(NetError::Input(format!("agent {a} refers to sample {} of {batch}", q.sample)));
            }
            let row = &mut x[a * din..(a + 1) * din];
            for (dst, &v) in row.iter_mut().zip(&q.state) {
                *dst = T::from_f64(v);
            }
            let t = bilinear_taps(&grid, q.x, q.y);
            for ch in 0..bc {
                let base = (ch * batch + q.sample) * cells;
                let mut acc = T::ZERO;
                for &(cell, w) in &t {
                    acc += T::from_f64(w) * bev.data()[base + cell];
                }
                row[STATE_DIM + ch] = acc;
            }
            taps.push((q.sample, t));
        }
        let x = Tensor::from_vec(&[agents.len(), din], x)?;
        let (pre, h, out) = if agents.is_empty() {
            (
                Tensor::zeros(&[0, self.spec.motion_hidden]),
                Tensor::zeros(&[0, self.spec.motion_hidden]),
                Tensor::zeros(&[0, TRAJ_DIM]),
            )
        } else {
            let pre = self.motion[0].forward(&self.params, &x)?;
            let h = silu(&pre);
            let raw = self.motion[1].forward(&self.params, &h)?;
            let scale = T::from_f64(TRAJ_SCALE);
            let out = Tensor::from_vec(&[agents.len(), TRAJ_DIM], raw.data().iter().map(|&v| v * scale).collect())?;
            out.ensure_finite("motion")?;
            (pre, h, out)
        };
        Ok((
            out,
            MotionCache {
                batch,
                agents: taps,
                x,
                pre,
                h,
            },
        ))
    }

    /// Accumulates motion-head parameter gradients, adds the BEV gradient
    /// into `dbev` and returns the gradient w.r.t. the normalized states.
    pub fn motion_backward(&mut self, cache: &MotionCache<T>, dout: &Tensor<T>, dbev: &mut [T]) -> Result<Tensor<T>> {
        let a = cache.agents.len();
        if a == 0 {
            return Ok(Tensor::zeros(&[0, STATE_DIM]));
        }
        let scale = T::from_f64(TRAJ_SCALE);
        dout.ensure_shape("motion.out", &[a, TRAJ_DIM])?;
        let draw = Tensor::from_vec(&[a, TRAJ_DIM], dout.data().iter().map(|&v| v * scale).collect())?;
        let dh = self.motion[1].backward(&mut self.params, &cache.h, &draw)?;
        let dpre = silu_backward(&cache.pre, &dh);
        let dx = self.motion[0].backward(&mut self.params, &cache.x, &dpre)?;
        let bc = self.spec.bev_channels;
        let din = STATE_DIM + bc;
        let cells = self.grid().num_cells();
        let mut dstate = Vec::with_capacity(a * STATE_DIM);
        for (i, (sample, taps)) in cache.agents.iter().enumerate() {
            let row = &dx.data()[i * din..(i + 1) * din];
            dstate.extend_from_slice(&row[..STATE_DIM]);
            for ch in 0..bc {
                let base = (ch * cache.batch + sample) * cells;
                for &(cell, w) in taps {
                    dbev[base + cell] += T::from_f64(w) * row[STATE_DIM + ch];
                }
            }
        }
        Ok(Tensor::from_vec(&[a, STATE_DIM], dstate)?)
    }
}

#[cfg(test)]
mod tests;
