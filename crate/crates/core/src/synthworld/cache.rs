//! `TBEVCACH` teacher-output cache.
//!
//! Header: magic, u32 version, u32 sample count, u32 BEV channels, u32 grid
//! resolution, u32 horizon. Each sample then holds f32 records in order:
//! BEV `[C, R·R]`, heatmap `[R·R]`, regression `[8, R·R]`, a u32 agent count
//! followed by one detection (10 values) and forecast (2·horizon values) per
//! agent, and the ego plan (2·horizon values). Everything is little-endian.

use std::path::Path;

use crate::binio::{FormatError, Reader, Writer};
use crate::nets::{Detection, REG_CHANNELS};

use super::{Result, WorldError};

pub const CACHE_MAGIC: &[u8; 8] = b"TBEVCACH";
pub const CACHE_VERSION: u32 = 1;
const DETECTION_FIELDS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CachedAgent {
    /// row, col, score, x, y, w, l, yaw, vx, vy
    pub detection: [f32; DETECTION_FIELDS],
    pub forecast: Vec<f32>,
}

impl CachedAgent {
    pub fn new(d: &Detection, forecast: Vec<f32>) -> Self {
        Self {
            detection: [
                d.row as f32,
                d.col as f32,
                d.score as f32,
                d.x as f32,
                d.y as f32,
                d.w as f32,
                d.l as f32,
                d.yaw as f32,
                d.vx as f32,
                d.vy as f32,
            ],
            forecast,
        }
    }

    pub fn detection(&self) -> Detection {
        let v = |i: usize| self.detection[i] as f64;
        Detection {
            row: self.detection[0] as usize,
            col: self.detection[1] as usize,
            score: v(2),
            x: v(3),
            y: v(4),
            w: v(5),
            l: v(6),
            yaw: v(7),
            vx: v(8),
            vy: v(9),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub bev: Vec<f32>,
    pub heatmap: Vec<f32>,
    pub regression: Vec<f32>,
    pub agents: Vec<CachedAgent>,
    pub plan: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub bev_channels: usize,
    pub resolution: usize,
    pub horizon: usize,
    pub samples: Vec<TeacherSample>,
}

impl TeacherCache {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        w.u32(self.samples.len() as u32);
        w.u32(self.bev_channels as u32);
        w.u32(self.resolution as u32);
        w.u32(self.horizon as u32);
        for s in &self.samples {
            w.f32s(s.bev.iter().copied());
            w.f32s(s.heatmap.iter().copied());
            w.f32s(s.regression.iter().copied());
            w.u32(s.agents.len() as u32);
            for a in &s.agents {
                w.f32s(a.detection);
                w.f32s(a.forecast.iter().copied());
            }
            w.f32s(s.plan.iter().copied());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CACHE_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CACHE_VERSION {
            return Err(FormatError {
                offset: at,
                field: "version".into(),
                reason: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("sample count")? as usize;
        let bev_channels = r.u32("bev channels")? as usize;
        let resolution = r.u32("resolution")? as usize;
        let horizon = r.u32("horizon")? as usize;
        let cells = resolution
            .checked_mul(resolution)
            .ok_or_else(|| r.error("resolution", "overflow"))?;
        let traj = 2 * horizon;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let field = |f: &str| format!("sample {i} {f}");
            let bev = r.f32s(bev_channels * cells, &field("bev"))?;
            let heatmap = r.f32s(cells, &field("heatmap"))?;
            let regression = r.f32s(REG_CHANNELS * cells, &field("regression"))?;
            let n = r.u32(&field("agent count"))? as usize;
            if n > cells {
                return Err(r.error(&field("agent count"), format!("{n} agents exceed {cells} cells")));
            }
            let mut agents = Vec::with_capacity(n);
            for _ in 0..n {
                let d = r.f32s(DETECTION_FIELDS, &field("detection"))?;
                let forecast = r.f32s(traj, &field("forecast"))?;
                agents.push(CachedAgent {
                    detection: d.try_into().expect("fixed length"),
                    forecast,
                });
            }
            let plan = r.f32s(traj, &field("plan"))?;
            samples.push(TeacherSample {
                bev,
                heatmap,
                regression,
                agents,
                plan,
            });
        }
        r.finish()?;
        Ok(Self {
            bev_channels,
            resolution,
            horizon,
            samples,
        })
    }
}

pub fn write_cache(path: &Path, cache: &TeacherCache) -> Result<()> {
    std::fs::write(path, cache.encode()).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<TeacherCache> {
    let bytes = std::fs::read(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(TeacherCache::decode(&bytes)?)
}
