//! Peak decoding of detection maps into ego-frame boxes.

use crate::geometry::{GridSpec, OrientedRect};

use super::REG_CHANNELS;

/// One sample's detection maps: `heatmap` is `[R·R]`, `regression` is
/// `[8, R·R]` in the channel order dx, dy, w, l, sin, cos, vx, vy.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMaps {
    pub grid: GridSpec,
    pub heatmap: Vec<f64>,
    pub regression: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Detection {
    pub fn rect(&self) -> OrientedRect {
        OrientedRect::new(self.x, self.y, self.w.abs(), self.l.abs(), self.yaw)
    }
}

/// Cells whose score beats every 3×3 neighbor (equal scores go to the lower
/// row-major index) and exceeds `threshold`, best first, at most `max`.
pub fn decode_detections(maps: &DetectionMaps, threshold: f64, max: usize) -> Vec<Detection> {
    let r = maps.grid.resolution;
    let cells = r * r;
    let h = &maps.heatmap;
    let mut peaks = Vec::new();
    for row in 0..r {
        for col in 0..r {
            let i = row * r + col;
            let s = h[i];
            if s <= threshold {
                continue;
            }
            let mut is_peak = true;
            'nb: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                    if (dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= r as i64 || cc >= r as i64 {
                        continue;
                    }
                    let j = rr as usize * r + cc as usize;
                    if h[j] > s || (h[j] == s && j < i) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push(i);
            }
        }
    }
    peaks.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    peaks.truncate(max);
    let cs = maps.grid.cell_size();
    let reg = |ch: usize, i: usize| maps.regression[ch * cells + i];
    debug_assert_eq!(maps.regression.len(), REG_CHANNELS * cells);
    peaks
        .into_iter()
        .map(|i| {
            let (row, col) = (i / r, i % r);
            let (cx, cy) = maps.grid.cell_center(row, col);
            Detection {
                row,
                col,
                score: h[i],
                x: cx + reg(0, i) * cs,
                y: cy + reg(1, i) * cs,
                w: reg(2, i),
                l: reg(3, i),
                yaw: reg(4, i).atan2(reg(5, i)),
                vx: reg(6, i),
                vy: reg(7, i),
            }
        })
        .collect()
}
