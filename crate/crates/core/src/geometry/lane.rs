//! Lane band: a centerline polyline with a half-width.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneBand {
    pub centerline: Vec<[f64; 2]>,
    pub half_width: f64,
}

impl LaneBand {
    /// Distance from `(x, y)` to the nearest centerline segment.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        match self.centerline.as_slice() {
            [] => f64::INFINITY,
            [p] => (x - p[0]).hypot(y - p[1]),
            pts => pts
                .windows(2)
                .map(|w| segment_distance([x, y], w[0], w[1]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.distance(x, y) <= self.half_width
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}
