//! Oriented rectangles in the ground plane and their separating-axis test.

/// Rectangle centered at `(cx, cy)`, `length` along its heading `yaw` and
/// `width` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
}

impl OrientedRect {
    pub fn new(cx: f64, cy: f64, width: f64, length: f64, yaw: f64) -> Self {
        Self { cx, cy, width, length, yaw }
    }

    /// Unit heading and unit lateral axes.
    pub fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.yaw.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [f, l] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (k, (a, b)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)].into_iter().enumerate() {
            out[k] = [
                self.cx + a * hl * f[0] + b * hw * l[0],
                self.cy + a * hl * f[1] + b * hw * l[1],
            ];
        }
        out
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [f, l] = self.axes();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * f[0] + dy * f[1]).abs() <= self.length / 2.0 && (dx * l[0] + dy * l[1]).abs() <= self.width / 2.0
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width.hypot(self.length)
    }

    fn project(&self, axis: [f64; 2]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in self.corners() {
            let d = p[0] * axis[0] + p[1] * axis[1];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }

    /// Separating-axis test over the four edge normals; touching counts as
    /// intersecting.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let dist = (self.cx - other.cx).hypot(self.cy - other.cy);
        if dist > self.half_diagonal() + other.half_diagonal() {
            return false;
        }
        self.axes().into_iter().chain(other.axes()).all(|axis| {
            let (a_lo, a_hi) = self.project(axis);
            let (b_lo, b_hi) = other.project(axis);
            a_hi >= b_lo && b_hi >= a_lo
        })
    }
}
