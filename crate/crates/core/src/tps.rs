//! Thin-plate spline interpolation in 2D.
//!
//! Kernel U(r) = r^2 log r plus an affine part; the fitted map passes through
//! every control pair exactly, and reproduces pure affine motions with zero
//! radial weights.

use crate::error::{Error, Result};
use crate::linalg;

pub type Point = (f64, f64);

#[derive(Clone, Debug)]
pub struct TpsMap {
    ctrl: Vec<Point>,
    // Radial weights and affine coefficients [a0, ax, ay] per output coord.
    wx: Vec<f64>,
    wy: Vec<f64>,
    ax: [f64; 3],
    ay: [f64; 3],
}

#[inline]
fn kernel_u(r2: f64) -> f64 {
    // r^2 log r = 0.5 * r^2 * ln(r^2); limit 0 at r = 0.
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl TpsMap {
    /// Fit the spline mapping `from[i]` exactly onto `to[i]`.
    pub fn fit(from: &[Point], to: &[Point]) -> Result<TpsMap> {
        let n = from.len();
        if n != to.len() {
            return Err(Error::dim(format!(
                "control point counts differ: {n} vs {}",
                to.len()
            )));
        }
        if n < 4 {
            return Err(Error::param(format!("need at least 4 control pairs, got {n}")));
        }
        let dim = n + 3;
        let mut a = vec![0.0; dim * dim];
        for i in 0..n {
            for j in 0..n {
                let dx = from[i].0 - from[j].0;
                let dy = from[i].1 - from[j].1;
                a[i * dim + j] = kernel_u(dx * dx + dy * dy);
            }
            a[i * dim + n] = 1.0;
            a[i * dim + n + 1] = from[i].0;
            a[i * dim + n + 2] = from[i].1;
            a[n * dim + i] = 1.0;
            a[(n + 1) * dim + i] = from[i].0;
            a[(n + 2) * dim + i] = from[i].1;
        }
        let mut b = vec![0.0; dim * 2];
        for i in 0..n {
            b[i * 2] = to[i].0;
            b[i * 2 + 1] = to[i].1;
        }
        linalg::solve(&mut a, &mut b, dim, 2).map_err(|_| {
            Error::DegeneratePose(
                "thin-plate spline system is singular (duplicate or collinear control points)"
                    .to_string(),
            )
        })?;
        let mut wx = Vec::with_capacity(n);
        let mut wy = Vec::with_capacity(n);
        for i in 0..n {
            wx.push(b[i * 2]);
            wy.push(b[i * 2 + 1]);
        }
        Ok(TpsMap {
            ctrl: from.to_vec(),
            wx,
            wy,
            ax: [b[n * 2], b[(n + 1) * 2], b[(n + 2) * 2]],
            ay: [b[n * 2 + 1], b[(n + 1) * 2 + 1], b[(n + 2) * 2 + 1]],
        })
    }

    pub fn apply(&self, p: Point) -> Point {
        let mut x = self.ax[0] + self.ax[1] * p.0 + self.ax[2] * p.1;
        let mut y = self.ay[0] + self.ay[1] * p.0 + self.ay[2] * p.1;
        for (c, (&wx, &wy)) in self.ctrl.iter().zip(self.wx.iter().zip(&self.wy)) {
            let dx = p.0 - c.0;
            let dy = p.1 - c.1;
            let u = kernel_u(dx * dx + dy * dy);
            x += wx * u;
            y += wy * u;
        }
        (x, y)
    }
}
