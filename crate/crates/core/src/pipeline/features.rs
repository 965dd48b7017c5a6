//! Multi-scale per-view feature grids and bilinear sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// One pyramid level: an `height × width × channels` grid whose node `(x, y)`
/// sits at image pixel `(x·stride, y·stride)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLevel {
    pub stride: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureLevel {
    pub fn zeros(stride: f64, height: usize, width: usize, channels: usize) -> Self {
        Self {
            stride,
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(stride: f64, height: usize, width: usize, value: &[f64]) -> Self {
        let mut level = Self::zeros(stride, height, width, value.len());
        for cell in level.data.chunks_mut(value.len()) {
            cell.copy_from_slice(value);
        }
        level
    }

    pub fn node(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn node_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || !(self.stride > 0.0) {
            return Err(Error::ShapeMismatch("empty feature level".into()));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::ShapeMismatch(format!(
                "feature level holds {} values, expected {}",
                self.data.len(),
                self.height * self.width * self.channels
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("feature grid contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::ShapeMismatch("pyramid needs at least one level".into()));
        }
        let c = self.channels();
        for l in &self.levels {
            l.validate()?;
            if l.channels != c {
                return Err(Error::ShapeMismatch("pyramid levels disagree on channel count".into()));
            }
        }
        Ok(())
    }
}

/// Clamped bilinear cell lookup: corner indices, fractions, and whether each
/// axis is inside the grid (clamped axes have zero derivative).
struct Cell {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    live_x: bool,
    live_y: bool,
}

fn axis(p: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let live = p > 0.0 && p < max;
    let pc = p.clamp(0.0, max);
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64, live)
}

fn cell(level: &FeatureLevel, x: f64, y: f64) -> Cell {
    let (x0, x1, fx, live_x) = axis(x, level.width);
    let (y0, y1, fy, live_y) = axis(y, level.height);
    Cell {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        live_x,
        live_y,
    }
}

/// Bilinear interpolation at a position in grid units, clamped to the border.
pub fn sample_bilinear(level: &FeatureLevel, position: &Point2) -> Vec<f64> {
    let mut out = vec![0.0; level.channels];
    sample_into(level, position.x, position.y, 1.0, &mut out);
    out
}

/// `out += weight · sample(x, y)`.
pub(crate) fn sample_into(level: &FeatureLevel, x: f64, y: f64, weight: f64, out: &mut [f64]) {
    let c = cell(level, x, y);
    let w00 = (1.0 - c.fx) * (1.0 - c.fy) * weight;
    let w01 = c.fx * (1.0 - c.fy) * weight;
    let w10 = (1.0 - c.fx) * c.fy * weight;
    let w11 = c.fx * c.fy * weight;
    let (v00, v01, v10, v11) = (
        level.node(c.x0, c.y0),
        level.node(c.x1, c.y0),
        level.node(c.x0, c.y1),
        level.node(c.x1, c.y1),
    );
    for k in 0..out.len() {
        out[k] += w00 * v00[k] + w01 * v01[k] + w10 * v10[k] + w11 * v11[k];
    }
}

/// For upstream `g`: returns `(g·sample, g·∂sample/∂x, g·∂sample/∂y)`.
pub(crate) fn sample_vjp(level: &FeatureLevel, x: f64, y: f64, g: &[f64]) -> (f64, f64, f64) {
    let c = cell(level, x, y);
    let (v00, v01, v10, v11) = (
        level.node(c.x0, c.y0),
        level.node(c.x1, c.y0),
        level.node(c.x0, c.y1),
        level.node(c.x1, c.y1),
    );
    let (mut s00, mut s01, mut s10, mut s11) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..g.len() {
        s00 += g[k] * v00[k];
        s01 += g[k] * v01[k];
        s10 += g[k] * v10[k];
        s11 += g[k] * v11[k];
    }
    let value = (1.0 - c.fx) * (1.0 - c.fy) * s00 + c.fx * (1.0 - c.fy) * s01 + (1.0 - c.fx) * c.fy * s10 + c.fx * c.fy * s11;
    let dx = if c.live_x {
        (1.0 - c.fy) * (s01 - s00) + c.fy * (s11 - s10)
    } else {
        0.0
    };
    let dy = if c.live_y {
        (1.0 - c.fx) * (s10 - s00) + c.fx * (s11 - s01)
    } else {
        0.0
    };
    (value, dx, dy)
}

/// Derivative of the sampled vector with respect to the position, per channel.
pub fn sample_bilinear_jacobian(level: &FeatureLevel, position: &Point2) -> (Vec<f64>, Vec<f64>) {
    let n = level.channels;
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut g = vec![0.0; n];
    for k in 0..n {
        g[k] = 1.0;
        let (_, a, b) = sample_vjp(level, position.x, position.y, &g);
        dx[k] = a;
        dy[k] = b;
        g[k] = 0.0;
    }
    (dx, dy)
}
