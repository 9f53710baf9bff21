//! SE(2) poses, BEV grid addressing, positional encodings and history
//! resampling. Everything here is pure and reentrant.

use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};
use ndarray::prelude::*;

pub use crate::ops::bilinear_sample;

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

/// A rigid 2-D transform: rotation by `yaw` then translation by (x, y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Pose2 {
        Pose2 { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn identity() -> Pose2 {
        Pose2 { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// Applies this pose to a point: R(yaw) * p + t.
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * p.0 - s * p.1 + self.x, s * p.0 + c * p.1 + self.y)
    }

    /// Rotates a vector (no translation); used for velocities.
    pub fn rotate(&self, v: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * v.0 - s * v.1, s * v.0 + c * v.1)
    }

    pub fn invert(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-c * self.x - s * self.y, s * self.x - c * self.y, -self.yaw)
    }

    /// Composition: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (x, y) = self.apply((other.x, other.y));
        Pose2::new(x, y, self.yaw + other.yaw)
    }
}

/// Applies `pose` to a sequence of points. Rejects non-finite input.
pub fn se2_apply(pose: &Pose2, points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if !pose.x.is_finite() || !pose.y.is_finite() || !pose.yaw.is_finite() {
        return Err(Error::Geometry("non-finite pose".into()));
    }
    points
        .iter()
        .map(|&p| {
            if !p.0.is_finite() || !p.1.is_finite() {
                return Err(Error::Geometry(format!("non-finite point ({}, {})", p.0, p.1)));
            }
            Ok(pose.apply(p))
        })
        .collect()
}

pub fn se2_invert(pose: &Pose2) -> Pose2 {
    pose.invert()
}

/// Square BEV grid: `range_m` half-extent in meters, symmetric about ego.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub range_m: f64,
    pub height_cells: usize,
    pub width_cells: usize,
}

impl GridSpec {
    pub fn new(range_m: f64, height_cells: usize, width_cells: usize) -> Result<GridSpec> {
        if range_m <= 0.0 || height_cells == 0 || width_cells == 0 {
            return Err(Error::Geometry(format!(
                "invalid grid spec: range {range_m}, {height_cells}x{width_cells}"
            )));
        }
        Ok(GridSpec { range_m, height_cells, width_cells })
    }

    pub fn cell_size_m(&self) -> (f64, f64) {
        (
            2.0 * self.range_m / self.height_cells as f64,
            2.0 * self.range_m / self.width_cells as f64,
        )
    }
}

/// Normalized grid coordinates; (0,0) is the (-range,-range) corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    pub u: f64,
    pub v: f64,
}

impl NormalizedPoint {
    pub fn in_grid(&self) -> bool {
        (0.0..=1.0).contains(&self.u) && (0.0..=1.0).contains(&self.v)
    }
}

/// Maps ego-frame metric points to normalized grid coordinates.
/// (-range,-range) -> (0,0); (+range,+range) -> (1,1). Out-of-grid points are
/// returned as-is (flagged via `in_grid`), never clamped.
pub fn ego_to_grid(spec: &GridSpec, points_ego: &[(f64, f64)]) -> Vec<NormalizedPoint> {
    points_ego
        .iter()
        .map(|&(x, y)| NormalizedPoint {
            u: (x + spec.range_m) / (2.0 * spec.range_m),
            v: (y + spec.range_m) / (2.0 * spec.range_m),
        })
        .collect()
}

pub fn grid_to_ego(spec: &GridSpec, pts: &[NormalizedPoint]) -> Vec<(f64, f64)> {
    pts.iter()
        .map(|p| (
            p.u * 2.0 * spec.range_m - spec.range_m,
            p.v * 2.0 * spec.range_m - spec.range_m,
        ))
        .collect()
}

/// Sinusoidal positional encoding. `positions` is (m, n_coord); `dim` must be
/// even and divisible by n_coord. Per coordinate axis, interleaved sin/cos
/// over geometrically spaced frequencies. Deterministic, differentiable.
pub fn sinusoidal_pe(positions: &Tensor, dim: usize) -> Result<Tensor> {
    let sh = positions.shape();
    assert_eq!(sh.len(), 2, "positions must be (m, n_coord)");
    let n_coord = sh[1];
    if dim % 2 != 0 {
        return Err(Error::Geometry(format!("pe dim must be even, got {dim}")));
    }
    if dim % n_coord != 0 || (dim / n_coord) % 2 != 0 {
        return Err(Error::Geometry(format!(
            "pe dim {dim} must be an even multiple of n_coord {n_coord}"
        )));
    }
    let dpc = dim / n_coord; // per-coordinate width
    let half = dpc / 2;
    let mut parts: Vec<Tensor> = Vec::with_capacity(n_coord * half * 2);
    for c in 0..n_coord {
        let col = positions.slice_ax(1, c, 1); // (m,1)
        for k in 0..half {
            let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
            let scaled = col.mul_s(freq);
            parts.push(scaled.sin());
            parts.push(scaled.cos());
        }
    }
    Ok(crate::tensor::concat(1, &parts))
}

/// One timestamped sample of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct ResampledTrack {
    pub points: Vec<TrackPoint>,
    /// Fewer than two valid source samples: nothing was fabricated.
    pub degenerate: bool,
}

/// Linearly resamples a track to `target_hz`. x and y interpolate linearly,
/// yaw along the shortest arc. Endpoints are preserved exactly. Output steps
/// whose bracketing source interval touches an invalid sample are invalid
/// (gaps are not bridged).
pub fn resample_history(track: &[TrackPoint], target_hz: f64) -> Result<ResampledTrack> {
    if track.len() >= 2 {
        for w in track.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Geometry("timestamps must be strictly increasing".into()));
            }
        }
    }
    let n_valid = track.iter().filter(|p| p.valid).count();
    if n_valid < 2 {
        return Ok(ResampledTrack { points: vec![], degenerate: true });
    }
    let t0 = track.first().unwrap().t;
    let t1 = track.last().unwrap().t;
    let dt = 1.0 / target_hz;
    let n_out = ((t1 - t0) / dt).round() as usize + 1;
    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let t = if k + 1 == n_out { t1 } else { t0 + k as f64 * dt };
        // bracketing source interval
        let hi = track.iter().position(|p| p.t >= t - 1e-12).unwrap_or(track.len() - 1);
        let (a, b) = if hi == 0 { (0, 0) } else { (hi - 1, hi) };
        if (track[b].t - t).abs() < 1e-9 {
            let p = track[b];
            out.push(p);
            continue;
        }
        let (pa, pb) = (track[a], track[b]);
        let valid = pa.valid && pb.valid;
        let s = (t - pa.t) / (pb.t - pa.t);
        let dyaw = wrap_angle(pb.yaw - pa.yaw);
        out.push(TrackPoint {
            t,
            x: pa.x + s * (pb.x - pa.x),
            y: pa.y + s * (pb.y - pa.y),
            yaw: wrap_angle(pa.yaw + s * dyaw),
            valid,
        });
    }
    Ok(ResampledTrack { points: out, degenerate: false })
}

/// Converts a slice of (x, y) pairs to an (m, 2) tensor constant.
pub fn points_tensor(points: &[(f64, f64)]) -> Tensor {
    let mut a = Arr::zeros(IxDyn(&[points.len(), 2]));
    for (i, p) in points.iter().enumerate() {
        a[[i, 0]] = p.0;
        a[[i, 1]] = p.1;
    }
    Tensor::constant(a)
}


/// Plain-f64 positional encoding of a single 2-D point (test/oracle helper).
pub fn pe_vec(u: f64, v: f64, dim: usize) -> Vec<f64> {
    let dpc = dim / 2;
    let half = dpc / 2;
    let mut out = Vec::with_capacity(dim);
    for &coord in &[u, v] {
        for k in 0..half {
            let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
            out.push((coord * freq).sin());
            out.push((coord * freq).cos());
        }
    }
    out
}
