//! Sensor-surrogate BEV rasterization: map/agent channels in the ego frame,
//! DDA ray-cast occlusion from the ego cell, and speckle noise. Segmentation
//! labels are always the clean (noise-free, unoccluded) class map.

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::gen::SceneGeometry;
use super::{AgentTrack, BevRasterInput};
use crate::geom::{GridSpec, Pose2};

pub const N_CHANNELS: usize = 6;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "drivable_area",
    "lane_marking",
    "road_boundary",
    "static_obstacle",
    "agent_occupancy",
    "occlusion_mask",
];

const CH_DRIVABLE: usize = 0;
const CH_MARKING: usize = 1;
const CH_BOUNDARY: usize = 2;
const CH_OBSTACLE: usize = 3;
const CH_AGENTS: usize = 4;
const CH_OCCLUSION: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Per-cell speckle probability on observation channels.
    pub rate: f64,
    /// When set, observation channels are zeroed in occluded cells.
    pub occlusion: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { rate: 0.0, occlusion: false }
    }
}

/// Rasterizes the scene at track index `cur` into `spec`-shaped channels in
/// the ego frame, plus clean per-cell segmentation labels.
pub fn rasterize(
    geo: &SceneGeometry,
    agents: &[AgentTrack],
    cur: usize,
    ego_pose: &Pose2,
    spec: &GridSpec,
    noise: &NoiseConfig,
    seed: u64,
) -> (BevRasterInput, Array2<u8>) {
    let (h, w) = (spec.height_cells, spec.width_cells);
    let (ch_m, cw_m) = spec.cell_size_m();
    let line_halfwidth = 0.5 * ch_m.min(cw_m);
    let mut channels = Array3::<f64>::zeros((N_CHANNELS, h, w));
    let mut labels = Array2::<u8>::zeros((h, w));

    // precompute agent footprints at `cur` (world frame)
    let footprints: Vec<(Pose2, f64, f64)> = agents
        .iter()
        .filter(|a| cur < a.states.len() && a.states[cur].valid)
        .map(|a| {
            let s = a.state(cur);
            let (l, wd) = a.kind.footprint();
            (Pose2::new(s.x, s.y, s.yaw), l / 2.0, wd / 2.0)
        })
        .collect();

    for i in 0..h {
        for j in 0..w {
            // row i runs along ego y, column j along ego x
            let ex = (j as f64 + 0.5) * cw_m - spec.range_m;
            let ey = (i as f64 + 0.5) * ch_m - spec.range_m;
            let world = ego_pose.apply((ex, ey));

            let sd = geo.signed_corridor_distance(world);
            if sd <= 0.0 {
                channels[[CH_DRIVABLE, i, j]] = 1.0;
                labels[[i, j]] = 1;
            }
            let marking = geo
                .corridors
                .iter()
                .map(|c| super::gen::dist_to_polyline(world, &c.center))
                .fold(f64::INFINITY, f64::min)
                <= line_halfwidth;
            if marking {
                channels[[CH_MARKING, i, j]] = 1.0;
                labels[[i, j]] = 2;
            }
            if sd.abs() <= line_halfwidth {
                channels[[CH_BOUNDARY, i, j]] = 1.0;
                labels[[i, j]] = 3;
            }
            if geo.obstacles.iter().any(|o| o.contains(world)) {
                channels[[CH_OBSTACLE, i, j]] = 1.0;
                labels[[i, j]] = 4;
            }
            for (pose, hl, hw_) in &footprints {
                let local = pose.invert().apply(world);
                if local.0.abs() <= *hl && local.1.abs() <= *hw_ {
                    channels[[CH_AGENTS, i, j]] = 1.0;
                    break;
                }
            }
        }
    }

    // ego cell in (row, col) = (y, x)
    let origin = (
        ((0.0 + spec.range_m) / ch_m - 0.5).round().clamp(0.0, (h - 1) as f64) as usize,
        ((0.0 + spec.range_m) / cw_m - 0.5).round().clamp(0.0, (w - 1) as f64) as usize,
    );
    let blockers = Array2::from_shape_fn((h, w), |(i, j)| channels[[CH_OBSTACLE, i, j]] > 0.5);
    let occluded = raycast_occlusion(&blockers, origin);
    for i in 0..h {
        for j in 0..w {
            if occluded[[i, j]] {
                channels[[CH_OCCLUSION, i, j]] = 1.0;
                if noise.occlusion {
                    for c in 0..CH_OCCLUSION {
                        channels[[c, i, j]] = 0.0;
                    }
                }
            }
        }
    }

    if noise.rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in 0..CH_OCCLUSION {
            for i in 0..h {
                for j in 0..w {
                    if rng.random::<f64>() < noise.rate {
                        channels[[c, i, j]] = rng.random::<f64>();
                    }
                }
            }
        }
    }

    (BevRasterInput { channels, spec: *spec }, labels)
}

/// Marks cells whose line of sight from the `origin` cell (row, col) is
/// blocked. A cell is occluded when the ray from the origin cell center to
/// its center passes through the interior of a blocker cell strictly between
/// the two endpoints. Grid traversal is the Amanatides–Woo DDA; a ray that
/// exactly grazes a cell corner steps diagonally and is not blocked by the
/// corner cells. Blocker cells themselves stay visible (the sensor sees
/// their front face).
pub fn raycast_occlusion(blockers: &Array2<bool>, origin: (usize, usize)) -> Array2<bool> {
    let (h, w) = blockers.dim();
    let mut out = Array2::from_elem((h, w), false);
    let o = (origin.0 as f64 + 0.5, origin.1 as f64 + 0.5);
    for ti in 0..h {
        for tj in 0..w {
            if (ti, tj) == origin {
                continue;
            }
            let di = ti as f64 + 0.5 - o.0;
            let dj = tj as f64 + 0.5 - o.1;
            let (mut ci, mut cj) = (origin.0 as i64, origin.1 as i64);
            let step_i: i64 = if di > 0.0 { 1 } else { -1 };
            let step_j: i64 = if dj > 0.0 { 1 } else { -1 };
            // parameter t in [0,1] at which the ray crosses the next cell
            // boundary along each axis; cell centers sit at half-integers so
            // the first boundary is half a cell away
            let mut t_max_i = if di != 0.0 { 0.5 / di.abs() } else { f64::INFINITY };
            let mut t_max_j = if dj != 0.0 { 0.5 / dj.abs() } else { f64::INFINITY };
            let t_delta_i = if di != 0.0 { 1.0 / di.abs() } else { f64::INFINITY };
            let t_delta_j = if dj != 0.0 { 1.0 / dj.abs() } else { f64::INFINITY };
            loop {
                if (t_max_i - t_max_j).abs() < 1e-12 {
                    // exact corner: step diagonally, grazing blocks nothing
                    if t_max_i >= 1.0 {
                        break;
                    }
                    ci += step_i;
                    cj += step_j;
                    t_max_i += t_delta_i;
                    t_max_j += t_delta_j;
                } else if t_max_i < t_max_j {
                    if t_max_i >= 1.0 {
                        break;
                    }
                    ci += step_i;
                    t_max_i += t_delta_i;
                } else {
                    if t_max_j >= 1.0 {
                        break;
                    }
                    cj += step_j;
                    t_max_j += t_delta_j;
                }
                if (ci, cj) == (ti as i64, tj as i64) {
                    break;
                }
                if ci < 0 || cj < 0 || ci >= h as i64 || cj >= w as i64 {
                    break;
                }
                if blockers[[ci as usize, cj as usize]] {
                    out[[ti, tj]] = true;
                    break;
                }
            }
        }
    }
    out
}
