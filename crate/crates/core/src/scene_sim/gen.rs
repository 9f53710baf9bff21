//! Scene generation: road topology, routes, kinematically bounded agents and
//! target selection. Deterministic per (seed, config).

use std::f64::consts::PI;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::raster::{rasterize, NoiseConfig};
use super::{AgentKind, AgentState, AgentTrack, SceneSample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, GridSpec, Pose2};

const DT: f64 = 0.1;
const ROUTE_STEP: f64 = 1.0;
/// Comfortable braking bound used when smoothing speed profiles; the hard
/// feasibility bound checked post hoc is 4 m/s^2.
const A_LIM: f64 = 2.0;
const MIN_SPEED: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_agents_min: usize,
    pub n_agents_max: usize,
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub turn_probability: f64,
    pub accel_noise: f64,
    pub lat_noise: f64,
    pub n_obstacles_max: usize,
    pub hard_case_filter: bool,
    pub min_displacement: f64,
    pub sensing_range: f64,
    pub t_history: usize,
    pub t_future: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub noise: NoiseConfig,
    pub target_ego: bool,
}

impl GenConfig {
    pub fn from_run(cfg: &RunConfig) -> GenConfig {
        GenConfig {
            n_agents_min: cfg.n_agents_min,
            n_agents_max: cfg.n_agents_max,
            lane_width: cfg.lane_width,
            speed_min: cfg.speed_min,
            speed_max: cfg.speed_max,
            turn_probability: cfg.turn_probability,
            accel_noise: cfg.accel_noise,
            lat_noise: cfg.lat_noise,
            n_obstacles_max: cfg.n_obstacles_max,
            hard_case_filter: cfg.hard_case_filter,
            min_displacement: cfg.min_displacement,
            sensing_range: cfg.range_m,
            t_history: cfg.t_history,
            t_future: cfg.t_future,
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            noise: NoiseConfig { rate: cfg.noise_rate, occlusion: cfg.occlusion },
            target_ego: cfg.target_ego,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lane_width <= 2.0 {
            return Err(Error::Config("lane_width must exceed agent width".into()));
        }
        if self.speed_min <= 0.0 || self.speed_max < self.speed_min {
            return Err(Error::Config("invalid speed limits".into()));
        }
        if self.n_agents_min == 0 || self.n_agents_max < self.n_agents_min {
            return Err(Error::Config("invalid agent count range".into()));
        }
        if self.t_history < 2 || self.t_future == 0 {
            return Err(Error::Config("invalid horizon".into()));
        }
        Ok(())
    }
}

pub type Polyline = Vec<(f64, f64)>;

#[derive(Debug, Clone)]
pub struct Corridor {
    pub center: Polyline,
    pub halfwidth: f64,
}

#[derive(Debug, Clone)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub half_l: f64,
    pub half_w: f64,
    pub angle: f64,
}

impl Obstacle {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = p.0 - self.cx;
        let dy = p.1 - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half_l && ly.abs() <= self.half_w
    }
}

/// Static world description the rasterizer consumes; kept around for
/// label-consistency checks.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub corridors: Vec<Corridor>,
    pub lane_centers: Vec<Polyline>,
    pub obstacles: Vec<Obstacle>,
    /// Routes agents drive along (lane centerlines stitched through turns).
    pub routes: Vec<Polyline>,
}

impl SceneGeometry {
    pub fn signed_corridor_distance(&self, p: (f64, f64)) -> f64 {
        self.corridors
            .iter()
            .map(|c| dist_to_polyline(p, &c.center) - c.halfwidth)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn dist_to_polyline(p: (f64, f64), line: &Polyline) -> f64 {
    let mut best = f64::INFINITY;
    for w in line.windows(2) {
        best = best.min(dist_to_segment(p, w[0], w[1]));
    }
    best
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let abx = b.0 - a.0;
    let aby = b.1 - a.1;
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let qx = a.0 + t * abx;
    let qy = a.1 + t * aby;
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn line_pts(from: (f64, f64), heading: f64, length: f64) -> Polyline {
    let n = (length / ROUTE_STEP).ceil() as usize;
    let (s, c) = heading.sin_cos();
    (0..=n)
        .map(|i| {
            let d = i as f64 * length / n as f64;
            (from.0 + d * c, from.1 + d * s)
        })
        .collect()
}

fn arc_pts(center: (f64, f64), radius: f64, a0: f64, a1: f64) -> Polyline {
    let span = a1 - a0;
    let n = ((radius * span.abs()) / ROUTE_STEP).ceil().max(4.0) as usize;
    (0..=n)
        .map(|i| {
            let a = a0 + span * i as f64 / n as f64;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        })
        .collect()
}

fn offset_polyline(line: &Polyline, offset: f64) -> Polyline {
    let mut out = Vec::with_capacity(line.len());
    for i in 0..line.len() {
        let (a, b) = if i + 1 < line.len() {
            (line[i], line[i + 1])
        } else {
            (line[i - 1], line[i])
        };
        let dx = b.0 - a.0;
        let dy = b.1 - a.1;
        let len = (dx * dx + dy * dy).sqrt().max(1e-9);
        // right-hand normal
        let nx = dy / len;
        let ny = -dx / len;
        out.push((line[i].0 + offset * nx, line[i].1 + offset * ny));
    }
    out
}

fn cumulative_lengths(line: &Polyline) -> Vec<f64> {
    let mut acc = vec![0.0; line.len()];
    for i in 1..line.len() {
        let dx = line[i].0 - line[i - 1].0;
        let dy = line[i].1 - line[i - 1].1;
        acc[i] = acc[i - 1] + (dx * dx + dy * dy).sqrt();
    }
    acc
}

/// Position and tangent heading at arc length `s` along a polyline.
fn point_at(line: &Polyline, cum: &[f64], s: f64) -> ((f64, f64), f64) {
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let i = match cum.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(line.len() - 2),
        Err(i) => (i.max(1) - 1).min(line.len() - 2),
    };
    let seg = (cum[i + 1] - cum[i]).max(1e-9);
    let t = (s - cum[i]) / seg;
    let a = line[i];
    let b = line[i + 1];
    let p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
    let heading = (b.1 - a.1).atan2(b.0 - a.0);
    (p, heading)
}

/// Per-vertex curvature magnitude of a polyline (three-point estimate).
fn curvatures(line: &Polyline) -> Vec<f64> {
    let n = line.len();
    let mut k = vec![0.0; n];
    for i in 1..n.saturating_sub(1) {
        let h0 = (line[i].1 - line[i - 1].1).atan2(line[i].0 - line[i - 1].0);
        let h1 = (line[i + 1].1 - line[i].1).atan2(line[i + 1].0 - line[i].0);
        let ds = 0.5
            * (((line[i].0 - line[i - 1].0).powi(2) + (line[i].1 - line[i - 1].1).powi(2)).sqrt()
                + ((line[i + 1].0 - line[i].0).powi(2) + (line[i + 1].1 - line[i].1).powi(2))
                    .sqrt());
        k[i] = wrap_angle(h1 - h0).abs() / ds.max(1e-9);
    }
    k
}

/// Max feasible speed at each vertex: yaw-rate bound on curves plus a
/// backward pass limiting deceleration demand.
fn speed_profile(line: &Polyline, cum: &[f64], vmax: f64) -> Vec<f64> {
    let ks = curvatures(line);
    let n = line.len();
    let mut prof: Vec<f64> = (0..n)
        .map(|i| {
            if ks[i] > 1e-6 {
                (0.85 / ks[i]).min(vmax)
            } else {
                vmax
            }
        })
        .collect();
    for i in (0..n - 1).rev() {
        let ds = cum[i + 1] - cum[i];
        let reach = (prof[i + 1] * prof[i + 1] + 2.0 * A_LIM * ds).sqrt();
        prof[i] = prof[i].min(reach);
    }
    prof
}

enum Topology {
    Straight,
    Curve,
    ThreeWay,
    FourWay,
}

fn build_geometry(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> SceneGeometry {
    let lw = cfg.lane_width;
    let topo = match rng.random_range(0..4u32) {
        0 => Topology::Straight,
        1 => Topology::Curve,
        2 => Topology::ThreeWay,
        _ => Topology::FourWay,
    };
    let theta = rng.random_range(0.0..2.0 * PI);
    let off = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
    let ext = 140.0;

    let mut corridors = Vec::new();
    let mut lane_centers: Vec<Polyline> = Vec::new();
    let mut routes: Vec<Polyline> = Vec::new();

    let axis = |heading: f64| -> Polyline {
        let (s, c) = heading.sin_cos();
        let start = (off.0 - ext * c, off.1 - ext * s);
        line_pts(start, heading, 2.0 * ext)
    };

    match topo {
        Topology::Straight => {
            let center = axis(theta);
            corridors.push(Corridor { center: center.clone(), halfwidth: lw });
            let fwd = offset_polyline(&center, lw / 2.0);
            let mut bwd = offset_polyline(&center, -lw / 2.0);
            bwd.reverse();
            lane_centers.push(fwd.clone());
            lane_centers.push(bwd.clone());
            routes.push(fwd);
            routes.push(bwd);
        }
        Topology::Curve => {
            let radius = rng.random_range(25.0..60.0);
            let c0 = rng.random_range(0.0..2.0 * PI);
            let span = (2.0 * ext / radius).min(1.6 * PI);
            let ctr = (off.0, off.1);
            let center = arc_pts(ctr, radius, c0, c0 + span);
            corridors.push(Corridor { center: center.clone(), halfwidth: lw });
            let inner = arc_pts(ctr, radius - lw / 2.0, c0, c0 + span);
            let mut outer = arc_pts(ctr, radius + lw / 2.0, c0, c0 + span);
            outer.reverse();
            lane_centers.push(inner.clone());
            lane_centers.push(outer.clone());
            routes.push(inner);
            routes.push(outer);
        }
        Topology::ThreeWay | Topology::FourWay {} => {
            let four = matches!(topo, Topology::FourWay);
            let a = axis(theta);
            corridors.push(Corridor { center: a.clone(), halfwidth: lw });
            let b = if four {
                axis(theta + PI / 2.0)
            } else {
                // stub: from junction outward only
                line_pts(off, theta + PI / 2.0, ext)
            };
            corridors.push(Corridor { center: b.clone(), halfwidth: lw });
            for road in [&a, &b] {
                let fwd = offset_polyline(road, lw / 2.0);
                let mut bwd = offset_polyline(road, -lw / 2.0);
                bwd.reverse();
                lane_centers.push(fwd.clone());
                lane_centers.push(bwd.clone());
                routes.push(fwd);
                routes.push(bwd);
            }
            // turning routes through the junction
            let turn_r = 8.0;
            for &(h_in, h_out) in &[
                (theta, theta + PI / 2.0),
                (theta, theta - PI / 2.0),
                (theta + PI, theta + PI / 2.0),
                (theta + PI, theta - PI / 2.0),
            ] {
                if !four {
                    // only the existing stub (heading theta+pi/2) can be entered or left
                    let stub = wrap_angle(theta + PI / 2.0);
                    if wrap_angle(h_out - stub).abs() > 1e-6 && wrap_angle(h_in + PI - stub).abs() > 1e-6
                    {
                        continue;
                    }
                }
                routes.push(turn_route(off, h_in, h_out, lw, turn_r, ext));
            }
        }
    }
    SceneGeometry { corridors, lane_centers, obstacles: vec![], routes }
}

/// Right-hand-traffic turn route: approach lane, arc, exit lane.
fn turn_route(
    junction: (f64, f64),
    h_in: f64,
    h_out: f64,
    lane_width: f64,
    turn_r: f64,
    ext: f64,
) -> Polyline {
    let lw2 = lane_width / 2.0;
    let (si, ci) = h_in.sin_cos();
    let (so, co) = h_out.sin_cos();
    // lane centers: right-hand offset from road axis
    let in_off = (si * lw2, -ci * lw2);
    let out_off = (so * lw2, -co * lw2);
    let pre = turn_r + lw2;
    // approach: from far away up to `pre` before the junction along h_in lane
    let appr_end = (
        junction.0 - pre * ci + in_off.0,
        junction.1 - pre * si + in_off.1,
    );
    let appr_start = (appr_end.0 - (ext - pre) * ci, appr_end.1 - (ext - pre) * si);
    let mut route = line_pts(appr_start, h_in, ext - pre);
    // exit: from `pre` past the junction along h_out lane
    let exit_start = (
        junction.0 + pre * co + out_off.0,
        junction.1 + pre * so + out_off.1,
    );
    // quadratic Bezier blend whose control point is the intersection of the
    // approach and exit tangent lines, so headings stay continuous
    let det = ci * so - si * co;
    let ctrl = if det.abs() > 1e-6 {
        let t = ((exit_start.0 - appr_end.0) * so - (exit_start.1 - appr_end.1) * co) / det;
        (appr_end.0 + t * ci, appr_end.1 + t * si)
    } else {
        ((appr_end.0 + exit_start.0) / 2.0, (appr_end.1 + exit_start.1) / 2.0)
    };
    let n_arc = 24;
    for i in 1..=n_arc {
        let t = i as f64 / n_arc as f64;
        let x = (1.0 - t) * (1.0 - t) * appr_end.0 + 2.0 * (1.0 - t) * t * ctrl.0 + t * t * exit_start.0;
        let y = (1.0 - t) * (1.0 - t) * appr_end.1 + 2.0 * (1.0 - t) * t * ctrl.1 + t * t * exit_start.1;
        route.push((x, y));
    }
    let mut tail = line_pts(exit_start, h_out, ext - pre);
    route.append(&mut tail.split_off(1));
    route
}

fn place_obstacles(rng: &mut ChaCha8Rng, geo: &mut SceneGeometry, cfg: &GenConfig) {
    let n = rng.random_range(0..=cfg.n_obstacles_max);
    let mut placed = 0;
    let mut tries = 0;
    while placed < n && tries < 200 {
        tries += 1;
        let route = &geo.routes[rng.random_range(0..geo.routes.len())];
        let idx = rng.random_range(0..route.len());
        let base = route[idx];
        let ang = rng.random_range(0.0..PI);
        let d = rng.random_range(3.0..10.0);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let p = (base.0 + side * d * ang.cos(), base.1 + side * d * ang.sin());
        let half_l: f64 = rng.random_range(1.0..4.0);
        let half_w: f64 = rng.random_range(1.0..3.0);
        let clearance = geo.signed_corridor_distance(p);
        if clearance > half_l.max(half_w) + 0.5 {
            geo.obstacles.push(Obstacle {
                cx: p.0,
                cy: p.1,
                half_l,
                half_w,
                angle: rng.random_range(0.0..PI),
            });
            placed += 1;
        }
    }
}

struct AgentPlan {
    kind: AgentKind,
    route_idx: usize,
    s0: f64,
    v0: f64,
    lat_amp: f64,
    lat_period: f64,
    lat_phase: f64,
    lat_extra: f64,
    accel_seq: Vec<f64>,
}

fn simulate_agent(
    plan: &AgentPlan,
    geo: &SceneGeometry,
    cfg: &GenConfig,
    n_steps: usize,
) -> Vec<(f64, f64)> {
    let route = &geo.routes[plan.route_idx];
    let cum = cumulative_lengths(route);
    let vmax_kind = match plan.kind {
        AgentKind::Vehicle => cfg.speed_max,
        AgentKind::Pedestrian => 1.8_f64.min(cfg.speed_max),
        AgentKind::Cyclist => 6.0_f64.min(cfg.speed_max),
    };
    let prof = speed_profile(route, &cum, vmax_kind);
    let vmax_at = |s: f64| -> f64 {
        let (_, _) = point_at(route, &cum, s);
        // nearest vertex lookup
        let i = match cum.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(prof.len() - 1),
        };
        prof[i]
    };
    let mut s = plan.s0;
    let mut v = plan.v0.min(vmax_at(plan.s0));
    let mut out = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = i as f64 * DT;
        let a = plan.accel_seq[(t as usize).min(plan.accel_seq.len() - 1)];
        // rate-limit longitudinal accel so the total (with lateral wobble)
        // stays inside the 4 m/s^2 feasibility bound
        let desired = (v + a * DT).min(vmax_at(s));
        v = (v + (desired - v).clamp(-3.0 * DT, 3.0 * DT)).max(MIN_SPEED);
        s += v * DT;
        let (p, _) = point_at(route, &cum, s);
        // smoothed tangent: the per-segment heading is piecewise constant and
        // would make the lateral offset jump at every route vertex
        let (pm, _) = point_at(route, &cum, s - 0.5);
        let (pp, _) = point_at(route, &cum, s + 0.5);
        let heading = (pp.1 - pm.1).atan2(pp.0 - pm.0);
        let lat = plan.lat_extra
            + plan.lat_amp * (2.0 * PI * t / plan.lat_period + plan.lat_phase).sin();
        let (sh, ch) = heading.sin_cos();
        out.push((p.0 + lat * sh, p.1 - lat * ch));
    }
    out
}

fn positions_to_states(pos: &[(f64, f64)]) -> Vec<AgentState> {
    let n = pos.len();
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let (vx, vy) = if i + 1 < n {
            ((pos[i + 1].0 - pos[i].0) / DT, (pos[i + 1].1 - pos[i].1) / DT)
        } else {
            (
                (pos[i].0 - pos[i - 1].0) / DT,
                (pos[i].1 - pos[i - 1].1) / DT,
            )
        };
        let yaw = vy.atan2(vx);
        states.push(AgentState { t: i as f64 * DT, x: pos[i].0, y: pos[i].1, yaw, vx, vy, valid: true });
    }
    states
}

fn total_displacement(track: &AgentTrack, from: usize) -> f64 {
    let a = track.states[from];
    let b = *track.states.last().unwrap();
    ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt()
}

fn future_heading_change(track: &AgentTrack, from: usize) -> f64 {
    let mut acc = 0.0;
    for w in track.states[from..].windows(2) {
        acc += wrap_angle(w[1].yaw - w[0].yaw).abs();
    }
    acc
}

/// Generates one labeled scene. Pure function of (seed, cfg); internally the
/// sampler retries with derived sub-seeds until a valid target exists, so the
/// result stays deterministic.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSample> {
    generate_scene_full(seed, cfg).map(|(s, _)| s)
}

pub fn generate_scene_full(seed: u64, cfg: &GenConfig) -> Result<(SceneSample, SceneGeometry)> {
    cfg.validate()?;
    for attempt in 0..100u64 {
        let sub = seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(attempt.wrapping_mul(0xC2B2AE3D27D4EB4F));
        if let Some(out) = try_generate(seed, sub, cfg)? {
            return Ok(out);
        }
    }
    Err(Error::Model(format!(
        "no valid target found for seed {seed} after 100 attempts; config too restrictive"
    )))
}

fn try_generate(
    scene_id_seed: u64,
    sub_seed: u64,
    cfg: &GenConfig,
) -> Result<Option<(SceneSample, SceneGeometry)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let mut geo = build_geometry(&mut rng, cfg);
    place_obstacles(&mut rng, &mut geo, cfg);

    let n_steps = cfg.t_history + cfg.t_future;
    let n_agents = rng.random_range(cfg.n_agents_min..=cfg.n_agents_max);
    let mut agents: Vec<AgentTrack> = Vec::with_capacity(n_agents);
    for id in 0..n_agents {
        let kind = if id == 0 {
            AgentKind::Vehicle // ego
        } else {
            match rng.random_range(0..10u32) {
                0 => AgentKind::Pedestrian,
                1 => AgentKind::Cyclist,
                _ => AgentKind::Vehicle,
            }
        };
        // vehicles may take turning routes; others stay on plain lanes
        let n_plain = geo.lane_centers.len();
        let route_idx = if kind == AgentKind::Vehicle
            && geo.routes.len() > n_plain
            && rng.random::<f64>() < cfg.turn_probability
        {
            rng.random_range(n_plain..geo.routes.len())
        } else {
            rng.random_range(0..n_plain)
        };
        let route_len = *cumulative_lengths(&geo.routes[route_idx]).last().unwrap();
        let horizon = cfg.speed_max * n_steps as f64 * DT;
        let hi = (route_len - horizon - 1.0).max(2.0);
        let s0 = rng.random_range(1.0..hi.max(2.0));
        let accel_secs = (n_steps as f64 * DT).ceil() as usize + 1;
        let plan = AgentPlan {
            kind,
            route_idx,
            s0,
            v0: rng.random_range(cfg.speed_min..=cfg.speed_max),
            lat_amp: rng.random_range(0.0..=cfg.lat_noise.max(1e-9)),
            lat_period: rng.random_range(4.0..8.0),
            lat_phase: rng.random_range(0.0..2.0 * PI),
            lat_extra: if kind == AgentKind::Pedestrian {
                // walk along the shoulder
                cfg.lane_width * 0.5 + 0.8
            } else {
                0.0
            },
            accel_seq: (0..accel_secs)
                .map(|_| rng.random_range(-cfg.accel_noise..=cfg.accel_noise))
                .collect(),
        };
        let pos = simulate_agent(&plan, &geo, cfg, n_steps);
        let mut states = positions_to_states(&pos);
        // detection dropouts on non-ego agents
        if id != 0 {
            if rng.random::<f64>() < 0.3 {
                let cut = rng.random_range(1..=10usize.min(cfg.t_history - 2));
                for s in states.iter_mut().take(cut) {
                    s.valid = false;
                }
            }
            if rng.random::<f64>() < 0.15 {
                let cut = cfg.t_history + rng.random_range(cfg.t_future / 2..cfg.t_future);
                for s in states.iter_mut().skip(cut) {
                    s.valid = false;
                }
            }
        }
        agents.push(AgentTrack { agent_id: id as u32, kind, states });
    }

    let cur = cfg.t_history - 1;
    let ego_state = *agents[0].state(cur);
    let ego_pose = Pose2::new(ego_state.x, ego_state.y, ego_state.yaw);

    let target_id = select_target(&agents, &ego_pose, cfg, cur);
    let Some(target_id) = target_id else {
        return Ok(None);
    };

    let spec = GridSpec::new(cfg.sensing_range, cfg.grid_h, cfg.grid_w)
        .map_err(|e| Error::Config(e.to_string()))?;
    let raster_seed = sub_seed ^ 0x5EED_0F_0CEA;
    let (raster, seg_labels) = rasterize(&geo, &agents, cur, &ego_pose, &spec, &cfg.noise, raster_seed);

    let sample = SceneSample {
        scene_id: scene_id_seed,
        ego_pose,
        target_id,
        agents,
        raster,
        seg_labels,
        t_history: cfg.t_history,
        t_future: cfg.t_future,
    };
    Ok(Some((sample, geo)))
}

fn select_target(
    agents: &[AgentTrack],
    ego_pose: &Pose2,
    cfg: &GenConfig,
    cur: usize,
) -> Option<u32> {
    if cfg.target_ego {
        let ego = &agents[0];
        if passes_filter(ego, cfg, cur) {
            return Some(0);
        }
        return None;
    }
    let mut best: Option<(f64, u32)> = None;
    for a in agents.iter().skip(1) {
        if a.kind != AgentKind::Vehicle {
            continue;
        }
        if !a.states.iter().skip(cur).all(|s| s.valid) {
            continue;
        }
        let s = a.state(cur);
        let d = ((s.x - ego_pose.x).powi(2) + (s.y - ego_pose.y).powi(2)).sqrt();
        if d > cfg.sensing_range * 0.9 {
            continue;
        }
        if !passes_filter(a, cfg, cur) {
            continue;
        }
        if best.map(|(bd, _)| d < bd).unwrap_or(true) {
            best = Some((d, a.agent_id));
        }
    }
    best.map(|(_, id)| id)
}

fn passes_filter(track: &AgentTrack, cfg: &GenConfig, cur: usize) -> bool {
    let disp = total_displacement(track, cur);
    if disp < cfg.min_displacement {
        return false;
    }
    if cfg.hard_case_filter {
        // exclude straight-only movers: demand some turning in the future
        if future_heading_change(track, cur) < 0.15 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> GenConfig {
        GenConfig::from_run(&RunConfig::default())
    }

    fn small_cfg() -> GenConfig {
        let mut c = test_cfg();
        c.grid_h = 32;
        c.grid_w = 32;
        c
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small_cfg();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &cfg).unwrap();
        assert_ne!(a.scene_id, c.scene_id);
    }

    #[test]
    fn tracks_satisfy_kinematic_bounds() {
        let cfg = small_cfg();
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            for a in &s.agents {
                for w in a.states.windows(2) {
                    if !(w[0].valid && w[1].valid) {
                        continue;
                    }
                    let v0 = (w[0].vx.powi(2) + w[0].vy.powi(2)).sqrt();
                    let v1 = (w[1].vx.powi(2) + w[1].vy.powi(2)).sqrt();
                    let acc = (v1 - v0) / DT;
                    assert!(acc.abs() <= 4.0 + 1e-6, "accel bound violated: {acc}");
                    if v0 > 0.5 {
                        let yr = wrap_angle(w[1].yaw - w[0].yaw) / DT;
                        assert!(yr.abs() <= 1.0 + 0.1, "yaw rate violated: {yr}");
                    }
                }
            }
        }
    }

    #[test]
    fn speed_consistent_with_positions() {
        let cfg = small_cfg();
        let s = generate_scene(3, &cfg).unwrap();
        for a in &s.agents {
            for i in 0..a.states.len() - 1 {
                let (p0, p1) = (a.states[i], a.states[i + 1]);
                if !(p0.valid && p1.valid) {
                    continue;
                }
                let step = ((p1.x - p0.x).powi(2) + (p1.y - p0.y).powi(2)).sqrt() / DT;
                let spd = (p0.vx.powi(2) + p0.vy.powi(2)).sqrt();
                if spd > 0.5 {
                    assert!(
                        (step - spd).abs() / spd < 0.10,
                        "speed inconsistent: {step} vs {spd}"
                    );
                }
            }
        }
    }

    #[test]
    fn timestamps_strictly_increasing() {
        let cfg = small_cfg();
        let s = generate_scene(11, &cfg).unwrap();
        for a in &s.agents {
            for w in a.states.windows(2) {
                assert!(w[1].t > w[0].t);
            }
        }
    }

    #[test]
    fn target_has_fully_valid_future_within_range() {
        let cfg = small_cfg();
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            let t = s.target_track();
            assert!(t.states.iter().skip(s.current_idx()).all(|st| st.valid));
            let st = t.state(s.current_idx());
            let d = ((st.x - s.ego_pose.x).powi(2) + (st.y - s.ego_pose.y).powi(2)).sqrt();
            assert!(d <= cfg.sensing_range);
        }
    }

    #[test]
    fn straight_road_zero_turn_prob_follows_lane() {
        let mut cfg = small_cfg();
        cfg.turn_probability = 0.0;
        cfg.lat_noise = 0.2;
        for seed in 0..30u64 {
            let (s, geo) = generate_scene_full(seed, &cfg).unwrap();
            let target = s.target_track();
            // target follows some lane centerline within 0.5 m laterally
            let worst = target
                .states
                .iter()
                .skip(s.current_idx())
                .map(|st| {
                    geo.lane_centers
                        .iter()
                        .map(|lc| dist_to_polyline((st.x, st.y), lc))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max);
            assert!(worst < 0.5, "seed {seed}: lateral deviation {worst}");
        }
    }

    #[test]
    fn hard_case_filter_excludes_near_stationary() {
        let mut cfg = small_cfg();
        cfg.hard_case_filter = true;
        // generating full 1000 is slow in CI; 100 seeded scenes still exercises the predicate
        for seed in 200..300u64 {
            let s = generate_scene(seed, &cfg).unwrap();
            let disp = total_displacement(s.target_track(), s.current_idx());
            assert!(disp >= cfg.min_displacement, "seed {seed}: displacement {disp}");
            assert!(
                future_heading_change(s.target_track(), s.current_idx()) >= 0.15,
                "seed {seed}: straight-only target slipped through"
            );
        }
    }

    #[test]
    fn infeasible_cfg_rejected() {
        let mut cfg = test_cfg();
        cfg.lane_width = 1.0;
        assert!(generate_scene(0, &cfg).is_err());
        let mut cfg2 = test_cfg();
        cfg2.speed_min = 0.0;
        assert!(generate_scene(0, &cfg2).is_err());
    }

    #[test]
    fn drivable_labels_inside_corridors() {
        let cfg = small_cfg();
        let (s, geo) = generate_scene_full(5, &cfg).unwrap();
        let spec = s.raster.spec;
        let (ch, cw) = spec.cell_size_m();
        for i in 0..spec.height_cells {
            for j in 0..spec.width_cells {
                if s.seg_labels[[i, j]] == 1 {
                    let ex = (j as f64 + 0.5) * cw - spec.range_m;
                    let ey = (i as f64 + 0.5) * ch - spec.range_m;
                    let world = s.ego_pose.apply((ex, ey));
                    let sd = geo.signed_corridor_distance(world);
                    // cell center may sit up to half a diagonal outside
                    let slack = 0.5 * (ch * ch + cw * cw).sqrt();
                    assert!(sd <= slack, "drivable label outside corridor: sd={sd}");
                }
            }
        }
    }
}
