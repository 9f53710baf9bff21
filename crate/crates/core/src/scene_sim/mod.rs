//! Procedural driving-scene simulation: road topologies, lane-following
//! agents with kinematic bounds, a sensor-surrogate BEV raster with ray-cast
//! occlusion and speckle noise, and a checksummed on-disk dataset format.

mod gen;
mod raster;
mod io;

pub use gen::{
    dist_to_polyline, generate_scene, generate_scene_full, Corridor, GenConfig, Obstacle,
    Polyline, SceneGeometry,
};
pub use io::{read_dataset, read_sample, write_dataset, DATASET_VERSION};
pub use raster::{rasterize, NoiseConfig, CHANNEL_NAMES, N_CHANNELS};

use crate::geom::{GridSpec, Pose2};
use ndarray::{Array2, Array3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub fn code(&self) -> f64 {
        match self {
            AgentKind::Vehicle => 0.0,
            AgentKind::Pedestrian => 1.0,
            AgentKind::Cyclist => 2.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Cyclist => "cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<AgentKind> {
        match s {
            "vehicle" => Some(AgentKind::Vehicle),
            "pedestrian" => Some(AgentKind::Pedestrian),
            "cyclist" => Some(AgentKind::Cyclist),
            _ => None,
        }
    }

    /// Footprint (length, width) in meters.
    pub fn footprint(&self) -> (f64, f64) {
        match self {
            AgentKind::Vehicle => (4.5, 1.9),
            AgentKind::Pedestrian => (0.7, 0.7),
            AgentKind::Cyclist => (1.8, 0.7),
        }
    }
}

/// One timestamped kinematic state in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: u32,
    pub kind: AgentKind,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn state(&self, idx: usize) -> &AgentState {
        &self.states[idx]
    }
}

/// The sensor-surrogate BEV input: (N_CHANNELS, H, W) in [0,1], ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BevRasterInput {
    pub channels: Array3<f64>,
    pub spec: GridSpec,
}

/// One prediction instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: u64,
    pub ego_pose: Pose2,
    pub target_id: u32,
    pub agents: Vec<AgentTrack>,
    pub raster: BevRasterInput,
    /// Clean per-cell class map: 0 bg, 1 drivable, 2 marking, 3 boundary, 4 obstacle.
    pub seg_labels: Array2<u8>,
    pub t_history: usize,
    pub t_future: usize,
}

impl SceneSample {
    /// Index of the "current" timestamp inside each track.
    pub fn current_idx(&self) -> usize {
        self.t_history - 1
    }

    pub fn target_track(&self) -> &AgentTrack {
        self.agents
            .iter()
            .find(|a| a.agent_id == self.target_id)
            .expect("target track missing")
    }

    pub fn target_pose(&self) -> Pose2 {
        let s = self.target_track().state(self.current_idx());
        Pose2::new(s.x, s.y, s.yaw)
    }
}
