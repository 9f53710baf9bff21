//! Map-free bird's-eye-view trajectory prediction on synthetic scenes.
//!
//! The crate bundles a small reverse-mode autodiff engine, a procedural
//! driving-scene simulator, a convolutional BEV encoder with a segmentation
//! pretraining head, deformable-attention scene encoding, and an iterative
//! goal-conditioned multimodal trajectory decoder, together with the losses,
//! metrics and training loop that tie them together.

pub mod error;
pub mod tensor;
pub mod ops;
pub mod geom;
pub mod nn;
pub mod config;
pub mod scene_sim;
pub mod bev_encoder;
pub mod deform_attn;
pub mod scene_encoder;
pub mod traj_decoder;
pub mod objectives;
pub mod metrics;
pub mod checkpoint;
pub mod trainer;
pub mod gradcheck;

pub use error::{Error, Result};
