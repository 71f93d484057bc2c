//! Multi-frame to single-frame LiDAR detector distillation at desk scale.

pub mod backbone;
pub mod config;
pub mod distill;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geom;
pub mod gradsuite;
pub mod par;
pub mod rng;
pub mod synth;

pub use mfkd_tensor as tensor;
