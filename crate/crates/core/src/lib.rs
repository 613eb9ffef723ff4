//! Radar–camera 3D object detection on synthetic scenes.
//!
//! A self-contained research stack: a reverse-mode autodiff engine over
//! dense f64 arrays, a synthetic scene generator with a radar/camera
//! sensor model, a two-stage detector (BEV fusion + proposal refinement
//! with deformable cross-modality attention), and rotated-box evaluation
//! — all on CPU, fully deterministic for a given seed.

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
