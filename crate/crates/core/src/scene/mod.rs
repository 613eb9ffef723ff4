//! Synthetic scenes: radar point clouds, rasterized camera images, and
//! ground-truth boxes, plus the on-disk dataset format.

pub mod io;
pub mod synth;

use crate::geometry::{Box3D, Calibration};
use crate::tensor::Array;

/// Radar return set, struct-of-arrays. `xyz` is in the world (= radar)
/// frame; `doppler`/`rcs` form the per-point measurement vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    pub doppler: Vec<f64>,
    pub rcs: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn push(&mut self, xyz: [f64; 3], doppler: f64, rcs: f64) {
        assert!(
            xyz.iter().all(|v| v.is_finite()) && doppler.is_finite() && rcs.is_finite(),
            "non-finite radar point"
        );
        self.xyz.push(xyz);
        self.doppler.push(doppler);
        self.rcs.push(rcs);
    }
}

/// One labeled frame: ground truth boxes, radar returns, camera image
/// (`[H, W, 3]`, values in [0,1]), and the camera projection.
#[derive(Clone, Debug)]
pub struct Scene {
    pub frame_id: u32,
    pub boxes: Vec<Box3D>,
    pub cloud: PointCloud,
    pub image: Array,
    pub calib: Calibration,
}
