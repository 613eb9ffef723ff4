//! Coordinate transforms: camera projection, voxel/BEV grids, and
//! oriented 3D boxes.
//!
//! World frame = radar frame: x forward, y left, z up, origin at the
//! sensor. BEV maps are indexed `[v, u]` (row = y cell, column = x cell),
//! and the continuous BEV coordinate of a world point is
//! `u = (x − x_min)/x_size`, `v = (y − y_min)/y_size`, so a map pixel is
//! anchored at the minimum corner of its cell. Every producer and
//! consumer of BEV maps in this crate shares that convention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Object classes, in canonical id order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Car,
    Pedestrian,
    Cyclist,
    Truck,
}

pub const CLASSES: [Class; 4] = [Class::Car, Class::Pedestrian, Class::Cyclist, Class::Truck];

impl Class {
    pub fn id(self) -> usize {
        match self {
            Class::Car => 0,
            Class::Pedestrian => 1,
            Class::Cyclist => 2,
            Class::Truck => 3,
        }
    }

    pub fn from_id(id: usize) -> Class {
        CLASSES[id]
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Car => "Car",
            Class::Pedestrian => "Pedestrian",
            Class::Cyclist => "Cyclist",
            Class::Truck => "Truck",
        }
    }

    pub fn from_name(s: &str) -> Option<Class> {
        CLASSES.iter().copied().find(|c| c.name() == s)
    }
}

/// Oriented 3D box: center, extents along the local axes (l along local
/// x, w along local y, h along z), yaw about the vertical axis.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: Class,
    pub score: Option<f64>,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, yaw: f64, class: Class) -> Self {
        assert!(l > 0.0 && w > 0.0 && h > 0.0, "box extents must be positive");
        Box3D {
            x,
            y,
            z,
            l,
            w,
            h,
            yaw: normalize_yaw(yaw),
            class,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// World position of a point given in the box's local frame.
    pub fn local_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
            self.z + p[2],
        ]
    }

    /// Box-frame position of a world point.
    pub fn world_to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.world_to_local(p);
        q[0].abs() <= self.l / 2.0 && q[1].abs() <= self.w / 2.0 && q[2].abs() <= self.h / 2.0
    }

    /// The four bird's-eye-view corners, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        let mut out = [(0.0, 0.0); 4];
        for (i, &(lx, ly)) in local.iter().enumerate() {
            let p = self.local_to_world([lx, ly, 0.0]);
            out[i] = (p[0], p[1]);
        }
        out
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }
}

/// Wrap an angle to (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = yaw % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Camera projection as a row-major 3×4 matrix (intrinsics·extrinsics).
/// Points in front of the camera have homogeneous depth w > 0.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub t: [f64; 12],
}

impl Calibration {
    pub fn new(t: [f64; 12]) -> Self {
        Calibration { t }
    }

    /// Homogeneous projection: returns (u·w, v·w, w).
    pub fn apply(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let t = &self.t;
        let uw = t[0] * p[0] + t[1] * p[1] + t[2] * p[2] + t[3];
        let vw = t[4] * p[0] + t[5] * p[1] + t[6] * p[2] + t[7];
        let w = t[8] * p[0] + t[9] * p[1] + t[10] * p[2] + t[11];
        (uw, vw, w)
    }

    /// Pixel location of a world point, or None when it lies at or
    /// behind the camera plane (w ≤ 0). The caller decides the policy
    /// for such points (typically: zero the feature queried there).
    pub fn project_to_image(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let (uw, vw, w) = self.apply(p);
        if w <= 0.0 {
            return None;
        }
        Some((uw / w, vw / w))
    }

    /// A camera rigidly mounted at the sensor origin, `cam_height`
    /// meters up, looking along world +x with image u growing toward
    /// world −y and image v growing downward.
    pub fn forward_camera(fx: f64, fy: f64, cx: f64, cy: f64, cam_height: f64) -> Self {
        Calibration {
            t: [
                cx, -fx, 0.0, 0.0, //
                cy, 0.0, -fy, fy * cam_height, //
                1.0, 0.0, 0.0, 0.0,
            ],
        }
    }

    /// Inverse of the projection for the forward rig family: world point
    /// at pixel (u, v) and homogeneous depth w, solving T·p = w·[u,v,1].
    /// Requires the leading 3×3 block of T to be invertible.
    pub fn back_project(&self, u: f64, v: f64, w: f64) -> [f64; 3] {
        let t = &self.t;
        let a = [
            [t[0], t[1], t[2]],
            [t[4], t[5], t[6]],
            [t[8], t[9], t[10]],
        ];
        let rhs = [w * u - t[3], w * v - t[7], w - t[11]];
        solve3(a, rhs)
    }
}

/// Solve a 3×3 linear system by Gaussian elimination with partial
/// pivoting. Panics on a singular matrix — calibrations in this crate
/// always have an invertible leading block.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        assert!(a[piv][col].abs() > 1e-12, "singular projection matrix");
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..3).rev() {
        let mut s = b[col];
        for k in col + 1..3 {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    x
}

/// Axis-aligned 3D grid: detection range plus cell pitch per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub x_size: f64,
    pub y_size: f64,
    pub z_size: f64,
}

impl GridSpec {
    pub fn new(
        (x_min, x_max, x_size): (f64, f64, f64),
        (y_min, y_max, y_size): (f64, f64, f64),
        (z_min, z_max, z_size): (f64, f64, f64),
    ) -> Self {
        let g = GridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            z_min,
            z_max,
            x_size,
            y_size,
            z_size,
        };
        g.validate();
        g
    }

    pub fn validate(&self) {
        assert!(
            self.x_max > self.x_min && self.y_max > self.y_min && self.z_max > self.z_min,
            "grid range must be non-empty on every axis"
        );
        assert!(
            self.x_size > 0.0 && self.y_size > 0.0 && self.z_size > 0.0,
            "grid cell sizes must be positive"
        );
        for (span, size, axis) in [
            (self.x_max - self.x_min, self.x_size, "x"),
            (self.y_max - self.y_min, self.y_size, "y"),
            (self.z_max - self.z_min, self.z_size, "z"),
        ] {
            let cells = span / size;
            assert!(
                (cells - cells.round()).abs() < 1e-6,
                "{axis} range {span} is not an integer number of {size} cells"
            );
        }
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.x_size).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.y_size).round() as usize
    }

    pub fn nz(&self) -> usize {
        ((self.z_max - self.z_min) / self.z_size).round() as usize
    }

    /// Same range with x/y cells `factor`× coarser and a single z cell
    /// spanning the full height — the footprint of a BEV map derived
    /// from this grid.
    pub fn coarsen_xy(&self, factor: usize) -> GridSpec {
        assert!(factor >= 1);
        assert!(
            self.nx() % factor == 0 && self.ny() % factor == 0,
            "cell counts {}×{} not divisible by {factor}",
            self.nx(),
            self.ny()
        );
        GridSpec {
            x_size: self.x_size * factor as f64,
            y_size: self.y_size * factor as f64,
            z_size: self.z_max - self.z_min,
            ..self.clone()
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= self.x_min
            && p[0] < self.x_max
            && p[1] >= self.y_min
            && p[1] < self.y_max
            && p[2] >= self.z_min
            && p[2] < self.z_max
    }

    /// Voxel index of an in-range point (floor convention: a coordinate
    /// exactly on a boundary belongs to the higher-index cell).
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let ix = ((p[0] - self.x_min) / self.x_size).floor() as usize;
        let iy = ((p[1] - self.y_min) / self.y_size).floor() as usize;
        let iz = ((p[2] - self.z_min) / self.z_size).floor() as usize;
        // Guard the upper edge against float round-up at x_max − ulp.
        Some((
            ix.min(self.nx() - 1),
            iy.min(self.ny() - 1),
            iz.min(self.nz() - 1),
        ))
    }

    /// World position of a voxel's minimum corner.
    pub fn voxel_min_corner(&self, v: (usize, usize, usize)) -> [f64; 3] {
        [
            self.x_min + v.0 as f64 * self.x_size,
            self.y_min + v.1 as f64 * self.y_size,
            self.z_min + v.2 as f64 * self.z_size,
        ]
    }

    /// World position of a voxel's center.
    pub fn voxel_center(&self, v: (usize, usize, usize)) -> [f64; 3] {
        let c = self.voxel_min_corner(v);
        [
            c[0] + self.x_size / 2.0,
            c[1] + self.y_size / 2.0,
            c[2] + self.z_size / 2.0,
        ]
    }
}

/// Continuous BEV coordinates of a world (x, y): `u` counts x cells from
/// x_min, `v` counts y cells from y_min. Feed directly to bilinear
/// sampling of a `[ny, nx, C]` BEV map.
pub fn bev_project(x: f64, y: f64, grid: &GridSpec) -> (f64, f64) {
    ((x - grid.x_min) / grid.x_size, (y - grid.y_min) / grid.y_size)
}

/// Inverse of [`bev_project`].
pub fn bev_unproject(u: f64, v: f64, grid: &GridSpec) -> (f64, f64) {
    (grid.x_min + u * grid.x_size, grid.y_min + v * grid.y_size)
}

/// Group in-range points by voxel. Returns a deterministic (sorted) map
/// from voxel index to point indices, plus the number dropped as
/// out-of-range.
pub fn voxelize(
    points: &[[f64; 3]],
    grid: &GridSpec,
) -> (BTreeMap<(usize, usize, usize), Vec<usize>>, usize) {
    let mut map: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    let mut dropped = 0;
    for (i, &p) in points.iter().enumerate() {
        match grid.voxel_of(p) {
            Some(v) => map.entry(v).or_default().push(i),
            None => dropped += 1,
        }
    }
    (map, dropped)
}

/// Indices of cloud points inside the box (boundary inclusive).
pub fn points_in_box(points: &[[f64; 3]], b: &Box3D) -> Vec<usize> {
    (0..points.len()).filter(|&i| b.contains(points[i])).collect()
}

/// Centers of a U×U×U lattice filling the box, in world coordinates.
/// Ordering contract: x-major, then y, then z — index `(ix·U + iy)·U + iz`.
pub fn box_grid_centers(b: &Box3D, u: usize) -> Vec<[f64; 3]> {
    assert!(u >= 1, "grid resolution must be at least 1");
    let mut out = Vec::with_capacity(u * u * u);
    let step = |i: usize| (i as f64 + 0.5) / u as f64 - 0.5;
    for ix in 0..u {
        let lx = step(ix) * b.l;
        for iy in 0..u {
            let ly = step(iy) * b.w;
            for iz in 0..u {
                let lz = step(iz) * b.h;
                out.push(b.local_to_world([lx, ly, lz]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::stream;
    use rand::Rng;

    fn default_grid() -> GridSpec {
        GridSpec::new(
            (0.0, 51.2, 0.05),
            (-25.6, 25.6, 0.05),
            (-3.0, 2.0, 0.1),
        )
    }

    #[test]
    fn projection_hits_principal_point_on_axis() {
        // Pinhole with identity extrinsics: T = [[f,0,cx,0],[0,f,cy,0],[0,0,1,0]].
        let (f, cx, cy) = (100.0, 320.0, 240.0);
        let t = Calibration::new([f, 0.0, cx, 0.0, 0.0, f, cy, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (u, v) = t.project_to_image([0.0, 0.0, 5.0]).unwrap();
        assert!((u - cx).abs() < 1e-12 && (v - cy).abs() < 1e-12);
        // Doubling depth along the ray leaves the pixel unchanged.
        let (u2, v2) = t.project_to_image([0.0, 0.0, 10.0]).unwrap();
        assert!((u2 - u).abs() < 1e-12 && (v2 - v).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let mut rng = stream(11, "proj-oracle");
        for _ in 0..200 {
            let mut t = [0.0; 12];
            for v in t.iter_mut() {
                *v = rng.gen::<f64>() * 2.0 - 1.0;
            }
            let calib = Calibration::new(t);
            let p = [
                rng.gen::<f64>() * 20.0 - 10.0,
                rng.gen::<f64>() * 20.0 - 10.0,
                rng.gen::<f64>() * 20.0 - 10.0,
            ];
            // Oracle: explicit 3×4 multiply then divide.
            let w = t[8] * p[0] + t[9] * p[1] + t[10] * p[2] + t[11];
            let expect = if w > 0.0 {
                Some((
                    (t[0] * p[0] + t[1] * p[1] + t[2] * p[2] + t[3]) / w,
                    (t[4] * p[0] + t[5] * p[1] + t[6] * p[2] + t[7]) / w,
                ))
            } else {
                None
            };
            match (calib.project_to_image(p), expect) {
                (Some((u, v)), Some((eu, ev))) => {
                    assert!((u - eu).abs() < 1e-12 && (v - ev).abs() < 1e-12);
                }
                (None, None) => {}
                (got, want) => panic!("mismatch: {got:?} vs {want:?}"),
            }
        }
    }

    #[test]
    fn behind_camera_is_rejected() {
        let calib = Calibration::forward_camera(100.0, 100.0, 64.0, 48.0, 1.5);
        assert!(calib.project_to_image([-1.0, 0.0, 0.0]).is_none());
        assert!(calib.project_to_image([5.0, 0.0, 0.0]).is_some());
    }

    #[test]
    fn forward_camera_looks_along_x() {
        let calib = Calibration::forward_camera(100.0, 100.0, 64.0, 48.0, 1.5);
        // A point straight ahead at camera height projects to the center.
        let (u, v) = calib.project_to_image([10.0, 0.0, 1.5]).unwrap();
        assert!((u - 64.0).abs() < 1e-9 && (v - 48.0).abs() < 1e-9);
        // World +y (left) moves the pixel left (smaller u).
        let (ul, _) = calib.project_to_image([10.0, 1.0, 1.5]).unwrap();
        assert!(ul < u);
        // World +z (up) moves the pixel up (smaller v).
        let (_, vu) = calib.project_to_image([10.0, 0.0, 2.0]).unwrap();
        assert!(vu < v);
    }

    #[test]
    fn back_project_inverts_projection() {
        let calib = Calibration::forward_camera(120.0, 110.0, 80.0, 60.0, 1.2);
        let mut rng = stream(12, "backproject");
        for _ in 0..100 {
            let p = [
                rng.gen::<f64>() * 20.0 + 1.0,
                rng.gen::<f64>() * 10.0 - 5.0,
                rng.gen::<f64>() * 3.0 - 1.0,
            ];
            let (uw, vw, w) = calib.apply(p);
            let q = calib.back_project(uw / w, vw / w, w);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-9, "{p:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn voxelize_hand_example() {
        let grid = default_grid();
        let (map, dropped) = voxelize(&[[0.024, 0.01, -2.95]], &grid);
        assert_eq!(dropped, 0);
        let keys: Vec<_> = map.keys().copied().collect();
        assert_eq!(keys, vec![(0, 512, 0)]);
    }

    #[test]
    fn voxel_boundary_goes_to_higher_cell() {
        let grid = default_grid();
        // x exactly on the boundary between cells 0 and 1.
        let v = grid.voxel_of([0.05, -25.6, -3.0]).unwrap();
        assert_eq!(v, (1, 0, 0));
    }

    #[test]
    fn empty_cloud_voxelizes_to_empty_map() {
        let grid = default_grid();
        let (map, dropped) = voxelize(&[], &grid);
        assert!(map.is_empty());
        assert_eq!(dropped, 0);
    }

    #[test]
    fn voxel_corner_brackets_members() {
        let grid = default_grid();
        let mut rng = stream(13, "voxel-bracket");
        let points: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen::<f64>() * 60.0 - 5.0,
                    rng.gen::<f64>() * 60.0 - 30.0,
                    rng.gen::<f64>() * 6.0 - 3.5,
                ]
            })
            .collect();
        let (map, _) = voxelize(&points, &grid);
        for (vox, members) in &map {
            let c = grid.voxel_min_corner(*vox);
            for &i in members {
                let p = points[i];
                assert!(c[0] <= p[0] && p[0] < c[0] + grid.x_size);
                assert!(c[1] <= p[1] && p[1] < c[1] + grid.y_size);
                assert!(c[2] <= p[2] && p[2] < c[2] + grid.z_size);
            }
        }
    }

    #[test]
    fn bev_projection_formula_and_inverse() {
        let grid = default_grid().coarsen_xy(4);
        let (u, _) = bev_project(grid.x_min, 0.0, &grid);
        assert_eq!(u, 0.0);
        let (u1, _) = bev_project(grid.x_min + grid.x_size, 0.0, &grid);
        assert!((u1 - 1.0).abs() < 1e-12);
        let mut rng = stream(14, "bev-roundtrip");
        for _ in 0..100 {
            let x = rng.gen::<f64>() * 51.2;
            let y = rng.gen::<f64>() * 51.2 - 25.6;
            let (u, v) = bev_project(x, y, &grid);
            // Direct formula oracle.
            assert!((u - (x - grid.x_min) / grid.x_size).abs() < 1e-12);
            assert!((v - (y - grid.y_min) / grid.y_size).abs() < 1e-12);
            let (xi, yi) = bev_unproject(u, v, &grid);
            assert!((xi - x).abs() < 1e-12 && (yi - y).abs() < 1e-12);
        }
    }

    #[test]
    fn point_membership_matches_rotation_oracle() {
        let mut rng = stream(15, "inbox-oracle");
        let b = Box3D::new(3.0, -1.0, 0.5, 4.0, 1.8, 1.6, 0.7, Class::Car);
        let points: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    3.0 + rng.gen::<f64>() * 8.0 - 4.0,
                    -1.0 + rng.gen::<f64>() * 6.0 - 3.0,
                    0.5 + rng.gen::<f64>() * 4.0 - 2.0,
                ]
            })
            .collect();
        let got = points_in_box(&points, &b);
        // Oracle: explicit rotation matrix, then axis-aligned compare.
        let (s, c) = b.yaw.sin_cos();
        let expect: Vec<usize> = (0..points.len())
            .filter(|&i| {
                let p = points[i];
                let dx = p[0] - b.x;
                let dy = p[1] - b.y;
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                let lz = p[2] - b.z;
                lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0 && lz.abs() <= b.h / 2.0
            })
            .collect();
        assert_eq!(got, expect);
        assert!(b.contains([b.x, b.y, b.z]));
        assert!(!b.contains(b.local_to_world([b.l / 2.0 + 1e-9, 0.0, 0.0])));
    }

    #[test]
    fn membership_is_rigid_motion_invariant() {
        let mut rng = stream(16, "inbox-rigid");
        let b = Box3D::new(1.0, 2.0, 0.0, 3.0, 2.0, 1.5, 0.4, Class::Truck);
        let points: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    1.0 + rng.gen::<f64>() * 6.0 - 3.0,
                    2.0 + rng.gen::<f64>() * 6.0 - 3.0,
                    rng.gen::<f64>() * 3.0 - 1.5,
                ]
            })
            .collect();
        let before = points_in_box(&points, &b);
        // Apply the same yaw+translation to box and points.
        let (dyaw, t) = (0.9_f64, [5.0, -2.0, 0.7]);
        let (s, c) = dyaw.sin_cos();
        let moved: Vec<[f64; 3]> = points
            .iter()
            .map(|p| [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1], p[2] + t[2]])
            .collect();
        let mb = Box3D::new(
            c * b.x - s * b.y + t[0],
            s * b.x + c * b.y + t[1],
            b.z + t[2],
            b.l,
            b.w,
            b.h,
            b.yaw + dyaw,
            b.class,
        );
        let after = points_in_box(&moved, &mb);
        assert_eq!(before, after);
    }

    #[test]
    fn grid_centers_order_and_symmetry() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, Class::Car);
        assert_eq!(box_grid_centers(&b, 1), vec![[0.0, 0.0, 0.0]]);
        assert_eq!(box_grid_centers(&b, 6).len(), 216);
        let c2 = box_grid_centers(&b, 2);
        // x-major ordering: first four entries share x = −0.25.
        let expect = [
            [-0.25, -0.25, -0.25],
            [-0.25, -0.25, 0.25],
            [-0.25, 0.25, -0.25],
            [-0.25, 0.25, 0.25],
            [0.25, -0.25, -0.25],
            [0.25, -0.25, 0.25],
            [0.25, 0.25, -0.25],
            [0.25, 0.25, 0.25],
        ];
        for (got, want) in c2.iter().zip(expect.iter()) {
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-12, "{c2:?}");
            }
        }
    }

    #[test]
    fn grid_centers_commute_with_rotation() {
        let b0 = Box3D::new(2.0, -3.0, 0.4, 3.2, 1.4, 1.7, 0.0, Class::Cyclist);
        let yaw = 1.1;
        let rotated = Box3D::new(b0.x, b0.y, b0.z, b0.l, b0.w, b0.h, yaw, b0.class);
        let base = box_grid_centers(&b0, 3);
        let got = box_grid_centers(&rotated, 3);
        let (s, c) = yaw.sin_cos();
        for (g, b) in got.iter().zip(base.iter()) {
            // Rotate the unrotated center about the box center.
            let dx = b[0] - b0.x;
            let dy = b[1] - b0.y;
            let want = [b0.x + c * dx - s * dy, b0.y + s * dx + c * dy, b[2]];
            for k in 0..3 {
                assert!((g[k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn yaw_normalization_wraps_into_half_open_interval() {
        use std::f64::consts::PI;
        assert!((normalize_yaw(PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_yaw(2.5 * PI) - 0.5 * PI).abs() < 1e-12);
        assert!((normalize_yaw(-2.5 * PI) + 0.5 * PI).abs() < 1e-12);
    }
}
