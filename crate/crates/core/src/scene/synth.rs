//! Scene generator.
//!
//! Objects are placed inside the camera frustum and the detection range
//! with disjoint footprints, given class-conditional sizes, a heading,
//! and a velocity. Radar returns are sampled on the sensor-facing faces
//! of each box with Gaussian position noise; doppler is the exact radial
//! projection of the object velocity (the ego is static). The image is a
//! painter's-algorithm rasterization of the projected boxes in class
//! colors over a textured gradient background — deliberately simple, but
//! class and extent are only fully observable from the image, and
//! geometry only from the radar, so fusion has something to gain.
//!
//! Generation is a pure function of (config, seed, frame id): every
//! frame draws from its own RNG stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Box3D, Calibration, Class, GridSpec, CLASSES};
use crate::scene::{PointCloud, Scene};
use crate::tensor::array::gaussian;
use crate::tensor::Array;
use crate::util::rng::stream;

/// Knobs for the generator. `class_mix` must sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub class_mix: [f64; 4],
    pub points_per_object_min: usize,
    pub points_per_object_max: usize,
    pub clutter_mean: f64,
    pub pos_sigma: f64,
    pub doppler_sigma: f64,
    pub rcs_sigma: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub cam_height: f64,
    pub ground_z: f64,
    pub moving_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            boxes_min: 2,
            boxes_max: 6,
            class_mix: [0.4, 0.25, 0.2, 0.15],
            points_per_object_min: 8,
            points_per_object_max: 40,
            clutter_mean: 40.0,
            pos_sigma: 0.06,
            doppler_sigma: 0.0,
            rcs_sigma: 2.0,
            image_width: 128,
            image_height: 96,
            cam_height: 0.3,
            ground_z: -1.5,
            moving_fraction: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn camera(&self) -> Calibration {
        // Half the width as focal length → 45° half field of view.
        let fx = self.image_width as f64 / 2.0;
        let fy = fx;
        Calibration::forward_camera(
            fx,
            fy,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.cam_height,
        )
    }
}

/// Class-conditional size priors (mean l, w, h and a shared sigma scale).
fn size_prior(class: Class) -> ([f64; 3], f64) {
    match class {
        Class::Car => ([4.2, 1.8, 1.55], 0.08),
        Class::Pedestrian => ([0.7, 0.65, 1.75], 0.06),
        Class::Cyclist => ([1.8, 0.65, 1.7], 0.07),
        Class::Truck => ([7.2, 2.5, 3.0], 0.10),
    }
}

fn rcs_prior(class: Class) -> f64 {
    match class {
        Class::Car => 10.0,
        Class::Pedestrian => -5.0,
        Class::Cyclist => 0.0,
        Class::Truck => 18.0,
    }
}

/// RGB used for the rasterized faces of each class.
pub fn class_color(class: Class) -> [f64; 3] {
    match class {
        Class::Car => [0.85, 0.15, 0.15],
        Class::Pedestrian => [0.15, 0.8, 0.2],
        Class::Cyclist => [0.2, 0.25, 0.9],
        Class::Truck => [0.9, 0.8, 0.15],
    }
}

fn sample_class(mix: &[f64; 4], rng: &mut ChaCha8Rng) -> Class {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        acc += p;
        if r < acc {
            return CLASSES[i];
        }
    }
    CLASSES[3]
}

/// BEV circumradius used for the disjointness check during placement.
fn bev_radius(b: &Box3D) -> f64 {
    0.5 * (b.l * b.l + b.w * b.w).sqrt()
}

pub fn generate_scene(
    cfg: &SynthConfig,
    grid: &GridSpec,
    seed: u64,
    frame_id: u32,
) -> Scene {
    let mut rng = stream(seed, &format!("frame/{frame_id:06}"));
    let calib = cfg.camera();

    // ── object placement ────────────────────────────────────────────
    let n_boxes = rng.gen_range(cfg.boxes_min..=cfg.boxes_max);
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut velocities: Vec<[f64; 2]> = Vec::new();
    for _ in 0..n_boxes {
        let class = sample_class(&cfg.class_mix, &mut rng);
        let (mean, sig) = size_prior(class);
        let l = (mean[0] * (1.0 + sig * gaussian(&mut rng))).max(0.4);
        let w = (mean[1] * (1.0 + sig * gaussian(&mut rng))).max(0.3);
        let h = (mean[2] * (1.0 + sig * gaussian(&mut rng))).max(0.5);
        let yaw = rng.gen::<f64>() * 2.0 * std::f64::consts::PI - std::f64::consts::PI;
        let z = cfg.ground_z + h / 2.0;

        // Keep the footprint inside both the detection range and the
        // camera's horizontal field of view, rejecting overlaps so that
        // ground-truth boxes never intersect each other.
        let mut placed = None;
        for _attempt in 0..60 {
            let margin = bev_radius(&Box3D::new(0.0, 0.0, 0.0, l, w, h, 0.0, class)) + 0.3;
            let x = rng.gen::<f64>() * (grid.x_max - 6.0 - (6.0 + margin)) + 6.0 + margin;
            let half_span = (x * 0.75).min(grid.y_max - margin);
            let y = (rng.gen::<f64>() * 2.0 - 1.0) * half_span;
            let cand = Box3D::new(x, y, z, l, w, h, yaw, class);
            let r = bev_radius(&cand);
            let clear = boxes
                .iter()
                .all(|b| {
                    let d = ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt();
                    d > r + bev_radius(b) + 0.4
                });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        let Some(b) = placed else { continue };
        boxes.push(b);
        let speed = if rng.gen::<f64>() < cfg.moving_fraction {
            2.0 + rng.gen::<f64>() * 10.0
        } else {
            0.0
        };
        let (s, c) = b.yaw.sin_cos();
        velocities.push([speed * c, speed * s]);
    }

    // ── radar returns ───────────────────────────────────────────────
    let mut cloud = PointCloud::default();
    for (b, vel) in boxes.iter().zip(&velocities) {
        let n = rng.gen_range(cfg.points_per_object_min..=cfg.points_per_object_max);
        for _ in 0..n {
            let p = sample_surface_point(b, &mut rng);
            let p = [
                p[0] + cfg.pos_sigma * gaussian(&mut rng),
                p[1] + cfg.pos_sigma * gaussian(&mut rng),
                p[2] + cfg.pos_sigma * gaussian(&mut rng),
            ];
            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-6);
            let radial = [p[0] / range, p[1] / range, p[2] / range];
            let mut doppler = vel[0] * radial[0] + vel[1] * radial[1];
            if cfg.doppler_sigma > 0.0 {
                doppler += cfg.doppler_sigma * gaussian(&mut rng);
            }
            let rcs = rcs_prior(b.class) + cfg.rcs_sigma * gaussian(&mut rng);
            cloud.push(p, doppler, rcs);
        }
    }
    // Clutter: uniform near-ground returns with low, noisy RCS.
    let n_clutter = poisson(cfg.clutter_mean, &mut rng);
    for _ in 0..n_clutter {
        let p = [
            rng.gen::<f64>() * (grid.x_max - grid.x_min) + grid.x_min,
            rng.gen::<f64>() * (grid.y_max - grid.y_min) + grid.y_min,
            cfg.ground_z + rng.gen::<f64>() * 1.2,
        ];
        let doppler = 0.3 * gaussian(&mut rng);
        let rcs = -2.0 + 4.0 * gaussian(&mut rng);
        cloud.push(p, doppler, rcs);
    }

    // ── camera image ────────────────────────────────────────────────
    let image = rasterize(&boxes, &calib, cfg.image_width, cfg.image_height, &mut rng);

    Scene {
        frame_id,
        boxes,
        cloud,
        image,
        calib,
    }
}

/// Sample a point on a sensor-facing face of the box (or its top).
fn sample_surface_point(b: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Candidate faces in the local frame: normal axis, sign, area.
    let faces = [
        (0, 1.0, b.w * b.h),
        (0, -1.0, b.w * b.h),
        (1, 1.0, b.l * b.h),
        (1, -1.0, b.l * b.h),
        (2, 1.0, b.l * b.w), // top
    ];
    let (s, c) = b.yaw.sin_cos();
    let mut weights = [0.0; 5];
    for (i, &(axis, sign, area)) in faces.iter().enumerate() {
        // World normal of the face.
        let n = match axis {
            0 => [c * sign, s * sign, 0.0],
            1 => [-s * sign, c * sign, 0.0],
            _ => [0.0, 0.0, sign],
        };
        let center = b.local_to_world(match axis {
            0 => [sign * b.l / 2.0, 0.0, 0.0],
            1 => [0.0, sign * b.w / 2.0, 0.0],
            _ => [0.0, 0.0, sign * b.h / 2.0],
        });
        // Visible if the normal points back toward the sensor origin.
        let to_sensor = [-center[0], -center[1], -center[2]];
        let vis = n[0] * to_sensor[0] + n[1] * to_sensor[1] + n[2] * to_sensor[2];
        if vis > 0.0 {
            // Top face contributes at half weight; grazing faces fade out.
            let norm = (to_sensor[0].powi(2) + to_sensor[1].powi(2) + to_sensor[2].powi(2))
                .sqrt()
                .max(1e-9);
            let fade = (vis / norm).min(1.0);
            weights[i] = area * fade * if axis == 2 { 0.5 } else { 1.0 };
        }
    }
    let total: f64 = weights.iter().sum();
    let mut pick = 4;
    if total > 0.0 {
        let mut r = rng.gen::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
    }
    let (axis, sign, _) = faces[pick];
    let ua = rng.gen::<f64>() - 0.5;
    let ub = rng.gen::<f64>() - 0.5;
    let local = match axis {
        0 => [sign * b.l / 2.0, ua * b.w, ub * b.h],
        1 => [ua * b.l, sign * b.w / 2.0, ub * b.h],
        _ => [ua * b.l, ub * b.w, sign * b.h / 2.0],
    };
    b.local_to_world(local)
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    // Knuth's method; means here are small (≤ a few hundred).
    let l = (-mean).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
        if k > 10_000 {
            return k;
        }
    }
}

/// Paint the scene: gradient + noise background, then each box's
/// projected hull far-to-near in its class color with distance shading.
fn rasterize(
    boxes: &[Box3D],
    calib: &Calibration,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> Array {
    let mut img = vec![0.0; height * width * 3];
    for v in 0..height {
        let t = v as f64 / height as f64;
        let base = [
            0.55 + (0.35 - 0.55) * t,
            0.65 + (0.30 - 0.65) * t,
            0.80 + (0.25 - 0.80) * t,
        ];
        for u in 0..width {
            let n = 0.06 * (rng.gen::<f64>() - 0.5);
            for ch in 0..3 {
                img[(v * width + u) * 3 + ch] = (base[ch] + n).clamp(0.0, 1.0);
            }
        }
    }

    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let da = boxes[a].x * boxes[a].x + boxes[a].y * boxes[a].y;
        let db = boxes[b].x * boxes[b].x + boxes[b].y * boxes[b].y;
        db.total_cmp(&da)
    });

    for &bi in &order {
        let b = &boxes[bi];
        let mut pts = Vec::with_capacity(8);
        let mut ok = true;
        for &sx in &[-0.5, 0.5] {
            for &sy in &[-0.5, 0.5] {
                for &sz in &[-0.5, 0.5] {
                    let p = b.local_to_world([sx * b.l, sy * b.w, sz * b.h]);
                    match calib.project_to_image(p) {
                        Some(uv) => pts.push(uv),
                        None => ok = false,
                    }
                }
            }
        }
        if !ok || pts.len() < 3 {
            continue;
        }
        let hull = convex_hull(&mut pts);
        if hull.len() < 3 {
            continue;
        }
        let dist = (b.x * b.x + b.y * b.y).sqrt();
        let shade = 0.7 + 0.3 * (-dist / 30.0).exp();
        let color = class_color(b.class);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(u, v) in &hull {
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let iu0 = u0.floor().max(0.0) as usize;
        let iu1 = (u1.ceil() as isize).clamp(0, width as isize - 1) as usize;
        let iv0 = v0.floor().max(0.0) as usize;
        let iv1 = (v1.ceil() as isize).clamp(0, height as isize - 1) as usize;
        if u1 < 0.0 || v1 < 0.0 || u0 >= width as f64 || v0 >= height as f64 {
            continue;
        }
        for v in iv0..=iv1 {
            for u in iu0..=iu1 {
                if point_in_hull(u as f64 + 0.5, v as f64 + 0.5, &hull) {
                    let n = 0.04 * (rng.gen::<f64>() - 0.5);
                    for ch in 0..3 {
                        img[(v * width + u) * 3 + ch] =
                            (color[ch] * shade + n).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Array::new(vec![height, width, 3], img)
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
fn convex_hull(pts: &mut Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts.clone();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter() {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_hull(x: f64, y: f64, hull: &[(f64, f64)]) -> bool {
    let n = hull.len();
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        if cross < 0.0 {
            return false;
        }
    }
    true
}
