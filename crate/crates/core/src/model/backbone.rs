//! Sensor encoders: radar pillar features + BEV conv tower, the image
//! encoder, and the depth-distribution lift that turns camera features
//! into a BEV map.

use crate::config::Config;
use crate::geometry::{bev_project, Calibration, GridSpec};
use crate::model::{Ctx, Dims, Init};
use crate::scene::PointCloud;
use crate::tensor::{Array, Tape, Tensor};

/// Per-pillar input channels: mean (dx, dy, dz, doppler, rcs) over the
/// cell's points — offsets taken from each point's fine-voxel center —
/// plus log1p(point count) so an occupied cell is never all-zero.
pub const PILLAR_CH: usize = 6;

/// Collapse the fine voxel grid into base-BEV pillar features
/// `[by, bx, 6]`. Out-of-range points are dropped. An empty cloud (or
/// cell) produces exact zeros.
pub fn pillar_features(cloud: &PointCloud, fine: &GridSpec, factor: usize) -> Array {
    let (by, bx) = (fine.ny() / factor, fine.nx() / factor);
    let mut sums = vec![0.0; by * bx * 5];
    let mut counts = vec![0usize; by * bx];
    for i in 0..cloud.len() {
        let p = cloud.xyz[i];
        let Some(v) = fine.voxel_of(p) else { continue };
        let c = fine.voxel_center(v);
        let cell = (v.1 / factor) * bx + v.0 / factor;
        let s = &mut sums[cell * 5..cell * 5 + 5];
        s[0] += p[0] - c[0];
        s[1] += p[1] - c[1];
        s[2] += p[2] - c[2];
        s[3] += cloud.doppler[i];
        s[4] += cloud.rcs[i];
        counts[cell] += 1;
    }
    let mut data = vec![0.0; by * bx * PILLAR_CH];
    for cell in 0..by * bx {
        let n = counts[cell];
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        for ch in 0..5 {
            data[cell * PILLAR_CH + ch] = sums[cell * 5 + ch] * inv;
        }
        data[cell * PILLAR_CH + 5] = (1.0 + n as f64).ln();
    }
    Array::new(vec![by, bx, PILLAR_CH], data)
}

// ── radar tower ────────────────────────────────────────────────────────

pub struct RadarP {
    pub conv0: (Tensor, Tensor),
    pub vox: (Tensor, Tensor),
    pub conv1: (Tensor, Tensor),
    pub conv2: (Tensor, Tensor),
}

impl RadarP {
    pub fn spec(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
        let [c0, c1, c2] = cfg.c_bev;
        let cv = cfg.c_voxel;
        conv_spec("radar.conv0", 3, PILLAR_CH, c0)
            .into_iter()
            .chain(conv_spec("radar.vox", 1, c0, cv))
            .chain(conv_spec("radar.conv1", 3, c0, c1))
            .chain(conv_spec("radar.conv2", 3, c1, c2))
            .collect()
    }

    pub fn bind(ctx: &mut Ctx, cfg: &Config) -> RadarP {
        let ts = bind_list(ctx, &Self::spec(cfg));
        RadarP {
            conv0: (ts[0], ts[1]),
            vox: (ts[2], ts[3]),
            conv1: (ts[4], ts[5]),
            conv2: (ts[6], ts[7]),
        }
    }

    pub fn from_slice(ts: &[Tensor]) -> RadarP {
        assert_eq!(ts.len(), 8);
        RadarP {
            conv0: (ts[0], ts[1]),
            vox: (ts[2], ts[3]),
            conv1: (ts[4], ts[5]),
            conv2: (ts[6], ts[7]),
        }
    }
}

/// Radar BEV pyramid plus the dense voxel-feature map used for
/// per-point lookups in the second stage.
pub struct RadarMaps {
    /// Scales k = 0, 1, 2 (strides ×1, ×2, ×4 of the base BEV).
    pub bev: [Tensor; 3],
    /// `[by, bx, c_voxel]`, sampled bilinearly at point positions.
    pub voxmap: Tensor,
}

fn conv_step(tape: &mut Tape, x: Tensor, (w, b): (Tensor, Tensor), stride: usize) -> Tensor {
    let k = tape.shape(w)[0];
    let y = tape.conv2d(x, w, stride, k / 2);
    let y = tape.add_chan_bias(y, b);
    tape.relu(y)
}

pub fn radar_tower(tape: &mut Tape, p: &RadarP, pillars: Tensor) -> RadarMaps {
    let b0 = conv_step(tape, pillars, p.conv0, 1);
    let voxmap = conv_step(tape, b0, p.vox, 1);
    let b1 = conv_step(tape, b0, p.conv1, 2);
    let b2 = conv_step(tape, b1, p.conv2, 2);
    RadarMaps {
        bev: [b0, b1, b2],
        voxmap,
    }
}

pub fn radar_encode(ctx: &mut Ctx, cfg: &Config, cloud: &PointCloud) -> RadarMaps {
    let pillars = pillar_features(cloud, &cfg.grid, cfg.bev_factor);
    let p = RadarP::bind(ctx, cfg);
    let x = ctx.tape.constant(pillars);
    radar_tower(ctx.tape, &p, x)
}

// ── camera tower ───────────────────────────────────────────────────────

pub struct CameraP {
    pub convs: [(Tensor, Tensor); 4],
}

impl CameraP {
    pub fn spec(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
        let c = cfg.c_cam;
        conv_spec("camera.c1", 3, 3, c)
            .into_iter()
            .chain(conv_spec("camera.c2", 3, c, c))
            .chain(conv_spec("camera.c3", 3, c, c))
            .chain(conv_spec("camera.c4", 3, c, c))
            .collect()
    }

    pub fn bind(ctx: &mut Ctx, cfg: &Config) -> CameraP {
        let ts = bind_list(ctx, &Self::spec(cfg));
        CameraP::from_slice(&ts)
    }

    pub fn from_slice(ts: &[Tensor]) -> CameraP {
        assert_eq!(ts.len(), 8);
        CameraP {
            convs: [
                (ts[0], ts[1]),
                (ts[2], ts[3]),
                (ts[4], ts[5]),
                (ts[6], ts[7]),
            ],
        }
    }
}

/// Four conv blocks with strides 2, 2, 1, 1 — output is the ¼-resolution
/// feature volume. The last block is left pre-activation so the features
/// keep a signed range.
pub fn camera_tower(tape: &mut Tape, p: &CameraP, image: Tensor) -> Tensor {
    let x = conv_step(tape, image, p.convs[0], 2);
    let x = conv_step(tape, x, p.convs[1], 2);
    let x = conv_step(tape, x, p.convs[2], 1);
    let y = tape.conv2d(x, p.convs[3].0, 1, 1);
    tape.add_chan_bias(y, p.convs[3].1)
}

pub fn camera_encode(ctx: &mut Ctx, cfg: &Config, image: Array) -> Tensor {
    let p = CameraP::bind(ctx, cfg);
    let x = ctx.tape.constant(image);
    camera_tower(ctx.tape, &p, x)
}

// ── depth lift ─────────────────────────────────────────────────────────

/// Fixed geometry of the lift: for every feature-volume pixel and every
/// depth bin, the base-BEV splat coordinate of the back-projected point.
pub struct LiftGeom {
    /// `fv.0 * fv.1 * depth_bins` coords, pixel-major then depth.
    pub coords: Vec<(f64, f64)>,
    pub fv: (usize, usize),
    pub depth_bins: usize,
    pub base: (usize, usize),
}

/// Depth bin centers: uniform over [depth_min, range_max) where range
/// is measured along the camera axis (forward distance).
pub fn depth_bin_centers(cfg: &Config) -> Vec<f64> {
    let d = cfg.depth_bins;
    let (lo, hi) = (cfg.depth_min, cfg.grid.x_max);
    (0..d)
        .map(|j| lo + (j as f64 + 0.5) * (hi - lo) / d as f64)
        .collect()
}

pub fn lift_geometry(cfg: &Config, calib: &Calibration) -> LiftGeom {
    let dims = Dims::of(cfg);
    let base = cfg.base_bev_grid();
    let bins = depth_bin_centers(cfg);
    let (fh, fw) = dims.fv;
    let mut coords = Vec::with_capacity(fh * fw * bins.len());
    for vy in 0..fh {
        for ux in 0..fw {
            // Full-resolution pixel center this FV pixel is anchored to.
            let u = 4.0 * ux as f64 + 0.5;
            let v = 4.0 * vy as f64 + 0.5;
            for &w in &bins {
                let p = calib.back_project(u, v, w);
                coords.push(bev_project(p[0], p[1], &base));
            }
        }
    }
    LiftGeom {
        coords,
        fv: (fh, fw),
        depth_bins: bins.len(),
        base: dims.base,
    }
}

pub struct LiftP {
    pub w: Tensor,
    pub b: Tensor,
}

impl LiftP {
    pub fn spec(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
        vec![
            (
                "lift.head.w".into(),
                vec![cfg.c_cam, cfg.depth_bins],
                Init::Lecun { fan_in: cfg.c_cam },
            ),
            ("lift.head.b".into(), vec![cfg.depth_bins], Init::Zeros),
        ]
    }

    pub fn bind(ctx: &mut Ctx, cfg: &Config) -> LiftP {
        let ts = bind_list(ctx, &Self::spec(cfg));
        LiftP { w: ts[0], b: ts[1] }
    }
}

/// Scatter per-pixel feature mass along depth bins into the base BEV.
/// Returns (cam_bev `[by, bx, C]`, depth probabilities `[P, D]`).
pub fn depth_lift_core(
    tape: &mut Tape,
    cam_fv: Tensor,
    head: &LiftP,
    geom: &LiftGeom,
) -> (Tensor, Tensor) {
    let (fh, fw) = geom.fv;
    let c = tape.shape(cam_fv)[2];
    assert_eq!(tape.shape(cam_fv), &[fh, fw, c], "feature volume shape");
    let rows = tape.reshape(cam_fv, &[fh * fw, c]);
    let logits = tape.matmul(rows, head.w);
    let logits = tape.add_row_bias(logits, head.b);
    let prob = tape.softmax_rows(logits);
    let mass = tape.depth_outer(prob, rows);
    let (by, bx) = geom.base;
    let bev = tape.bilinear_splat(mass, geom.coords.clone(), by, bx);
    (bev, prob)
}

pub fn depth_lift(ctx: &mut Ctx, cfg: &Config, cam_fv: Tensor, geom: &LiftGeom) -> Tensor {
    let head = LiftP::bind(ctx, cfg);
    depth_lift_core(ctx.tape, cam_fv, &head, geom).0
}

// ── binding helpers ────────────────────────────────────────────────────

pub fn conv_spec(name: &str, k: usize, cin: usize, cout: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (
            format!("{name}.w"),
            vec![k, k, cin, cout],
            Init::He { fan_in: k * k * cin },
        ),
        (format!("{name}.b"), vec![cout], Init::Zeros),
    ]
}

pub fn bind_list(ctx: &mut Ctx, spec: &[(String, Vec<usize>, Init)]) -> Vec<Tensor> {
    spec.iter()
        .map(|(name, shape, init)| ctx.param(name, shape, *init))
        .collect()
}

/// Initialize arrays for a spec with a deterministic RNG — used by the
/// gradient-check harness to stand in for the parameter store.
pub fn init_list(spec: &[(String, Vec<usize>, Init)], rng: &mut impl rand::Rng) -> Vec<Array> {
    spec.iter()
        .map(|(_, shape, init)| match init {
            // Zero-init params would hide gradient-flow defects; perturb.
            Init::Zeros => Array::randn(shape, 0.05, rng),
            other => other.build(shape, rng),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{run_case, weighted_loss, Case};
    use crate::tensor::ParamStore;
    use crate::util::rng::stream;

    /// Small config: base BEV 32×32, image 32×24, lean channels.
    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.apply_json(
            r#"{
                "grid.x_max": 12.8, "grid.y_min": -6.4, "grid.y_max": 6.4,
                "grid.x_size": 0.1, "grid.y_size": 0.1,
                "model.bev_factor": 4,
                "model.c_bev": [6, 8, 8], "model.c_voxel": 5, "model.c_cam": 6,
                "model.depth_bins": 4,
                "synth.image_width": 32, "synth.image_height": 24
            }"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        cfg
    }

    fn forward_radar(cfg: &Config, cloud: &PointCloud, seed: u64) -> (Tape, RadarMaps) {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, seed);
        let maps = radar_encode(&mut ctx, cfg, cloud);
        (tape, maps)
    }

    #[test]
    fn empty_cloud_gives_all_zero_maps_at_init() {
        let cfg = small_cfg();
        let (tape, maps) = forward_radar(&cfg, &PointCloud::default(), 7);
        for t in maps.bev.iter().chain([&maps.voxmap]) {
            assert!(tape.value(*t).data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pyramid_shapes_halve_per_scale() {
        let cfg = small_cfg();
        let mut cloud = PointCloud::default();
        cloud.push([3.0, 1.0, -1.0], 2.0, 5.0);
        let (tape, maps) = forward_radar(&cfg, &cloud, 7);
        assert_eq!(tape.shape(maps.bev[0]), &[32, 32, 6]);
        assert_eq!(tape.shape(maps.bev[1]), &[16, 16, 8]);
        assert_eq!(tape.shape(maps.bev[2]), &[8, 8, 8]);
        assert_eq!(tape.shape(maps.voxmap), &[32, 32, 5]);
    }

    #[test]
    fn pillar_features_match_hand_computation() {
        let cfg = small_cfg();
        let mut cloud = PointCloud::default();
        // Fine voxel 0.1 m: point at x=0.03, y=-6.38, z=-2.95 lands in fine
        // voxel (0, 0, 0), center (0.05, -6.35, -2.95).
        cloud.push([0.03, -6.38, -2.95], 1.5, -3.0);
        let f = pillar_features(&cloud, &cfg.grid, cfg.bev_factor);
        assert_eq!(f.shape, vec![32, 32, 6]);
        let got = &f.data[0..6];
        let want = [
            0.03 - 0.05,
            -6.38 - -6.35,
            0.0,
            1.5,
            -3.0,
            (2.0f64).ln(),
        ];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "got {got:?}");
        }
        // Every other cell is exactly zero.
        assert!(f.data[6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tower_is_translation_equivariant_in_the_interior() {
        let cfg = small_cfg();
        let base = cfg.base_bev_grid();
        let shift = 4.0 * base.x_size; // 4 base cells → 2 at k=1, 1 at k=2
        let pts: [[f64; 3]; 4] = [
            [3.27, -1.13, -1.2],
            [3.61, -0.88, -0.9],
            [4.02, 2.35, -1.4],
            [5.48, 2.1, -1.0],
        ];
        let mut a = PointCloud::default();
        let mut b = PointCloud::default();
        for (i, p) in pts.iter().enumerate() {
            a.push(*p, i as f64, 1.0 + i as f64);
            b.push([p[0] + shift, p[1], p[2]], i as f64, 1.0 + i as f64);
        }
        let (ta, ma) = forward_radar(&cfg, &a, 11);
        let (tb, mb) = forward_radar(&cfg, &b, 11);
        for (k, cells) in [(0usize, 4usize), (1, 2), (2, 1)] {
            let va = ta.value(ma.bev[k]);
            let vb = tb.value(mb.bev[k]);
            let (h, w, c) = va.dims3();
            let margin = 3;
            for y in margin..h - margin {
                for x in margin..w - margin - cells {
                    for ch in 0..c {
                        let lhs = va.data[(y * w + x) * c + ch];
                        let rhs = vb.data[(y * w + x + cells) * c + ch];
                        assert!(
                            (lhs - rhs).abs() < 1e-12,
                            "scale {k} mismatch at ({y},{x},{ch}): {lhs} vs {rhs}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_interior_features() {
        let mut cfg = small_cfg();
        cfg.apply_json(r#"{"synth.image_width": 64, "synth.image_height": 48}"#)
            .unwrap();
        let image = Array::full(&[48, 64, 3], 0.37);
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, 3);
        let fv = camera_encode(&mut ctx, &cfg, image);
        let v = tape.value(fv);
        let (h, w, c) = v.dims3();
        assert_eq!((h, w, c), (12, 16, 6));
        // Zero padding taints a 3-pixel border at FV scale; the interior
        // of a constant image must come out exactly constant.
        let m = 3;
        let reference = &v.data[((m * w) + m) * c..((m * w) + m + 1) * c];
        for y in m..h - m {
            for x in m..w - m {
                let row = &v.data[(y * w + x) * c..(y * w + x + 1) * c];
                for ch in 0..c {
                    assert!(
                        (row[ch] - reference[ch]).abs() < 1e-12,
                        "pixel ({y},{x}) differs"
                    );
                }
            }
        }
    }

    #[test]
    fn depth_probabilities_sum_to_one() {
        let cfg = small_cfg();
        let mut rng = stream(0, "test/lift");
        let fv = Array::randn(&[6, 8, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, 5);
        let head = LiftP::bind(&mut ctx, &cfg);
        let fv_t = tape.constant(fv);
        let geom = lift_geometry(&cfg, &cfg.synth.camera());
        let (_, prob) = depth_lift_core(&mut tape, fv_t, &head, &geom);
        let p = tape.value(prob);
        let (n, d) = p.dims2();
        assert_eq!(d, 4);
        for i in 0..n {
            let s: f64 = p.data[i * d..(i + 1) * d].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_depth_lands_in_a_single_bev_neighborhood() {
        let cfg = small_cfg();
        let calib = cfg.synth.camera();
        let geom = lift_geometry(&cfg, &calib);
        let (fh, fw) = geom.fv;
        let d = geom.depth_bins;
        // One-hot along depth for a single center pixel, zero elsewhere.
        let pixel = (fh / 2) * fw + fw / 2;
        let bin = 2;
        let mut prob = Array::zeros(&[fh * fw, d]);
        prob.data[pixel * d + bin] = 1.0;
        let mut feat = Array::zeros(&[fh * fw, 1]);
        feat.data[pixel] = 1.0;

        let mut tape = Tape::new();
        let p = tape.constant(prob);
        let f = tape.constant(feat);
        let mass = tape.depth_outer(p, f);
        let (by, bx) = geom.base;
        let bev = tape.bilinear_splat(mass, geom.coords.clone(), by, bx);
        let v = tape.value(bev);

        let (eu, ev) = geom.coords[pixel * d + bin];
        let mut total = 0.0;
        for y in 0..by {
            for x in 0..bx {
                let m = v.data[y * bx + x];
                if m > 0.0 {
                    assert!(
                        (x as f64 - eu).abs() < 1.0 && (y as f64 - ev).abs() < 1.0,
                        "mass at ({y},{x}), expected near ({ev:.2},{eu:.2})"
                    );
                    total += m;
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "splat mass {total}");
    }

    #[test]
    fn lift_conserves_feature_mass() {
        // Wide, short grid so every depth bin of every pixel stays in
        // range: depth ≤ 8 m forward, lateral spread ≤ 8 m < 12.8 m.
        let mut cfg = Config::default();
        cfg.apply_json(
            r#"{
                "grid.x_max": 8.0, "grid.y_min": -12.8, "grid.y_max": 12.8,
                "grid.x_size": 0.1, "grid.y_size": 0.1, "model.bev_factor": 2,
                "model.c_bev": [4, 4, 4], "model.c_voxel": 4, "model.c_cam": 5,
                "model.depth_bins": 6,
                "synth.image_width": 16, "synth.image_height": 16
            }"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        let calib = cfg.synth.camera();
        let geom = lift_geometry(&cfg, &calib);

        let mut rng = stream(1, "test/mass");
        let fv = Array::randn(&[4, 4, 5], 1.0, &mut rng);
        let total_in: f64 = {
            // Σ over pixels of feature vector = what the lift must place.
            fv.data.iter().sum()
        };
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, 9);
        let head = LiftP::bind(&mut ctx, &cfg);
        let fv_t = tape.constant(fv);
        let (bev, _) = depth_lift_core(&mut tape, fv_t, &head, &geom);
        let total_out: f64 = tape.value(bev).data.iter().sum();
        assert!(
            (total_in - total_out).abs() < 1e-6,
            "in {total_in} vs out {total_out}"
        );
    }

    #[test]
    fn towers_and_lift_pass_gradcheck() {
        let cfg = small_cfg();
        let mut rng = stream(2, "test/bb-grad");

        // Radar tower wrt every parameter; pillar input is data.
        let mut cloud = PointCloud::default();
        for i in 0..6 {
            cloud.push(
                [1.0 + 1.7 * i as f64, -2.0 + 0.8 * i as f64, -1.5 + 0.1 * i as f64],
                i as f64 * 0.5,
                1.0,
            );
        }
        // Tiny copy of the config so the check stays fast.
        let mut tiny = cfg.clone();
        tiny.apply_json(
            r#"{"grid.x_max": 3.2, "grid.y_min": -1.6, "grid.y_max": 1.6,
                "model.c_bev": [3, 4, 4], "model.c_voxel": 3,
                "model.depth_bins": 3, "model.c_cam": 4,
                "synth.image_width": 16, "synth.image_height": 12}"#,
        )
        .unwrap();
        let pillars = pillar_features(&cloud, &tiny.grid, tiny.bev_factor);
        let mut inputs = init_list(&RadarP::spec(&tiny), &mut rng);
        inputs.push(pillars);
        let case = Case::new("radar_tower", inputs, |tape, ts| {
            let p = RadarP::from_slice(&ts[..8]);
            let maps = radar_tower(tape, &p, ts[8]);
            let a = weighted_loss(tape, maps.bev[0], "rt0");
            let b = weighted_loss(tape, maps.bev[2], "rt2");
            let c = weighted_loss(tape, maps.voxmap, "rtv");
            let ab = tape.add(a, b);
            tape.add(ab, c)
        });
        let report = run_case(&case);
        assert!(report.passed(), "radar tower: {report:?}");

        // Camera tower + depth lift end to end, wrt params and image.
        let calib = tiny.synth.camera();
        let geom = lift_geometry(&tiny, &calib);
        let mut inputs = init_list(&CameraP::spec(&tiny), &mut rng);
        inputs.extend(init_list(&LiftP::spec(&tiny), &mut rng));
        inputs.push(Array::uniform(&[12, 16, 3], 0.0, 1.0, &mut rng));
        let case = Case::new("camera_lift", inputs, move |tape, ts| {
            let cam = CameraP::from_slice(&ts[..8]);
            let head = LiftP { w: ts[8], b: ts[9] };
            let fv = camera_tower(tape, &cam, ts[10]);
            let (bev, _) = depth_lift_core(tape, fv, &head, &geom);
            weighted_loss(tape, bev, "lift")
        });
        let report = run_case(&case);
        assert!(report.passed(), "camera+lift: {report:?}");
    }
}
