//! Release gate: seven numbered checks covering gradients, oracle
//! equivalences, attention degeneracy, an overfit run, ablation
//! orderings, the empty-proposal property, and the metric self-test.
//!
//! Runs as a plain binary (`harness = false`) so it can print exactly
//! one `criterion N: PASS/FAIL` line per check and exit nonzero if any
//! fail. All checks run even after a failure.

use std::time::Instant;

use rand::Rng;

use radcam::config::{Config, FusionMode, Region};
use radcam::eval::{bev_iou, evaluate, mc_bev_iou, proposal_recall, FramePair};
use radcam::geometry::{normalize_yaw, points_in_box, Box3D, Class, GridSpec};
use radcam::model::backbone::lift_geometry;
use radcam::model::cross_attn::{cmda, CmdaDims, CmdaP};
use radcam::model::detector::stage1_forward;
use radcam::model::rpn::{decode, encode};
use radcam::model::stage2::{kde_channel, pgf_branch, stage2_forward, Stage2Dims, Stage2P};
use radcam::model::train::{train_loop, run_inference, run_proposals, TrainOpts};
use radcam::model::{gradcases, Ctx};
use radcam::scene::synth::generate_scene;
use radcam::scene::Scene;
use radcam::tensor::{Array, ParamStore, Tape, Tensor};
use radcam::util::rng::stream;

fn main() {
    // Optional arguments select criteria by number (e.g. `1 2 7`); the
    // default runs all seven, quick checks first.
    let args: Vec<String> = std::env::args().skip(1).collect();
    let selected: Vec<u32> = args
        .iter()
        .filter(|a| *a != "--" && !a.starts_with("--"))
        .map(|a| a.parse().expect("criterion numbers are 1-7"))
        .collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);

    let mut all_pass = true;
    let mut check = |ok: bool, line: String| {
        println!("criterion {}: {}", line, if ok { "PASS" } else { "FAIL" });
        all_pass &= ok;
    };

    if want(1) {
        let (ok, detail) = criterion1_gradients();
        check(ok, format!("1 (gradient suite) {detail}"));
    }
    if want(2) {
        let (ok, detail) = criterion2_oracles();
        check(ok, format!("2 (oracle equivalence) {detail}"));
    }
    if want(3) {
        let (ok, detail) = criterion3_degenerate_attention();
        check(ok, format!("3 (degenerate attention) {detail}"));
    }
    if want(6) {
        let (ok, detail) = criterion6_zero_point_proposal();
        check(ok, format!("6 (zero-point proposal) {detail}"));
    }
    if want(7) {
        let (ok, detail) = criterion7_metric_self_test();
        check(ok, format!("7 (metric self-test) {detail}"));
    }
    if want(4) {
        let (ok, detail) = criterion4_overfit();
        check(ok, format!("4 (overfit run) {detail}"));
    }
    if want(5) {
        let (ok, detail) = criterion5_ablation_ordering();
        check(ok, format!("5 (ablation ordering) {detail}"));
    }

    if all_pass {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: FAILURES above");
        std::process::exit(1);
    }
}

// ── criterion 1 ─────────────────────────────────────────────────────────
// Every differentiable module passes finite-difference checks with max
// relative error < 1e-4, in under two minutes.

const REQUIRED_CASES: [&str; 9] = [
    "conv2d",
    "bilinear_sample",
    "depth_lift",
    "rgiter",
    "cmda",
    "gpe",
    "ggf",
    "refine_head",
    "losses",
];

fn criterion1_gradients() -> (bool, String) {
    let t0 = Instant::now();
    let reports = gradcases::run_filtered(None);
    let elapsed = t0.elapsed().as_secs_f64();

    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for r in &reports {
        worst = worst.max(r.max_rel_err);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    let missing: Vec<&str> = REQUIRED_CASES
        .iter()
        .copied()
        .filter(|m| !reports.iter().any(|r| r.name == *m))
        .collect();

    let ok = failed.is_empty() && missing.is_empty() && elapsed < 120.0;
    let detail = format!(
        "— {} cases, max rel err {:.2e}, {:.1}s{}{}",
        reports.len(),
        worst,
        elapsed,
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {failed:?}")
        },
        if missing.is_empty() {
            String::new()
        } else {
            format!(", missing: {missing:?}")
        },
    );
    (ok, detail)
}

// ── criterion 2 ─────────────────────────────────────────────────────────
// (a) the attention block against a plain nested-loop reimplementation;
// (b) the KDE channel against the direct kernel sum; (c) exact rotated
// BEV IoU against Monte-Carlo; (d) box encode/decode round trips.

fn criterion2_oracles() -> (bool, String) {
    let (a_ok, a) = oracle_cmda();
    let (b_ok, b) = oracle_kde();
    let (c_ok, c) = oracle_iou();
    let (d_ok, d) = oracle_roundtrip();
    (
        a_ok && b_ok && c_ok && d_ok,
        format!("— cmda {a}, kde {b}, iou {c}, encode/decode {d}"),
    )
}

/// Nested-loop reimplementation of the deformable attention block:
/// offsets and logits linear in the query, per-head softmax over K,
/// bilinear reads at shifted reference points, value/output projections
/// summed over heads.
fn cmda_by_hand(
    queries: &Array,
    refs: &Array,
    map: &Array,
    arrays: &[Array],
    d: &CmdaDims,
) -> Vec<f64> {
    let (n, cq) = (queries.shape[0], queries.shape[1]);
    let (h, w, cm) = (map.shape[0], map.shape[1], map.shape[2]);
    let off_w = &arrays[0];
    let off_b = &arrays[1];
    let att_w = &arrays[2];
    let att_b = &arrays[3];
    let sample = |u: f64, v: f64, ch: usize| -> f64 {
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        let mut acc = 0.0;
        for (dx, dy, wt) in [
            (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
            (1.0, 0.0, fx * (1.0 - fy)),
            (0.0, 1.0, (1.0 - fx) * fy),
            (1.0, 1.0, fx * fy),
        ] {
            let (x, y) = (x0 + dx, y0 + dy);
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                continue;
            }
            acc += wt * map.data[(y as usize * w + x as usize) * cm + ch];
        }
        acc
    };
    let mk = d.m * d.k;
    let mut out = vec![0.0; n * d.cout];
    for p in 0..n {
        let q = &queries.data[p * cq..(p + 1) * cq];
        let mut off = vec![0.0; mk * 2];
        for j in 0..mk * 2 {
            off[j] =
                off_b.data[j] + (0..cq).map(|i| q[i] * off_w.data[i * mk * 2 + j]).sum::<f64>();
        }
        let mut logits = vec![0.0; mk];
        for j in 0..mk {
            logits[j] =
                att_b.data[j] + (0..cq).map(|i| q[i] * att_w.data[i * mk + j]).sum::<f64>();
        }
        for m in 0..d.m {
            let val_w = &arrays[4 + m];
            let out_w = &arrays[4 + d.m + m];
            let lg = &logits[m * d.k..(m + 1) * d.k];
            let mx = lg.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = lg.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut head = vec![0.0; d.ch];
            for k in 0..d.k {
                let a = exps[k] / z;
                let idx = m * d.k + k;
                let u = refs.data[p * 2] + off[idx * 2];
                let v = refs.data[p * 2 + 1] + off[idx * 2 + 1];
                for c_out in 0..d.ch {
                    let mut dot = 0.0;
                    for c_in in 0..cm {
                        dot += sample(u, v, c_in) * val_w.data[c_in * d.ch + c_out];
                    }
                    head[c_out] += a * dot;
                }
            }
            for c_out in 0..d.cout {
                let mut dot = 0.0;
                for c_in in 0..d.ch {
                    dot += head[c_in] * out_w.data[c_in * d.cout + c_out];
                }
                out[p * d.cout + c_out] += dot;
            }
        }
    }
    out
}

fn init_arrays(spec: &[(String, Vec<usize>, radcam::model::Init)], rng: &mut impl Rng) -> Vec<Array> {
    spec.iter()
        .map(|(_, shape, init)| match init {
            radcam::model::Init::Zeros => Array::randn(shape, 0.4, rng),
            _ => Array::randn(shape, 0.6, rng),
        })
        .collect()
}

fn oracle_cmda() -> (bool, String) {
    let mut rng = stream(1001, "acceptance/cmda");
    let mut max_gap = 0.0f64;
    for trial in 0..4 {
        let d = CmdaDims::new(5 + trial % 2, 4, 6, 2, 3, 6);
        let spec = CmdaP::spec("t", &d);
        let arrays = init_arrays(&spec, &mut rng);
        let n = 6;
        let queries = Array::randn(&[n, d.cq], 1.0, &mut rng);
        let map = Array::randn(&[9, 7, d.cmap], 1.0, &mut rng);
        let mut refs = Vec::new();
        for i in 0..n {
            refs.push(0.3 + (i as f64) * 1.1);
            refs.push(7.9 - (i as f64) * 1.3);
        }
        let refs = Array::new(vec![n, 2], refs);

        let mut tape = Tape::new();
        let ts: Vec<Tensor> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        let p = CmdaP::from_slice(&ts, &d);
        let q = tape.constant(queries.clone());
        let m = tape.constant(map.clone());
        let (got, _) = cmda(&mut tape, &p, &d, q, &refs, m);
        let got = &tape.value(got).data;
        let want = cmda_by_hand(&queries, &refs, &map, &arrays, &d);
        for (g, w) in got.iter().zip(&want) {
            max_gap = max_gap.max((g - w).abs());
        }
    }
    (max_gap <= 1e-10, format!("max |Δ| {max_gap:.2e} (≤1e-10)"))
}

fn oracle_kde() -> (bool, String) {
    let mut rng = stream(1002, "acceptance/kde");
    let mut max_gap = 0.0f64;
    for &n in &[1usize, 2, 17, 160] {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() * 4.0,
                    rng.gen::<f64>() * 4.0,
                    rng.gen::<f64>() * 2.0,
                ]
            })
            .collect();
        let h = 0.25 + rng.gen::<f64>();
        let got = kde_channel(&pts, h);
        // Direct kernel sum, accumulated in the opposite nesting order.
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                let d2: f64 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum();
                s += (-d2 / (2.0 * h * h)).exp();
            }
            max_gap = max_gap.max((got[i] - s / n as f64).abs());
        }
    }
    (max_gap <= 1e-9, format!("max |Δ| {max_gap:.2e} (≤1e-9)"))
}

fn random_box(rng: &mut impl Rng) -> Box3D {
    Box3D::new(
        rng.gen::<f64>() * 8.0 - 4.0,
        rng.gen::<f64>() * 8.0 - 4.0,
        rng.gen::<f64>() * 2.0 - 1.0,
        0.5 + rng.gen::<f64>() * 4.0,
        0.4 + rng.gen::<f64>() * 2.0,
        0.5 + rng.gen::<f64>() * 2.0,
        (rng.gen::<f64>() - 0.5) * 2.0 * std::f64::consts::PI,
        Class::Car,
    )
}

fn oracle_iou() -> (bool, String) {
    let mut rng = stream(1003, "acceptance/iou");
    let mut max_gap = 0.0f64;
    for pair in 0..1000 {
        let a = random_box(&mut rng);
        // Nearby second box so many pairs overlap; every third pair is a
        // yaw-only perturbation (high IoU), every tenth identical.
        let b = if pair % 10 == 0 {
            a
        } else if pair % 3 == 0 {
            let mut b = a;
            b.yaw = normalize_yaw(a.yaw + (rng.gen::<f64>() - 0.5));
            b
        } else {
            let mut b = random_box(&mut rng);
            b.x = a.x + (rng.gen::<f64>() - 0.5) * 3.0;
            b.y = a.y + (rng.gen::<f64>() - 0.5) * 3.0;
            b
        };
        let exact = bev_iou(&a, &b);
        let mc = mc_bev_iou(&a, &b, 200_000, &mut rng);
        max_gap = max_gap.max((exact - mc).abs());
    }
    (max_gap <= 0.01, format!("1000 pairs, max |Δ| {max_gap:.4} (≤0.01)"))
}

fn oracle_roundtrip() -> (bool, String) {
    let mut rng = stream(1004, "acceptance/roundtrip");
    let mut max_gap = 0.0f64;
    for _ in 0..1000 {
        let anchor = random_box(&mut rng);
        let gt = random_box(&mut rng);
        let delta = encode(&anchor, &gt);
        let back = decode(&anchor, &delta, 0.5);
        for (g, b) in [
            (gt.x, back.x),
            (gt.y, back.y),
            (gt.z, back.z),
            (gt.l, back.l),
            (gt.w, back.w),
            (gt.h, back.h),
        ] {
            max_gap = max_gap.max((g - b).abs());
        }
        max_gap = max_gap.max(normalize_yaw(gt.yaw - back.yaw).abs());
    }
    (max_gap <= 1e-9, format!("1000 boxes, max |Δ| {max_gap:.2e} (≤1e-9)"))
}

// ── criterion 3 ─────────────────────────────────────────────────────────
// Zero offsets, M = K = 1, identity projections: the attention block
// must reduce to plain bilinear sampling at the reference point.

fn criterion3_degenerate_attention() -> (bool, String) {
    let c = 4;
    let d = CmdaDims::new(5, c, c, 1, 1, c);
    let mut rng = stream(1005, "acceptance/degenerate");
    let queries = Array::randn(&[6, 5], 1.0, &mut rng);
    let map = Array::randn(&[7, 8, c], 1.0, &mut rng);
    let refs = Array::new(
        vec![6, 2],
        vec![0.6, 0.4, 3.1, 4.9, 6.2, 1.3, 2.4, 2.6, 7.3, 5.8, 0.0, 0.0],
    );
    let mut eye = Array::zeros(&[c, c]);
    for i in 0..c {
        eye.data[i * c + i] = 1.0;
    }
    let arrays = vec![
        Array::zeros(&[5, 2]),                 // offset weights: zeroed head
        Array::zeros(&[2]),                    // offset bias
        Array::randn(&[5, 1], 1.0, &mut rng),  // logits arbitrary: softmax over one = 1
        Array::zeros(&[1]),
        eye.clone(),                           // identity value projection
        eye,                                   // identity output projection
    ];
    let mut tape = Tape::new();
    let ts: Vec<Tensor> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
    let p = CmdaP::from_slice(&ts, &d);
    let q = tape.constant(queries);
    let m = tape.constant(map.clone());
    let (got, _) = cmda(&mut tape, &p, &d, q, &refs, m);
    let mt = tape.constant(map);
    let rt = tape.constant(refs);
    let want = tape.bilinear_sample(mt, rt);
    let (g, w) = (tape.value(got), tape.value(want));
    let mut max_gap = 0.0f64;
    for i in 0..g.numel() {
        max_gap = max_gap.max((g.data[i] - w.data[i]).abs());
    }
    (max_gap <= 1e-12, format!("— max |Δ| {max_gap:.2e} (≤1e-12)"))
}

// ── criterion 6 ─────────────────────────────────────────────────────────
// A proposal with no radar points inside it: the point branch yields an
// exact-zero tensor, and the refined output is reproduced bit-for-bit
// when that branch is replaced by an explicit zero tensor.

fn small_cfg() -> Config {
    let mut cfg = Config::default();
    cfg.grid = GridSpec {
        x_min: 0.0,
        x_max: 12.8,
        y_min: -6.4,
        y_max: 6.4,
        z_min: -3.0,
        z_max: 2.0,
        x_size: 0.2,
        y_size: 0.2,
        z_size: 0.2,
    };
    cfg.bev_factor = 1;
    cfg.c_voxel = 6;
    cfg.c_bev = [6, 8, 8];
    cfg.c_cam = 6;
    cfg.c_fb = 10;
    cfg.c_b = 16;
    cfg.c_gpe = 8;
    cfg.heads = 2;
    cfg.samples = 2;
    cfg.u_grid = 3;
    cfg.sa_heads = 2;
    cfg.refine_hidden = 24;
    cfg.depth_bins = 6;
    cfg.rpn_train_top_n = 8;
    cfg.rpn_infer_top_n = 12;
    cfg.rpn_sample_count = 8;
    cfg.synth.image_width = 64;
    cfg.synth.image_height = 48;
    cfg.iou_thresholds = [0.25; 4];
    cfg.conf_thresh = 0.1;
    cfg.seed = 33;
    cfg.validate().expect("small config must validate");
    cfg
}

fn stage2_bits(cfg: &Config, scene: &Scene, prop: &Box3D, store: &mut ParamStore) -> Vec<u64> {
    let geom = lift_geometry(cfg, &scene.calib);
    let d = Stage2Dims::of(cfg);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, cfg.seed);
    let s1 = stage1_forward(&mut ctx, cfg, scene, &geom);
    let p2 = Stage2P::bind(&mut ctx, &d);
    let (conf, reg) = stage2_forward(
        ctx.tape,
        &p2,
        &d,
        cfg,
        prop,
        &scene.cloud,
        &s1.maps,
        &scene.calib,
    );
    let mut bits: Vec<u64> = tape.value(conf).data.iter().map(|v| v.to_bits()).collect();
    bits.extend(tape.value(reg).data.iter().map(|v| v.to_bits()));
    bits
}

fn criterion6_zero_point_proposal() -> (bool, String) {
    let cfg = small_cfg();
    let scene = generate_scene(&cfg.synth, &cfg.grid, cfg.seed, 0);
    assert!(!scene.cloud.xyz.is_empty(), "scene should have radar returns");

    // A proposal box over a region with no radar returns.
    let mut prop = None;
    'search: for xi in 0..10 {
        for yi in 0..10 {
            let cand = Box3D::new(
                1.0 + xi as f64 * 1.2,
                -5.4 + yi as f64 * 1.2,
                -0.5,
                1.0,
                1.0,
                1.2,
                0.3,
                Class::Car,
            );
            if points_in_box(&scene.cloud.xyz, &cand).is_empty() {
                prop = Some(cand);
                break 'search;
            }
        }
    }
    let Some(prop) = prop else {
        return (false, "— no empty region found in the test scene".into());
    };

    // (i) the point branch output is exactly zero for an empty proposal
    let d = Stage2Dims::of(&cfg);
    let mut store = ParamStore::new();
    let nonzero = {
        let geom = lift_geometry(&cfg, &scene.calib);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, cfg.seed);
        let s1 = stage1_forward(&mut ctx, &cfg, &scene, &geom);
        let p2 = Stage2P::bind(&mut ctx, &d);
        let base_grid = cfg.base_bev_grid();
        let out = pgf_branch(
            ctx.tape,
            &p2.pgf,
            &d,
            &prop,
            &[],
            &s1.maps,
            &base_grid,
            &scene.calib,
            cfg.stage2_kde,
        );
        tape.value(out).data.iter().filter(|&&v| v != 0.0).count()
    };

    // (ii) the refined output is bitwise identical when the branch is
    // replaced by an explicit zero tensor (the ablation switch).
    let bits_on = stage2_bits(&cfg, &scene, &prop, &mut store);
    let mut cfg_off = cfg.clone();
    cfg_off.stage2_pgf = false;
    let bits_off = stage2_bits(&cfg_off, &scene, &prop, &mut store);
    let bitwise = bits_on == bits_off;

    (
        nonzero == 0 && bitwise,
        format!(
            "— empty-proposal point features: {nonzero} nonzero; refined outputs bitwise {}",
            if bitwise { "equal" } else { "DIFFER" }
        ),
    )
}

// ── criterion 7 ─────────────────────────────────────────────────────────
// Ground truth evaluated against itself scores mAP = 100 % in both
// regions, and the corridor filter strictly reduces the GT count for a
// scene with boxes outside the corridor.

fn criterion7_metric_self_test() -> (bool, String) {
    // Handcrafted scenes: three in-corridor boxes of distinct classes,
    // one box past the forward limit, one past the lateral limit.
    let gts1 = vec![
        Box3D::new(5.0, 0.0, -0.5, 4.2, 1.8, 1.5, 0.3, Class::Car),
        Box3D::new(3.0, 1.0, -0.6, 0.7, 0.7, 1.7, 1.2, Class::Pedestrian),
        Box3D::new(30.0, 0.0, 0.0, 7.0, 2.5, 3.0, 0.0, Class::Truck),
    ];
    let gts2 = vec![
        Box3D::new(10.0, -2.0, -0.5, 1.8, 0.7, 1.7, -0.4, Class::Cyclist),
        Box3D::new(5.0, 6.0, -0.5, 4.2, 1.8, 1.5, 0.0, Class::Car),
    ];
    let frames: Vec<FramePair> = [gts1, gts2]
        .into_iter()
        .map(|gts| {
            let dets = gts
                .iter()
                .map(|b| {
                    let mut d = *b;
                    d.score = Some(1.0);
                    d
                })
                .collect();
            FramePair { dets, gts }
        })
        .collect();

    let thresholds = [0.5, 0.5, 0.5, 0.5];
    let entire = evaluate(&frames, &thresholds, Region::Entire, 40);
    let corridor = evaluate(&frames, &thresholds, Region::Corridor, 40);
    let gt_entire: usize = entire.per_class.iter().map(|c| c.gt_count).sum();
    let gt_corridor: usize = corridor.per_class.iter().map(|c| c.gt_count).sum();

    let ok = entire.map == 1.0 && corridor.map == 1.0 && gt_corridor < gt_entire;
    (
        ok,
        format!(
            "— mAP entire {:.3}, corridor {:.3}; GT count {} → {} under corridor filter",
            entire.map, corridor.map, gt_entire, gt_corridor
        ),
    )
}

// ── criterion 4 ─────────────────────────────────────────────────────────
// Overfit 32 synthetic scenes at the pinned tiny dims (base BEV 128²,
// C_b = 64): training-set mAP@0.25 ≥ 0.80, total loss down ≥ 10× from
// epoch 1, within 300 epochs and 20 minutes.

fn overfit_cfg() -> Config {
    let mut cfg = Config::default();
    cfg.grid = GridSpec {
        x_min: 0.0,
        x_max: 12.8,
        y_min: -6.4,
        y_max: 6.4,
        z_min: -3.0,
        z_max: 2.0,
        x_size: 0.1,
        y_size: 0.1,
        z_size: 0.1,
    };
    cfg.bev_factor = 1; // radar BEV scales 128² / 64² / 32²
    cfg.c_voxel = 8;
    cfg.c_bev = [8, 16, 16];
    cfg.c_cam = 8;
    cfg.c_fb = 16;
    cfg.c_b = 64;
    cfg.c_gpe = 16;
    cfg.heads = 2;
    cfg.samples = 2;
    cfg.u_grid = 4;
    cfg.sa_heads = 2;
    cfg.refine_hidden = 64;
    cfg.depth_bins = 8;
    cfg.rpn_train_top_n = 16;
    cfg.rpn_infer_top_n = 32;
    cfg.rpn_sample_count = 16;
    cfg.synth.image_width = 128;
    cfg.synth.image_height = 96;
    cfg.iou_thresholds = [0.25; 4];
    cfg.conf_thresh = 0.1;
    cfg.lr = 0.05;
    cfg.epochs = 300;
    cfg.eval_every = 10;
    cfg.checkpoint_every = 0;
    cfg.seed = 7;
    cfg.validate().expect("overfit config must validate");
    cfg
}

fn criterion4_overfit() -> (bool, String) {
    let t0 = Instant::now();
    let cfg = overfit_cfg();
    let scenes: Vec<Scene> = (0..32)
        .map(|i| generate_scene(&cfg.synth, &cfg.grid, cfg.seed, i))
        .collect();
    let mut store = ParamStore::new();
    let opts = TrainOpts {
        out_dir: None,
        stop_at_map: Some(0.80),
        verbose: false,
    };
    let outcome = match train_loop(&cfg, &scenes, &scenes, &mut store, &opts) {
        Ok(o) => o,
        Err(e) => return (false, format!("— training failed: {e}")),
    };
    let elapsed = t0.elapsed().as_secs_f64();

    let first = outcome.history.first().map(|s| s.l_total).unwrap_or(0.0);
    let last = outcome.history.last().map(|s| s.l_total).unwrap_or(f64::MAX);
    let ratio = if last > 0.0 { first / last } else { f64::INFINITY };
    let ok = outcome.best_map >= 0.80 && ratio >= 10.0 && elapsed <= 1200.0;
    (
        ok,
        format!(
            "— train mAP@0.25 {:.3} (≥0.80) at epoch {}, loss {:.3}→{:.3} ({:.1}×, ≥10), {:.0}s (≤1200)",
            outcome.best_map, outcome.best_epoch, first, last, ratio, elapsed
        ),
    )
}

// ── criterion 5 ─────────────────────────────────────────────────────────
// Ablation orderings on a 512/128 synthetic split, medians over three
// seeds: full > stage1-only mAP; guided-fusion recall ≥ concat recall;
// radar-only > camera-only mAP.

fn ablation_cfg(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.grid = GridSpec {
        x_min: 0.0,
        x_max: 12.8,
        y_min: -6.4,
        y_max: 6.4,
        z_min: -3.0,
        z_max: 2.0,
        x_size: 0.2,
        y_size: 0.2,
        z_size: 0.2,
    };
    cfg.bev_factor = 1; // radar BEV scales 64² / 32² / 16²
    cfg.c_voxel = 6;
    cfg.c_bev = [6, 12, 12];
    cfg.c_cam = 6;
    cfg.c_fb = 12;
    cfg.c_b = 24;
    cfg.c_gpe = 12;
    cfg.heads = 2;
    cfg.samples = 2;
    cfg.u_grid = 3;
    cfg.sa_heads = 2;
    cfg.refine_hidden = 32;
    cfg.depth_bins = 6;
    cfg.rpn_train_top_n = 12;
    cfg.rpn_infer_top_n = 24;
    cfg.rpn_sample_count = 12;
    cfg.synth.image_width = 96;
    cfg.synth.image_height = 64;
    cfg.iou_thresholds = [0.25; 4];
    cfg.conf_thresh = 0.1;
    cfg.lr = 0.05;
    cfg.epochs = 6;
    cfg.eval_every = 0; // evaluate once at the end, below
    cfg.checkpoint_every = 0;
    cfg.seed = seed;
    cfg.validate().expect("ablation config must validate");
    cfg
}

struct VariantScore {
    map: f64,
    recall: f64,
}

fn run_variant(
    base_seed: u64,
    fusion: FusionMode,
    stage2: bool,
    train: &[Scene],
    val: &[Scene],
) -> VariantScore {
    let mut cfg = ablation_cfg(base_seed);
    cfg.fusion_mode = fusion;
    cfg.stage2_enabled = stage2;
    let mut store = ParamStore::new();
    let opts = TrainOpts {
        out_dir: None,
        stop_at_map: None,
        verbose: false,
    };
    train_loop(&cfg, train, val, &mut store, &opts).expect("ablation training");
    let det_frames = run_inference(&cfg, &mut store, val);
    let summary = evaluate(&det_frames, &cfg.iou_thresholds, cfg.region, cfg.recall_positions);
    let prop_frames = run_proposals(&cfg, &mut store, val);
    let recall = proposal_recall(&prop_frames, cfg.recall_iou);
    VariantScore {
        map: summary.map,
        recall,
    }
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion5_ablation_ordering() -> (bool, String) {
    let t0 = Instant::now();
    let data_cfg = ablation_cfg(424242);
    let scenes: Vec<Scene> = (0..640)
        .map(|i| generate_scene(&data_cfg.synth, &data_cfg.grid, data_cfg.seed, i))
        .collect();
    let (train, val) = scenes.split_at(512);

    let seeds = [11u64, 12, 13];
    let mut full = Vec::new();
    let mut stage1 = Vec::new();
    let mut concat = Vec::new();
    let mut radar = Vec::new();
    let mut camera = Vec::new();
    for &s in &seeds {
        full.push(run_variant(s, FusionMode::RgIter, true, train, val));
        stage1.push(run_variant(s, FusionMode::RgIter, false, train, val));
        concat.push(run_variant(s, FusionMode::Concat, false, train, val));
        radar.push(run_variant(s, FusionMode::RadarOnly, true, train, val));
        camera.push(run_variant(s, FusionMode::CameraOnly, true, train, val));
    }
    let med = |v: &[VariantScore], f: fn(&VariantScore) -> f64| {
        median3(v.iter().map(f).collect())
    };
    let full_map = med(&full, |v| v.map);
    let stage1_map = med(&stage1, |v| v.map);
    let rg_recall = med(&stage1, |v| v.recall);
    let cat_recall = med(&concat, |v| v.recall);
    let radar_map = med(&radar, |v| v.map);
    let camera_map = med(&camera, |v| v.map);
    let elapsed = t0.elapsed().as_secs_f64();

    let a = full_map > stage1_map;
    let b = rg_recall >= cat_recall;
    let c = radar_map > camera_map;
    let ok = a && b && c && elapsed <= 7200.0;
    (
        ok,
        format!(
            "— medians over seeds {seeds:?}: mAP full {full_map:.3} > stage1 {stage1_map:.3} [{}]; recall guided {rg_recall:.3} ≥ concat {cat_recall:.3} [{}]; mAP radar {radar_map:.3} > camera {camera_map:.3} [{}]; {elapsed:.0}s (≤7200)",
            if a { "ok" } else { "VIOLATED" },
            if b { "ok" } else { "VIOLATED" },
            if c { "ok" } else { "VIOLATED" },
        ),
    )
}
