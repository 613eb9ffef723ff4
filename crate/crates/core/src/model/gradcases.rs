//! The named gradient-check suite behind the `gradcheck` command.
//!
//! Every differentiable module gets a case with a stable name —
//! `conv2d`, `bilinear_sample`, `depth_lift`, `rgiter`, `cmda`, `pgf`,
//! `gpe`, `ggf`, `refine_head`, `losses` — on top of the per-op cases
//! from the tensor layer. Each case builds a randomly weighted scalar
//! loss on a fresh tape; the harness compares reverse-mode gradients
//! against central finite differences element by element.

use crate::config::Config;
use crate::geometry::{Box3D, Class, GridSpec};
use crate::model::backbone::{depth_lift_core, init_list, lift_geometry, LiftP};
use crate::model::cross_attn::{cmda_fusion, CmdaDims, CmdaFusionP};
use crate::model::fusion::{rgiter, RgIterP};
use crate::model::rpn::{box_reg_terms, focal_terms};
use crate::model::stage2::{
    fuse_branches, ggf_branch, gpe_features, mlp2_apply, mlp2_spec, pgf_branch, refine_head,
    FuseHeadP, GgfP, Mlp2, PgfP, Stage1Maps, Stage2Dims,
};
use crate::tensor::gradcheck::{op_cases, run_case, Case, Report};
use crate::tensor::gradcheck::weighted_loss as wl;
use crate::tensor::Array;
use crate::util::rng::stream;
use rand::Rng;

fn stage2_dims() -> Stage2Dims {
    Stage2Dims {
        pgf: CmdaDims::new(3, 4, 6, 2, 2, 6),
        ggf_img: CmdaDims::new(5, 4, 6, 2, 2, 6),
        ggf_bev: CmdaDims::new(6, 4, 6, 2, 2, 6),
        u: 2,
        cells: 8,
        c_b: 6,
        c_gpe: 5,
        sa_heads: 2,
        sa_dh: 3,
        hidden: 10,
    }
}

fn sample_box() -> Box3D {
    Box3D::new(6.0, 1.0, -0.3, 3.6, 1.6, 1.4, 0.4, Class::Car)
}

fn box_points(b: &Box3D, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = stream(seed, "gradcases/pts");
    (0..n)
        .map(|_| {
            b.local_to_world([
                rng.gen_range(-0.5..0.5) * b.l,
                rng.gen_range(-0.5..0.5) * b.w,
                rng.gen_range(-0.5..0.5) * b.h,
            ])
        })
        .collect()
}

/// Module-level cases; see the module doc for the name list.
pub fn module_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    let mut rng = stream(57, "module-grad-inputs");

    // conv2d: 3×3 kernel, padding 1, channel bias.
    let img = Array::randn(&[5, 5, 3], 1.0, &mut rng);
    let ker = Array::randn(&[3, 3, 3, 2], 0.5, &mut rng);
    let bias = Array::randn(&[2], 0.5, &mut rng);
    cases.push(Case::new("conv2d", vec![img, ker, bias], |t, h| {
        let y = t.conv2d(h[0], h[1], 1, 1);
        let y = t.add_chan_bias(y, h[2]);
        wl(t, y, "m-conv2d")
    }));

    // bilinear_sample: gradient w.r.t. map and coords, with
    // out-of-bounds rows whose outside corners contribute zero.
    let map = Array::randn(&[5, 6, 3], 1.0, &mut rng);
    let coords = Array::new(
        vec![6, 2],
        vec![0.4, 0.3, 4.6, 3.3, 2.3, 1.7, 4.4, 3.6, -0.6, 2.3, 1.5, -0.7],
    );
    cases.push(Case::new("bilinear_sample", vec![map, coords], |t, h| {
        let y = t.bilinear_sample(h[0], h[1]);
        wl(t, y, "m-bilinear")
    }));

    // depth_lift: feature volume → depth distribution → BEV scatter.
    let lift_cfg = {
        let mut cfg = Config::default();
        cfg.apply_json(
            r#"{"grid.x_max": 3.2, "grid.y_min": -1.6, "grid.y_max": 1.6,
                "model.c_cam": 4, "model.depth_bins": 3,
                "synth.image_width": 16, "synth.image_height": 12}"#,
        )
        .unwrap();
        cfg
    };
    let geom = lift_geometry(&lift_cfg, &lift_cfg.synth.camera());
    let mut inputs = init_list(&LiftP::spec(&lift_cfg), &mut rng);
    inputs.push(Array::randn(&[geom.fv.0, geom.fv.1, lift_cfg.c_cam], 0.7, &mut rng));
    cases.push(Case::new("depth_lift", inputs, move |t, h| {
        let head = LiftP { w: h[0], b: h[1] };
        let (bev, _) = depth_lift_core(t, h[2], &head, &geom);
        wl(t, bev, "m-lift")
    }));

    // rgiter: three-scale occupancy-gated fusion, 8×8 base BEV.
    let rg_cfg = {
        let mut cfg = Config::default();
        cfg.apply_json(
            r#"{"grid.x_max": 0.8, "grid.y_min": -0.4, "grid.y_max": 0.4,
                "grid.x_size": 0.1, "grid.y_size": 0.1,
                "model.c_bev": [3, 4, 4], "model.c_cam": 3, "model.c_fb": 5}"#,
        )
        .unwrap();
        cfg
    };
    let mut inputs = init_list(&RgIterP::spec(&rg_cfg), &mut rng);
    let pi = inputs.len();
    inputs.push(Array::randn(&[8, 8, 3], 0.6, &mut rng));
    inputs.push(Array::randn(&[4, 4, 4], 0.6, &mut rng));
    inputs.push(Array::randn(&[2, 2, 4], 0.6, &mut rng));
    inputs.push(Array::randn(&[8, 8, 3], 0.6, &mut rng));
    cases.push(Case::new("rgiter", inputs, move |t, h| {
        let p = RgIterP::from_slice(&h[..pi]);
        let radar = [h[pi], h[pi + 1], h[pi + 2]];
        let out = rgiter(t, &p, &radar, h[pi + 3]);
        wl(t, out.f_b, "m-rgiter")
    }));

    // cmda: deformable attention + gated fuse, w.r.t. params, queries,
    // and the attended map.
    let cd = CmdaDims::new(3, 4, 6, 2, 2, 6);
    let refs = Array::new(vec![4, 2], vec![1.3, 0.6, 3.4, 2.3, 0.4, 3.6, 4.6, 1.4]);
    let mut inputs = init_list(&CmdaFusionP::spec("g", &cd), &mut rng);
    let pi = inputs.len();
    inputs.push(Array::randn(&[4, 3], 0.8, &mut rng));
    inputs.push(Array::randn(&[5, 6, 4], 0.8, &mut rng));
    cases.push(Case::new("cmda", inputs, move |t, h| {
        let p = CmdaFusionP::from_slice(&h[..pi], &cd);
        let y = cmda_fusion(t, &p, &cd, h[pi], &refs, h[pi + 1]);
        wl(t, y, "m-cmda")
    }));

    // pgf: per-point fusion and pooling over the proposal grid.
    let d = stage2_dims();
    let b = sample_box();
    let pts = box_points(&b, 5, 15);
    let base = GridSpec::new((0.0, 12.8, 0.8), (-4.8, 4.8, 0.8), (-2.0, 2.0, 4.0));
    let cfg = Config::default();
    let calib = cfg.synth.camera();
    let mut inputs = init_list(&PgfP::spec(&d), &mut rng);
    let pi = inputs.len();
    inputs.push(Array::randn(&[12, 16, d.pgf.cq], 0.5, &mut rng));
    inputs.push(Array::randn(&[6, 8, d.pgf.cmap], 0.5, &mut rng));
    let (dd, bb, cc) = (d.clone(), b, calib.clone());
    let pp = pts.clone();
    let bg = base.clone();
    cases.push(Case::new("pgf", inputs, move |t, h| {
        let p = PgfP::from_slice(&h[..pi], &dd);
        let maps = Stage1Maps {
            voxmap: h[pi],
            cam_fv: h[pi + 1],
            f_b: h[pi + 1],
        };
        let y = pgf_branch(t, &p, &dd, &bb, &pp, &maps, &bg, &cc, true);
        wl(t, y, "m-pgf")
    }));

    // gpe: the grid position encoder MLP over lattice features.
    let feats = gpe_features(&b, &pts, d.u);
    let mut inputs = init_list(&mlp2_spec("g", 7, 10, d.c_gpe), &mut rng);
    inputs.push(feats);
    cases.push(Case::new("gpe", inputs, |t, h| {
        let p: Mlp2 = (h[0], h[1], h[2], h[3]);
        let y = mlp2_apply(t, &p, h[4]);
        wl(t, y, "m-gpe")
    }));

    // ggf: grid-guided attention into image then BEV maps.
    let fb_grid = base.coarsen_xy(2);
    let mut inputs = init_list(&GgfP::spec(&d), &mut rng);
    let pi = inputs.len();
    inputs.push(Array::randn(&[6, 8, d.ggf_img.cmap], 0.5, &mut rng));
    inputs.push(Array::randn(&[6, 8, d.ggf_bev.cmap], 0.5, &mut rng));
    let (dd, bb, cc) = (d.clone(), b, calib.clone());
    let pp = pts.clone();
    cases.push(Case::new("ggf", inputs, move |t, h| {
        let p = GgfP::from_slice(&h[..pi], &dd);
        let maps = Stage1Maps {
            voxmap: h[pi],
            cam_fv: h[pi],
            f_b: h[pi + 1],
        };
        let y = ggf_branch(t, &p, &dd, &bb, &pp, &maps, &fb_grid, &cc);
        wl(t, y, "m-ggf")
    }));

    // refine_head: branch fusion, residual self-attention, and the
    // confidence/regression MLPs.
    let mut inputs = init_list(&FuseHeadP::spec(&d), &mut rng);
    let pi = inputs.len();
    inputs.push(Array::randn(&[d.cells, d.c_b], 0.7, &mut rng));
    inputs.push(Array::randn(&[d.cells, d.c_b], 0.7, &mut rng));
    let dd = d.clone();
    cases.push(Case::new("refine_head", inputs, move |t, h| {
        let p = FuseHeadP::from_slice(&h[..pi], &dd);
        let fused = fuse_branches(t, &p, &dd, h[pi], h[pi + 1], true);
        let (conf, reg) = refine_head(t, &p, &dd, fused);
        let c = wl(t, conf, "m-head-conf");
        let r = wl(t, reg, "m-head-reg");
        t.add(c, r)
    }));

    // losses: focal classification terms, smooth-L1 box terms with the
    // sine yaw channel, and the refinement BCE.
    let cls_logits = Array::randn(&[10, 1], 1.0, &mut rng);
    let cls_targets = Array::new(
        vec![10, 1],
        vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    );
    let alpha = Array::new(
        vec![10, 1],
        vec![0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.0, 0.0, 0.75],
    );
    let reg_pred = Array::randn(&[4, 7], 0.8, &mut rng);
    let mut reg_targets = [[0.0; 7]; 4];
    for row in reg_targets.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    let conf_logits = Array::randn(&[6, 1], 1.0, &mut rng);
    let soft: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
    let soft_targets = Array::new(vec![6, 1], soft);
    cases.push(Case::new(
        "losses",
        vec![cls_logits, reg_pred, conf_logits],
        move |t, h| {
            let fl = focal_terms(t, h[0], cls_targets.clone(), alpha.clone());
            let fl_sum = t.sum_all(fl);
            let reg = box_reg_terms(t, h[1], &reg_targets);
            let bce = t.bce_logits(h[2], soft_targets.clone());
            let bce_sum = t.sum_all(bce);
            let a = t.add(fl_sum, reg);
            t.add(a, bce_sum)
        },
    ));

    cases
}

/// All cases: per-op first, then per-module.
pub fn suite() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(module_cases());
    cases
}

/// Run every case whose name contains `filter` (all when `None`),
/// in suite order.
pub fn run_filtered(filter: Option<&str>) -> Vec<Report> {
    suite()
        .iter()
        .filter(|c| filter.map_or(true, |f| c.name.contains(f)))
        .map(run_case)
        .collect()
}
