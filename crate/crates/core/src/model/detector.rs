//! End-to-end assembly: towers → BEV fusion → proposals → refinement.
//!
//! The first stage is shared between training and inference. The camera
//! and radar streams honor the fusion mode at the *modality* level —
//! removing a modality replaces its maps with exact-zero constants
//! everywhere, including the refinement stage's lookups, so an ablation
//! measures the full contribution of that sensor.

use rand::Rng;

use crate::config::{Config, FusionMode};
use crate::geometry::Box3D;
use crate::model::backbone::{camera_encode, depth_lift, radar_encode, LiftGeom, RadarMaps};
use crate::model::fusion::fuse_bev;
use crate::model::rpn::{
    anchor_grid, assign_anchors, decode, extract_proposals, nms_bev, rpn_forward, rpn_loss,
    sample_proposals, RpnP, REG_DIM,
};
use crate::model::stage2::{refine_loss, stage2_forward, Stage1Maps, Stage2Dims, Stage2P};
use crate::model::{Ctx, Dims};
use crate::scene::Scene;
use crate::tensor::Tensor;

/// First-stage outputs shared by training and inference.
pub struct Stage1Out {
    pub maps: Stage1Maps,
    pub cls_map: Tensor,
    pub reg_map: Tensor,
}

pub fn stage1_forward(ctx: &mut Ctx, cfg: &Config, scene: &Scene, geom: &LiftGeom) -> Stage1Out {
    let dims = Dims::of(cfg);

    // Radar stream. Camera-only mode removes it entirely: all radar
    // maps become exact-zero constants.
    let radar = if cfg.fusion_mode == FusionMode::CameraOnly {
        RadarMaps {
            bev: [
                ctx.tape.zeros(&[dims.base.0, dims.base.1, cfg.c_bev[0]]),
                ctx.tape.zeros(&[dims.mid.0, dims.mid.1, cfg.c_bev[1]]),
                ctx.tape.zeros(&[dims.coarse.0, dims.coarse.1, cfg.c_bev[2]]),
            ],
            voxmap: ctx.tape.zeros(&[dims.base.0, dims.base.1, cfg.c_voxel]),
        }
    } else {
        radar_encode(ctx, cfg, &scene.cloud)
    };

    // Camera stream; radar-only mode removes it the same way.
    let (cam_fv, cam_bev) = if cfg.fusion_mode == FusionMode::RadarOnly {
        (
            ctx.tape.zeros(&[dims.fv.0, dims.fv.1, cfg.c_cam]),
            ctx.tape.zeros(&[dims.base.0, dims.base.1, cfg.c_cam]),
        )
    } else {
        let fv = camera_encode(ctx, cfg, scene.image.clone());
        let bev = depth_lift(ctx, cfg, fv, geom);
        (fv, bev)
    };

    let fused = fuse_bev(ctx, cfg, &radar.bev, cam_bev);
    let p = RpnP::bind(ctx, cfg);
    let (cls_map, reg_map) = rpn_forward(ctx.tape, &p, fused.f_b);
    Stage1Out {
        maps: Stage1Maps {
            voxmap: radar.voxmap,
            cam_fv,
            f_b: fused.f_b,
        },
        cls_map,
        reg_map,
    }
}

/// Scalar views of one training forward pass.
pub struct TrainStats {
    pub l_rpn: f64,
    pub l_refine: f64,
    pub total: f64,
    pub n_anchor_pos: usize,
    pub n_proposals: usize,
    pub n_sampled_pos: usize,
}

pub struct TrainForward {
    /// The scalar to differentiate: L_RPN + L_refine.
    pub total: Tensor,
    pub stats: TrainStats,
}

/// One scene's full training pass. The anchor list must come from
/// [`anchor_grid`] under the same config.
pub fn train_forward(
    ctx: &mut Ctx,
    cfg: &Config,
    scene: &Scene,
    anchors: &[Box3D],
    geom: &LiftGeom,
    rng: &mut impl Rng,
) -> TrainForward {
    let s1 = stage1_forward(ctx, cfg, scene, geom);
    let targets = assign_anchors(anchors, &scene.boxes, cfg);
    let rpn = rpn_loss(ctx.tape, s1.cls_map, s1.reg_map, &targets);

    let (refine_total, l_refine, n_proposals, n_sampled_pos) = if cfg.stage2_enabled {
        let proposals = extract_proposals(
            ctx.tape,
            s1.cls_map,
            s1.reg_map,
            anchors,
            cfg.rpn_proposal_nms,
            cfg.rpn_train_top_n,
        );
        let samples = sample_proposals(&proposals, &scene.boxes, cfg, rng);
        let d = Stage2Dims::of(cfg);
        let p = Stage2P::bind(ctx, &d);
        let calib = &scene.calib;
        let mut confs = Vec::with_capacity(samples.len());
        let mut regs = Vec::with_capacity(samples.len());
        for s in &samples {
            let (c, r) =
                stage2_forward(ctx.tape, &p, &d, cfg, &s.prop, &scene.cloud, &s1.maps, calib);
            confs.push(c);
            regs.push(r);
        }
        let conf_rows = stack_rows(ctx, &confs, 1);
        let reg_rows = stack_rows(ctx, &regs, REG_DIM);
        let refine = refine_loss(ctx.tape, conf_rows, reg_rows, &samples);
        let l = ctx.tape.value(refine.total).data[0];
        let n_pos = samples.iter().filter(|s| s.gt.is_some()).count();
        (Some(refine.total), l, proposals.len(), n_pos)
    } else {
        (None, 0.0, 0, 0)
    };

    let total = match refine_total {
        Some(r) => ctx.tape.add(rpn.total, r),
        None => rpn.total,
    };
    let stats = TrainStats {
        l_rpn: ctx.tape.value(rpn.total).data[0],
        l_refine,
        total: ctx.tape.value(total).data[0],
        n_anchor_pos: targets.n_pos,
        n_proposals,
        n_sampled_pos,
    };
    TrainForward { total, stats }
}

/// Stack single-row tensors `[1,c]` into `[n,c]`.
fn stack_rows(ctx: &mut Ctx, rows: &[Tensor], c: usize) -> Tensor {
    assert!(!rows.is_empty());
    let mut cat = rows[0];
    for &r in &rows[1..] {
        cat = ctx.tape.concat_cols(cat, r);
    }
    ctx.tape.reshape(cat, &[rows.len(), c])
}

/// Run the detector on one scene and return scored boxes: proposals,
/// refined when the second stage is enabled, confidence-filtered and
/// deduplicated with BEV NMS.
pub fn infer(ctx: &mut Ctx, cfg: &Config, scene: &Scene, anchors: &[Box3D], geom: &LiftGeom) -> Vec<Box3D> {
    let s1 = stage1_forward(ctx, cfg, scene, geom);
    let proposals = extract_proposals(
        ctx.tape,
        s1.cls_map,
        s1.reg_map,
        anchors,
        cfg.rpn_proposal_nms,
        cfg.rpn_infer_top_n,
    );
    let candidates: Vec<Box3D> = if cfg.stage2_enabled {
        let d = Stage2Dims::of(cfg);
        let p = Stage2P::bind(ctx, &d);
        proposals
            .iter()
            .map(|prop| {
                let (c, r) =
                    stage2_forward(ctx.tape, &p, &d, cfg, prop, &scene.cloud, &s1.maps, &scene.calib);
                let logit = ctx.tape.value(c).data[0];
                let delta = ctx.tape.value(r).data.clone();
                let score = 1.0 / (1.0 + (-logit).exp());
                decode(prop, &delta, score)
            })
            .collect()
    } else {
        proposals
    };
    let confident: Vec<Box3D> = candidates
        .into_iter()
        .filter(|b| b.score.unwrap_or(0.0) >= cfg.conf_thresh)
        .collect();
    let keep = nms_bev(&confident, cfg.nms_thresh);
    keep.into_iter().map(|i| confident[i]).collect()
}

/// Convenience wrapper: anchors for the current config.
pub fn detector_anchors(cfg: &Config) -> Vec<Box3D> {
    anchor_grid(cfg)
}

/// Stage-1 proposals for one scene: top-N decoded anchors after NMS,
/// with no confidence filter and no refinement. Used for proposal
/// recall measurements.
pub fn propose(
    ctx: &mut Ctx,
    cfg: &Config,
    scene: &Scene,
    anchors: &[Box3D],
    geom: &LiftGeom,
) -> Vec<Box3D> {
    let s1 = stage1_forward(ctx, cfg, scene, geom);
    extract_proposals(
        ctx.tape,
        s1.cls_map,
        s1.reg_map,
        anchors,
        cfg.rpn_proposal_nms,
        cfg.rpn_infer_top_n,
    )
}
