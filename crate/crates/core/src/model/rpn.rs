//! Region proposal head on the fused BEV map.
//!
//! Eight anchors per map cell (four classes × two yaw bins, 0 and π/2)
//! laid out so flat anchor index `(row·nx + col)·8 + class·2 + yaw_bin`
//! matches the channel order of the head's output maps. Classification
//! trains with a focal binary loss normalized by the positive count;
//! regression trains with smooth-L1 on the seven-value encoding, the
//! yaw channel routed through `sin(pred − target)` so supervision is
//! invariant to full-turn wraps.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Config;
use crate::eval::{bev_iou, iou3d};
use crate::geometry::{Box3D, Class};
use crate::model::backbone::bind_list;
use crate::model::{Ctx, Init};
use crate::tensor::{Array, Tape, Tensor};

pub const YAW_BINS: usize = 2;
pub const ANCHORS_PER_CELL: usize = 4 * YAW_BINS;
pub const REG_DIM: usize = 7;
/// Huber transition point for box regression.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
/// Focal loss exponent (fixed; the weight is squared on the tape).
pub const FOCAL_GAMMA: f64 = 2.0;
/// Positive-class weight. Balanced rather than the usual 0.25: radar
/// scenes here have a few dozen positives among tens of thousands of
/// anchors, and the focal down-weighting already tames the negatives,
/// so a stronger positive pull buys convergence speed at small scale.
pub const FOCAL_ALPHA: f64 = 0.5;
/// Initial classification bias: σ(−2) ≈ 0.12, so a fresh head leans
/// background without pinning positives too far from the threshold.
pub const CLS_BIAS_PRIOR: f64 = -2.0;

/// All anchors for the configured map, in flat map order.
pub fn anchor_grid(cfg: &Config) -> Vec<Box3D> {
    let grid = cfg.fb_grid();
    let (ny, nx) = (grid.ny(), grid.nx());
    let mut out = Vec::with_capacity(ny * nx * ANCHORS_PER_CELL);
    for row in 0..ny {
        let y = grid.y_min + (row as f64 + 0.5) * grid.y_size;
        for col in 0..nx {
            let x = grid.x_min + (col as f64 + 0.5) * grid.x_size;
            for class_id in 0..4 {
                let [l, w, h] = cfg.anchor_sizes[class_id];
                let z = cfg.anchor_z[class_id];
                for yaw_bin in 0..YAW_BINS {
                    let yaw = yaw_bin as f64 * FRAC_PI_2;
                    out.push(Box3D::new(x, y, z, l, w, h, yaw, Class::from_id(class_id)));
                }
            }
        }
    }
    out
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Seven-value box encoding relative to an anchor: centers normalized
/// by the anchor's BEV diagonal (x, y) and height (z), log size ratios,
/// raw yaw difference.
pub fn encode(anchor: &Box3D, gt: &Box3D) -> [f64; 7] {
    let d = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    [
        (gt.x - anchor.x) / d,
        (gt.y - anchor.y) / d,
        (gt.z - anchor.z) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        wrap_angle(gt.yaw - anchor.yaw),
    ]
}

pub fn decode(anchor: &Box3D, delta: &[f64], score: f64) -> Box3D {
    assert_eq!(delta.len(), REG_DIM);
    // A half-trained head can emit huge or non-finite size deltas; keep
    // the exponent in a range that stays positive and finite so a bad
    // proposal becomes a low-scoring box rather than a crash.
    let size = |v: f64| if v.is_finite() { v.clamp(-6.0, 6.0) } else { 0.0 };
    let shift = |v: f64| if v.is_finite() { v } else { 0.0 };
    let d = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    let mut b = Box3D::new(
        anchor.x + shift(delta[0]) * d,
        anchor.y + shift(delta[1]) * d,
        anchor.z + shift(delta[2]) * anchor.h,
        anchor.l * size(delta[3]).exp(),
        anchor.w * size(delta[4]).exp(),
        anchor.h * size(delta[5]).exp(),
        wrap_angle(anchor.yaw + shift(delta[6])),
        anchor.class,
    );
    b.score = Some(score);
    b
}

// ── head ───────────────────────────────────────────────────────────────

pub struct RpnP {
    pub conv: (Tensor, Tensor),
    pub cls: (Tensor, Tensor),
    pub reg: (Tensor, Tensor),
}

impl RpnP {
    pub fn spec(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
        let c = cfg.c_fb;
        vec![
            ("rpn.conv.w".into(), vec![3, 3, c, c], Init::He { fan_in: 9 * c }),
            ("rpn.conv.b".into(), vec![c], Init::Zeros),
            (
                "rpn.cls.w".into(),
                vec![1, 1, c, ANCHORS_PER_CELL],
                Init::Lecun { fan_in: c },
            ),
            (
                "rpn.cls.b".into(),
                vec![ANCHORS_PER_CELL],
                Init::Const(CLS_BIAS_PRIOR),
            ),
            (
                "rpn.reg.w".into(),
                vec![1, 1, c, ANCHORS_PER_CELL * REG_DIM],
                Init::Lecun { fan_in: c },
            ),
            (
                "rpn.reg.b".into(),
                vec![ANCHORS_PER_CELL * REG_DIM],
                Init::Zeros,
            ),
        ]
    }

    pub fn bind(ctx: &mut Ctx, cfg: &Config) -> RpnP {
        let ts = bind_list(ctx, &Self::spec(cfg));
        Self::from_slice(&ts)
    }

    pub const N_PARAMS: usize = 6;

    pub fn from_slice(ts: &[Tensor]) -> RpnP {
        assert_eq!(ts.len(), Self::N_PARAMS);
        RpnP {
            conv: (ts[0], ts[1]),
            cls: (ts[2], ts[3]),
            reg: (ts[4], ts[5]),
        }
    }
}

/// Shared 3×3 conv, then 1×1 heads: logits `[my,mx,8]`, deltas `[my,mx,56]`.
pub fn rpn_forward(tape: &mut Tape, p: &RpnP, f_b: Tensor) -> (Tensor, Tensor) {
    let t = tape.conv2d(f_b, p.conv.0, 1, 1);
    let t = tape.add_chan_bias(t, p.conv.1);
    let t = tape.relu(t);
    let cls = tape.conv2d(t, p.cls.0, 1, 0);
    let cls = tape.add_chan_bias(cls, p.cls.1);
    let reg = tape.conv2d(t, p.reg.0, 1, 0);
    let reg = tape.add_chan_bias(reg, p.reg.1);
    (cls, reg)
}

// ── target assignment ──────────────────────────────────────────────────

/// Per-anchor training targets. `cls[i]` is 1 (positive), 0 (negative)
/// or −1 (ignored); `reg` lists positive anchors with encoded targets.
pub struct AnchorTargets {
    pub cls: Vec<f64>,
    pub reg: Vec<(usize, [f64; 7])>,
    pub n_pos: usize,
}

/// Match anchors to ground truth with per-class thresholds. Anchors
/// only compete for boxes of their own class; every ground-truth box
/// additionally force-matches its best-overlapping anchor so no object
/// goes unsupervised.
pub fn assign_anchors(anchors: &[Box3D], gts: &[Box3D], cfg: &Config) -> AnchorTargets {
    let grid = cfg.fb_grid();
    let (ny, nx) = (grid.ny(), grid.nx());
    assert_eq!(anchors.len(), ny * nx * ANCHORS_PER_CELL);
    let mut cls = vec![0.0; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];

    for (gi, gt) in gts.iter().enumerate() {
        let class_id = gt.class.id();
        let [al, aw, _] = cfg.anchor_sizes[class_id];
        // Centers farther apart than the summed half-diagonals cannot
        // overlap, so only a window of cells needs exact IoU.
        let r = ((gt.l * gt.l + gt.w * gt.w).sqrt() + (al * al + aw * aw).sqrt()) / 2.0;
        let col_lo = (((gt.x - r - grid.x_min) / grid.x_size).floor()).max(0.0) as usize;
        let col_hi = ((((gt.x + r - grid.x_min) / grid.x_size).ceil()) as usize).min(nx);
        let row_lo = (((gt.y - r - grid.y_min) / grid.y_size).floor()).max(0.0) as usize;
        let row_hi = ((((gt.y + r - grid.y_min) / grid.y_size).ceil()) as usize).min(ny);
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                for yaw_bin in 0..YAW_BINS {
                    let ai = (row * nx + col) * ANCHORS_PER_CELL + class_id * YAW_BINS + yaw_bin;
                    let iou = bev_iou(&anchors[ai], gt);
                    if iou > best_iou[ai] {
                        best_iou[ai] = iou;
                        best_gt[ai] = gi;
                    }
                    if iou > gt_best[gi].0 {
                        gt_best[gi] = (iou, ai);
                    }
                }
            }
        }
    }

    for ai in 0..anchors.len() {
        if best_gt[ai] == usize::MAX {
            continue;
        }
        let class_id = anchors[ai].class.id();
        if best_iou[ai] >= cfg.rpn_pos_iou[class_id] {
            cls[ai] = 1.0;
        } else if best_iou[ai] >= cfg.rpn_neg_iou[class_id] {
            cls[ai] = -1.0;
        }
    }
    for (gi, &(iou, ai)) in gt_best.iter().enumerate() {
        if ai != usize::MAX && iou > 0.0 {
            cls[ai] = 1.0;
            best_gt[ai] = gi;
        }
    }

    let mut reg = Vec::new();
    for ai in 0..anchors.len() {
        if cls[ai] == 1.0 {
            reg.push((ai, encode(&anchors[ai], &gts[best_gt[ai]])));
        }
    }
    let n_pos = reg.len();
    AnchorTargets { cls, reg, n_pos }
}

// ── losses ─────────────────────────────────────────────────────────────

/// Elementwise focal binary cross-entropy (γ = 2): for each logit,
/// `α_t · (1 − p_t)² · bce`, with `p_t = exp(−bce)`. Rows whose weight
/// is zero fall out of the sum, which is how ignored anchors are masked.
pub fn focal_terms(tape: &mut Tape, logits: Tensor, targets: Array, alpha_t: Array) -> Tensor {
    let bce = tape.bce_logits(logits, targets);
    let neg = tape.scale(bce, -1.0);
    let p_t = tape.exp(neg);
    let m = tape.scale(p_t, -1.0);
    let om = tape.add_scalar(m, 1.0);
    let w = tape.mul(om, om);
    let fl = tape.mul(w, bce);
    tape.mul_const(fl, alpha_t)
}

/// Summed smooth-L1 over seven-value encodings: channels 0–5 against the
/// targets directly, the yaw channel through `sin(pred − target)`.
pub fn box_reg_terms(tape: &mut Tape, pred: Tensor, targets: &[[f64; 7]]) -> Tensor {
    let p = targets.len();
    assert_eq!(tape.shape(pred), &[p, REG_DIM]);
    let mut t6 = Vec::with_capacity(p * 6);
    let mut tyaw = Vec::with_capacity(p);
    for enc in targets {
        t6.extend_from_slice(&enc[..6]);
        tyaw.push(enc[6]);
    }
    let first6 = tape.slice_cols(pred, 0, 6);
    let l6 = tape.smooth_l1(first6, Array::new(vec![p, 6], t6), SMOOTH_L1_BETA);
    let pred_yaw = tape.slice_cols(pred, 6, 1);
    let t_yaw = tape.constant(Array::new(vec![p, 1], tyaw));
    let d = tape.sub(pred_yaw, t_yaw);
    let sin_d = tape.sin(d);
    let lyaw = tape.smooth_l1(sin_d, Array::zeros(&[p, 1]), SMOOTH_L1_BETA);
    let s6 = tape.sum_all(l6);
    let sy = tape.sum_all(lyaw);
    tape.add(s6, sy)
}

pub struct RpnLosses {
    pub cls: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

pub fn rpn_loss(
    tape: &mut Tape,
    cls_map: Tensor,
    reg_map: Tensor,
    targets: &AnchorTargets,
) -> RpnLosses {
    let n = targets.cls.len();
    assert_eq!(tape.value(cls_map).numel(), n);
    let norm = 1.0 / (targets.n_pos.max(1) as f64);

    let logits = tape.reshape(cls_map, &[n, 1]);
    let t: Vec<f64> = targets.cls.iter().map(|&c| if c == 1.0 { 1.0 } else { 0.0 }).collect();
    let alpha_t: Vec<f64> = targets
        .cls
        .iter()
        .map(|&c| {
            if c == 1.0 {
                FOCAL_ALPHA
            } else if c == 0.0 {
                1.0 - FOCAL_ALPHA
            } else {
                0.0 // ignored band
            }
        })
        .collect();
    let fl = focal_terms(
        tape,
        logits,
        Array::new(vec![n, 1], t),
        Array::new(vec![n, 1], alpha_t),
    );
    let s = tape.sum_all(fl);
    let cls_loss = tape.scale(s, norm);

    let reg_loss = if targets.reg.is_empty() {
        tape.zeros(&[1])
    } else {
        let rows = tape.reshape(reg_map, &[n, REG_DIM]);
        let idx: Vec<usize> = targets.reg.iter().map(|&(ai, _)| ai).collect();
        let pred = tape.gather_rows(rows, idx);
        let encs: Vec<[f64; 7]> = targets.reg.iter().map(|&(_, e)| e).collect();
        let s = box_reg_terms(tape, pred, &encs);
        tape.scale(s, norm)
    };

    let total = tape.add(cls_loss, reg_loss);
    RpnLosses {
        cls: cls_loss,
        reg: reg_loss,
        total,
    }
}

// ── proposal extraction ────────────────────────────────────────────────

/// Greedy BEV non-maximum suppression. Returns indices of the survivors
/// in descending score order.
pub fn nms_bev(boxes: &[Box3D], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = boxes[a].score.unwrap_or(0.0);
        let sb = boxes[b].score.unwrap_or(0.0);
        sb.partial_cmp(&sa).unwrap()
    });
    let mut keep = Vec::new();
    let mut dead = vec![false; boxes.len()];
    for &i in &order {
        if dead[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !dead[j] && j != i && bev_iou(&boxes[i], &boxes[j]) > thresh {
                dead[j] = true;
            }
        }
    }
    keep
}

/// Cap on how many top-scoring anchors enter proposal NMS.
pub const PRE_NMS_CAP: usize = 1024;

/// Decode the head maps into class-agnostic proposals: sigmoid scores,
/// top-k pre-selection, BEV NMS, then the best `top_n`.
pub fn extract_proposals(
    tape: &Tape,
    cls_map: Tensor,
    reg_map: Tensor,
    anchors: &[Box3D],
    nms_thresh: f64,
    top_n: usize,
) -> Vec<Box3D> {
    let logits = &tape.value(cls_map).data;
    let deltas = &tape.value(reg_map).data;
    assert_eq!(logits.len(), anchors.len());
    assert_eq!(deltas.len(), anchors.len() * REG_DIM);
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    order.truncate(PRE_NMS_CAP);
    let cands: Vec<Box3D> = order
        .iter()
        .map(|&ai| {
            let score = 1.0 / (1.0 + (-logits[ai]).exp());
            decode(&anchors[ai], &deltas[ai * REG_DIM..(ai + 1) * REG_DIM], score)
        })
        .collect();
    let keep = nms_bev(&cands, nms_thresh);
    keep.into_iter().take(top_n).map(|i| cands[i]).collect()
}

// ── proposal sampling for the refinement stage ─────────────────────────

#[derive(Clone, Debug)]
pub struct SampledProposal {
    pub prop: Box3D,
    /// Best 3D IoU against ground truth (0 when there is none).
    pub iou: f64,
    /// The matched box, when the overlap clears the match threshold.
    pub gt: Option<Box3D>,
}

/// Subsample proposals for refinement training: up to
/// `sample_count · pos_fraction` positives (IoU ≥ match threshold),
/// the remainder filled with negatives.
pub fn sample_proposals(
    proposals: &[Box3D],
    gts: &[Box3D],
    cfg: &Config,
    rng: &mut impl Rng,
) -> Vec<SampledProposal> {
    let scored: Vec<SampledProposal> = proposals
        .iter()
        .map(|p| {
            let mut best = 0.0;
            let mut best_gt = None;
            for gt in gts {
                let iou = iou3d(p, gt);
                if iou > best {
                    best = iou;
                    best_gt = Some(*gt);
                }
            }
            SampledProposal {
                prop: *p,
                iou: best,
                gt: if best >= cfg.rpn_match_iou { best_gt } else { None },
            }
        })
        .collect();
    let mut pos: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].gt.is_some()).collect();
    let mut neg: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].gt.is_none()).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let want_pos = ((cfg.rpn_sample_count as f64) * cfg.rpn_pos_fraction).round() as usize;
    pos.truncate(want_pos);
    neg.truncate(cfg.rpn_sample_count - pos.len().min(cfg.rpn_sample_count));
    let mut take: Vec<usize> = pos.into_iter().chain(neg).collect();
    take.truncate(cfg.rpn_sample_count);
    take.sort_unstable();
    take.into_iter().map(|i| scored[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::init_list;
    use crate::tensor::gradcheck::{run_case, Case};
    use crate::util::rng::stream;
    use rand::Rng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.apply_json(
            r#"{
                "grid.x_max": 12.8, "grid.y_min": -6.4, "grid.y_max": 6.4,
                "grid.x_size": 0.1, "grid.y_size": 0.1, "model.bev_factor": 4,
                "model.c_fb": 6,
                "synth.image_width": 16, "synth.image_height": 16
            }"#,
        )
        .unwrap();
        cfg
    }

    fn random_box(rng: &mut impl Rng) -> Box3D {
        Box3D::new(
            rng.gen_range(2.0..10.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.5..6.0),
            rng.gen_range(0.4..2.5),
            rng.gen_range(0.8..3.0),
            rng.gen_range(-PI..PI),
            Class::from_id(rng.gen_range(0..4)),
        )
    }

    #[test]
    fn encode_then_decode_recovers_the_box() {
        let mut rng = stream(7, "rpn/roundtrip");
        for _ in 0..200 {
            let anchor = random_box(&mut rng);
            let gt = random_box(&mut rng);
            let enc = encode(&anchor, &gt);
            let back = decode(&anchor, &enc, 1.0);
            for (a, b) in [
                (back.x, gt.x),
                (back.y, gt.y),
                (back.z, gt.z),
                (back.l, gt.l),
                (back.w, gt.w),
                (back.h, gt.h),
            ] {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            let dyaw = wrap_angle(back.yaw - gt.yaw);
            assert!(dyaw.abs() < 1e-9, "yaw {} vs {}", back.yaw, gt.yaw);
        }
    }

    #[test]
    fn zero_delta_decodes_to_the_anchor_itself() {
        let mut rng = stream(8, "rpn/zero");
        let anchor = random_box(&mut rng);
        let b = decode(&anchor, &[0.0; 7], 0.5);
        assert_eq!((b.x, b.y, b.z), (anchor.x, anchor.y, anchor.z));
        assert_eq!((b.l, b.w, b.h, b.yaw), (anchor.l, anchor.w, anchor.h, anchor.yaw));
    }

    #[test]
    fn focal_term_matches_the_hand_computed_value() {
        // logit 0, target 1, α_t = 1: bce = ln 2, p_t = ½,
        // (1 − p_t)² · bce = ¼·ln 2.
        let mut tape = Tape::new();
        let x = tape.constant(Array::new(vec![1, 1], vec![0.0]));
        let fl = focal_terms(
            &mut tape,
            x,
            Array::new(vec![1, 1], vec![1.0]),
            Array::new(vec![1, 1], vec![1.0]),
        );
        let got = tape.value(fl).data[0];
        let want = 0.25 * 2.0f64.ln();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn anchor_grid_matches_the_map_layout() {
        let cfg = tiny_cfg();
        let grid = cfg.fb_grid();
        let anchors = anchor_grid(&cfg);
        assert_eq!(anchors.len(), grid.ny() * grid.nx() * ANCHORS_PER_CELL);
        // Spot-check one flat index: row 3, col 5, class 2, yaw bin 1.
        let ai = (3 * grid.nx() + 5) * ANCHORS_PER_CELL + 2 * YAW_BINS + 1;
        let a = &anchors[ai];
        assert_eq!(a.class, Class::Cyclist);
        assert!((a.x - (grid.x_min + 5.5 * grid.x_size)).abs() < 1e-12);
        assert!((a.y - (grid.y_min + 3.5 * grid.y_size)).abs() < 1e-12);
        assert!((a.yaw - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn aligned_ground_truth_becomes_a_positive_anchor() {
        let cfg = tiny_cfg();
        let anchors = anchor_grid(&cfg);
        let grid = cfg.fb_grid();
        // A Car exactly on the anchor at row 10, col 12, yaw 0.
        let x = grid.x_min + 12.5 * grid.x_size;
        let y = grid.y_min + 10.5 * grid.y_size;
        let [l, w, h] = cfg.anchor_sizes[0];
        let gt = Box3D::new(x, y, cfg.anchor_z[0], l, w, h, 0.0, Class::Car);
        let t = assign_anchors(&anchors, &[gt], &cfg);
        let ai = (10 * grid.nx() + 12) * ANCHORS_PER_CELL;
        assert_eq!(t.cls[ai], 1.0, "the aligned anchor must be positive");
        assert!(t.n_pos >= 1);
        let (_, enc) = t.reg.iter().find(|&&(i, _)| i == ai).unwrap();
        assert!(enc.iter().all(|&v| v.abs() < 1e-9), "{enc:?}");
        // Anchors far away stay negative, and the count of non-negative
        // anchors is a small local neighborhood.
        let far = ((grid.ny() - 2) * grid.nx() + 2) * ANCHORS_PER_CELL;
        assert_eq!(t.cls[far], 0.0);
        let touched = t.cls.iter().filter(|&&c| c != 0.0).count();
        assert!(touched < 200, "{touched} anchors marked non-negative");
    }

    #[test]
    fn every_ground_truth_force_matches_at_least_one_anchor() {
        let cfg = tiny_cfg();
        let anchors = anchor_grid(&cfg);
        // A box much smaller than its class anchor: best IoU ≈ 0.13,
        // far below even the negative threshold.
        let gt = Box3D::new(6.03, 1.07, -0.7, 1.0, 1.0, 1.0, 0.3, Class::Car);
        let t = assign_anchors(&anchors, &[gt], &cfg);
        assert_eq!(t.n_pos, 1, "force-match must rescue exactly one anchor");
        let (ai, _) = t.reg[0];
        assert_eq!(anchors[ai].class, Class::Car);
    }

    #[test]
    fn nms_keeps_one_of_two_duplicates() {
        let mut a = Box3D::new(5.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.2, Class::Car);
        a.score = Some(0.9);
        let mut b = a;
        b.score = Some(0.8);
        let mut c = Box3D::new(10.0, 3.0, 0.0, 4.0, 2.0, 1.5, 0.0, Class::Car);
        c.score = Some(0.7);
        let keep = nms_bev(&[a, b, c], 0.8);
        assert_eq!(keep, vec![0, 2]);
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let cfg = tiny_cfg();
        let anchors = anchor_grid(&cfg);
        let grid = cfg.fb_grid();
        let (ny, nx) = (grid.ny(), grid.nx());
        let x = grid.x_min + 12.5 * grid.x_size;
        let y = grid.y_min + 10.5 * grid.y_size;
        let gt = Box3D::new(x + 0.3, y - 0.2, -0.6, 4.4, 1.9, 1.6, 0.1, Class::Car);
        let targets = assign_anchors(&anchors, &[gt], &cfg);
        assert!(targets.n_pos >= 1);

        let n = anchors.len();
        let mut logits = vec![-20.0; n];
        let mut deltas = vec![0.0; n * REG_DIM];
        for &(ai, enc) in &targets.reg {
            logits[ai] = 20.0;
            deltas[ai * REG_DIM..(ai + 1) * REG_DIM].copy_from_slice(&enc);
        }
        let mut tape = Tape::new();
        let cls_map = tape.constant(Array::new(vec![ny, nx, ANCHORS_PER_CELL], logits));
        let reg_map = tape.constant(Array::new(vec![ny, nx, ANCHORS_PER_CELL * REG_DIM], deltas));
        let losses = rpn_loss(&mut tape, cls_map, reg_map, &targets);
        let total = tape.value(losses.total).data[0];
        assert!(total < 1e-4, "loss at perfect predictions = {total}");
    }

    #[test]
    fn proposals_rank_by_score_and_prune_duplicates() {
        let cfg = tiny_cfg();
        let anchors = anchor_grid(&cfg);
        let grid = cfg.fb_grid();
        let n = anchors.len();
        let mut logits = vec![-12.0; n];
        // Two yaw twins of the same cell and class decode (with zero
        // deltas) to perpendicular near-square boxes — but for a Car
        // anchor they differ a lot, so both survive NMS; a duplicate of
        // the first in the same yaw bin of a neighboring cell does not.
        let hot = (10 * grid.nx() + 12) * ANCHORS_PER_CELL;
        let neighbor = (10 * grid.nx() + 13) * ANCHORS_PER_CELL;
        logits[hot] = 3.0;
        logits[neighbor] = 2.0;
        let mut deltas = vec![0.0; n * REG_DIM];
        // Make the neighbor decode to exactly the hot anchor's box.
        let enc = encode(&anchors[neighbor], &anchors[hot]);
        deltas[neighbor * REG_DIM..(neighbor + 1) * REG_DIM].copy_from_slice(&enc);
        let mut tape = Tape::new();
        let cls_map = tape.constant(Array::new(vec![grid.ny(), grid.nx(), ANCHORS_PER_CELL], logits));
        let reg_map = tape.constant(Array::new(
            vec![grid.ny(), grid.nx(), ANCHORS_PER_CELL * REG_DIM],
            deltas,
        ));
        let props = extract_proposals(&tape, cls_map, reg_map, &anchors, 0.8, 16);
        assert_eq!(props.len(), 16, "top_n respected");
        let scores: Vec<f64> = props.iter().map(|p| p.score.unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "descending scores");
        // The duplicate decoded from the neighbor cell must be gone:
        // exactly one kept proposal overlaps the hot anchor at IoU ≥ 0.8.
        let dups = props.iter().filter(|p| bev_iou(p, &anchors[hot]) > 0.8).count();
        assert_eq!(dups, 1);
        assert!((props[0].score.unwrap() - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn subsampling_respects_the_positive_fraction() {
        let mut cfg = tiny_cfg();
        cfg.apply_json(r#"{"rpn.sample_count": 8, "rpn.pos_fraction": 0.5}"#)
            .unwrap();
        let gt = Box3D::new(6.0, 1.0, -0.5, 4.2, 1.8, 1.55, 0.2, Class::Car);
        let mut props = Vec::new();
        for i in 0..6 {
            let mut p = gt;
            p.x += i as f64 * 0.01; // near-exact matches, IoU ≈ 1
            p.score = Some(0.9);
            props.push(p);
        }
        for i in 0..4 {
            let mut p = Box3D::new(10.0, -4.0 + i as f64, -0.5, 4.2, 1.8, 1.55, 0.0, Class::Car);
            p.score = Some(0.3);
            props.push(p);
        }
        let mut rng = stream(9, "rpn/sample");
        let sampled = sample_proposals(&props, &[gt], &cfg, &mut rng);
        assert_eq!(sampled.len(), 8);
        let n_pos = sampled.iter().filter(|s| s.gt.is_some()).count();
        assert_eq!(n_pos, 4, "positives capped at sample_count · pos_fraction");
        for s in &sampled {
            if s.gt.is_some() {
                assert!(s.iou >= cfg.rpn_match_iou);
            } else {
                assert!(s.iou < cfg.rpn_match_iou);
            }
        }
    }

    #[test]
    fn rpn_head_and_loss_pass_gradcheck() {
        let mut cfg = tiny_cfg();
        // Shrink the map for finite differences: 8×8 mid-scale cells.
        cfg.apply_json(
            r#"{"grid.x_max": 6.4, "grid.y_min": -3.2, "grid.y_max": 3.2,
                "grid.x_size": 0.1, "grid.y_size": 0.1}"#,
        )
        .unwrap();
        let anchors = anchor_grid(&cfg);
        let gt = Box3D::new(3.1, 0.4, -0.5, 4.0, 1.7, 1.5, 0.3, Class::Car);
        let targets = assign_anchors(&anchors, &[gt], &cfg);
        assert!(targets.n_pos >= 1);
        let grid = cfg.fb_grid();
        let mut rng = stream(27, "rpn/grad");
        let mut inputs = init_list(&RpnP::spec(&cfg), &mut rng);
        let pi = inputs.len();
        inputs.push(Array::randn(&[grid.ny(), grid.nx(), cfg.c_fb], 1.0, &mut rng));
        let case = Case::new("rpn", inputs, move |tape, ts| {
            let p = RpnP::from_slice(&ts[..pi]);
            let (cls, reg) = rpn_forward(tape, &p, ts[pi]);
            rpn_loss(tape, cls, reg, &targets).total
        });
        let report = run_case(&case);
        assert!(report.passed(), "{report:?}");
    }
}
