//! Proposal refinement: per-proposal features from two branches.
//!
//! The point branch (PGF) looks up radar voxel features under every
//! point inside the proposal, attends into the camera feature volume
//! from each point's projection, appends a kernel-density channel, and
//! max-pools the points into the proposal's U×U×U lattice through ball
//! queries. The grid branch (GPE → GGF) encodes the lattice itself —
//! local offsets, box center, per-cell occupancy — and attends first
//! into the camera volume, then into the fused BEV map. The two
//! branches are summed, mixed by one multi-head self-attention layer
//! over the lattice, and normalized; two small MLPs then read out a
//! confidence logit and a seven-value box correction.

use crate::config::Config;
use crate::geometry::{bev_project, box_grid_centers, points_in_box, Box3D, Calibration, GridSpec};
use crate::model::backbone::bind_list;
use crate::model::cross_attn::{cmda_fusion, CmdaDims, CmdaFusionP, OFF_MAP};
use crate::model::rpn::{box_reg_terms, encode, SampledProposal, REG_DIM};
use crate::model::{Ctx, Init};
use crate::scene::PointCloud;
use crate::tensor::{Array, Tape, Tensor};

pub const GPE_IN: usize = 7;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Stage2Dims {
    pub pgf: CmdaDims,
    pub ggf_img: CmdaDims,
    pub ggf_bev: CmdaDims,
    pub u: usize,
    pub cells: usize,
    pub c_b: usize,
    pub c_gpe: usize,
    pub sa_heads: usize,
    pub sa_dh: usize,
    pub hidden: usize,
}

impl Stage2Dims {
    pub fn of(cfg: &Config) -> Stage2Dims {
        let (m, k, cb) = (cfg.heads, cfg.samples, cfg.c_b);
        assert_eq!(cb % cfg.sa_heads, 0, "c_b must split across attention heads");
        Stage2Dims {
            pgf: CmdaDims::new(cfg.c_voxel, cfg.c_cam, cb, m, k, cb),
            ggf_img: CmdaDims::new(cfg.c_gpe, cfg.c_cam, cb, m, k, cb),
            ggf_bev: CmdaDims::new(cb, cfg.c_fb, cb, m, k, cb),
            u: cfg.u_grid,
            cells: cfg.u_grid.pow(3),
            c_b: cb,
            c_gpe: cfg.c_gpe,
            sa_heads: cfg.sa_heads,
            sa_dh: cb / cfg.sa_heads,
            hidden: cfg.refine_hidden,
        }
    }
}

pub fn mlp2_spec(
    prefix: &str,
    cin: usize,
    hidden: usize,
    cout: usize,
) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}.w1"), vec![cin, hidden], Init::He { fan_in: cin }),
        (format!("{prefix}.b1"), vec![hidden], Init::Zeros),
        (format!("{prefix}.w2"), vec![hidden, cout], Init::Lecun { fan_in: hidden }),
        (format!("{prefix}.b2"), vec![cout], Init::Zeros),
    ]
}

/// Two-layer MLP parameters (w1, b1, w2, b2).
pub type Mlp2 = (Tensor, Tensor, Tensor, Tensor);

pub fn mlp2_apply(tape: &mut Tape, p: &Mlp2, x: Tensor) -> Tensor {
    let h = tape.matmul(x, p.0);
    let h = tape.add_row_bias(h, p.1);
    let h = tape.relu(h);
    let y = tape.matmul(h, p.2);
    tape.add_row_bias(y, p.3)
}

// ── parameter blocks ───────────────────────────────────────────────────

/// Point branch parameters: the attention block plus the bias-free
/// pooling projection `[c_b + 1, c_b]` (bias-free keeps an empty
/// proposal's branch at exactly zero).
pub struct PgfP {
    pub att: CmdaFusionP,
    pub out: Tensor,
}

impl PgfP {
    pub fn spec(d: &Stage2Dims) -> Vec<(String, Vec<usize>, Init)> {
        let mut s = CmdaFusionP::spec("stage2.pgf", &d.pgf);
        s.push((
            "stage2.pgf.out".into(),
            vec![d.c_b + 1, d.c_b],
            Init::Lecun { fan_in: d.c_b + 1 },
        ));
        s
    }

    pub fn n_params(d: &Stage2Dims) -> usize {
        CmdaFusionP::n_params(&d.pgf) + 1
    }

    pub fn from_slice(ts: &[Tensor], d: &Stage2Dims) -> PgfP {
        assert_eq!(ts.len(), Self::n_params(d));
        PgfP {
            att: CmdaFusionP::from_slice(&ts[..ts.len() - 1], &d.pgf),
            out: ts[ts.len() - 1],
        }
    }
}

/// Grid branch parameters: the lattice encoder MLP and both attention
/// blocks (into the camera volume, then into the fused BEV map).
pub struct GgfP {
    pub gpe: Mlp2,
    pub img: CmdaFusionP,
    pub bev: CmdaFusionP,
}

impl GgfP {
    pub fn spec(d: &Stage2Dims) -> Vec<(String, Vec<usize>, Init)> {
        let mut s = mlp2_spec("stage2.gpe", GPE_IN, d.c_gpe, d.c_gpe);
        s.extend(CmdaFusionP::spec("stage2.ggf_img", &d.ggf_img));
        s.extend(CmdaFusionP::spec("stage2.ggf_bev", &d.ggf_bev));
        s
    }

    pub fn n_params(d: &Stage2Dims) -> usize {
        4 + CmdaFusionP::n_params(&d.ggf_img) + CmdaFusionP::n_params(&d.ggf_bev)
    }

    pub fn from_slice(ts: &[Tensor], d: &Stage2Dims) -> GgfP {
        assert_eq!(ts.len(), Self::n_params(d));
        let ni = CmdaFusionP::n_params(&d.ggf_img);
        GgfP {
            gpe: (ts[0], ts[1], ts[2], ts[3]),
            img: CmdaFusionP::from_slice(&ts[4..4 + ni], &d.ggf_img),
            bev: CmdaFusionP::from_slice(&ts[4 + ni..], &d.ggf_bev),
        }
    }
}

/// One residual multi-head self-attention layer over the lattice plus
/// the two readout MLPs.
pub struct FuseHeadP {
    pub sa_q: Vec<Tensor>,
    pub sa_k: Vec<Tensor>,
    pub sa_v: Vec<Tensor>,
    pub sa_out: Tensor,
    pub conf: Mlp2,
    pub reg: Mlp2,
}

impl FuseHeadP {
    pub fn spec(d: &Stage2Dims) -> Vec<(String, Vec<usize>, Init)> {
        let mut s = Vec::new();
        for h in 0..d.sa_heads {
            for role in ["q", "k", "v"] {
                s.push((
                    format!("stage2.sa.{role}{h}"),
                    vec![d.c_b, d.sa_dh],
                    Init::Lecun { fan_in: d.c_b },
                ));
            }
        }
        s.push((
            "stage2.sa.out".into(),
            vec![d.c_b, d.c_b],
            Init::Lecun { fan_in: d.c_b },
        ));
        s.extend(mlp2_spec("stage2.conf", d.cells * d.c_b, d.hidden, 1));
        s.extend(mlp2_spec("stage2.reg", d.cells * d.c_b, d.hidden, REG_DIM));
        s
    }

    pub fn n_params(d: &Stage2Dims) -> usize {
        3 * d.sa_heads + 1 + 8
    }

    pub fn from_slice(ts: &[Tensor], d: &Stage2Dims) -> FuseHeadP {
        assert_eq!(ts.len(), Self::n_params(d));
        let mut sa_q = Vec::new();
        let mut sa_k = Vec::new();
        let mut sa_v = Vec::new();
        for h in 0..d.sa_heads {
            sa_q.push(ts[3 * h]);
            sa_k.push(ts[3 * h + 1]);
            sa_v.push(ts[3 * h + 2]);
        }
        let b = 3 * d.sa_heads;
        FuseHeadP {
            sa_q,
            sa_k,
            sa_v,
            sa_out: ts[b],
            conf: (ts[b + 1], ts[b + 2], ts[b + 3], ts[b + 4]),
            reg: (ts[b + 5], ts[b + 6], ts[b + 7], ts[b + 8]),
        }
    }
}

pub struct Stage2P {
    pub pgf: PgfP,
    pub ggf: GgfP,
    pub head: FuseHeadP,
}

impl Stage2P {
    pub fn spec(d: &Stage2Dims) -> Vec<(String, Vec<usize>, Init)> {
        let mut s = PgfP::spec(d);
        s.extend(GgfP::spec(d));
        s.extend(FuseHeadP::spec(d));
        s
    }

    pub fn n_params(d: &Stage2Dims) -> usize {
        PgfP::n_params(d) + GgfP::n_params(d) + FuseHeadP::n_params(d)
    }

    pub fn from_slice(ts: &[Tensor], d: &Stage2Dims) -> Stage2P {
        assert_eq!(ts.len(), Self::n_params(d));
        let (np, ng) = (PgfP::n_params(d), GgfP::n_params(d));
        Stage2P {
            pgf: PgfP::from_slice(&ts[..np], d),
            ggf: GgfP::from_slice(&ts[np..np + ng], d),
            head: FuseHeadP::from_slice(&ts[np + ng..], d),
        }
    }

    pub fn bind(ctx: &mut Ctx, d: &Stage2Dims) -> Stage2P {
        let ts = bind_list(ctx, &Self::spec(d));
        Self::from_slice(&ts, d)
    }
}

// ── hand-computed per-proposal quantities ──────────────────────────────

/// Ball radius for grouping points onto the lattice.
pub fn ball_radius(b: &Box3D, u: usize) -> f64 {
    b.l.max(b.w).max(b.h) / u as f64
}

/// Gaussian kernel density per point: `(1/N)·Σ_j exp(−‖p_i−p_j‖²/2h²)`,
/// the self term included.
pub fn kde_channel(pts: &[[f64; 3]], h: f64) -> Vec<f64> {
    let n = pts.len();
    let inv = 1.0 / (2.0 * h * h);
    (0..n)
        .map(|i| {
            let s: f64 = (0..n)
                .map(|j| {
                    let d2 = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>();
                    (-d2 * inv).exp()
                })
                .sum();
            s / n as f64
        })
        .collect()
}

/// Indices of points within `r` of each center (Euclidean, inclusive).
pub fn ball_groups(pts: &[[f64; 3]], centers: &[[f64; 3]], r: f64) -> Vec<Vec<usize>> {
    let r2 = r * r;
    centers
        .iter()
        .map(|c| {
            (0..pts.len())
                .filter(|&i| (0..3).map(|a| (pts[i][a] - c[a]).powi(2)).sum::<f64>() <= r2)
                .collect()
        })
        .collect()
}

/// Per-lattice-cell point counts, partitioning the box interior by
/// flooring local coordinates. Cell order matches [`box_grid_centers`].
pub fn grid_counts(b: &Box3D, pts: &[[f64; 3]], u: usize) -> Vec<usize> {
    let mut counts = vec![0usize; u * u * u];
    let uf = u as f64;
    for p in pts {
        let l = b.world_to_local(*p);
        let cell = |x: f64, extent: f64| -> usize {
            (((x / extent + 0.5) * uf).floor().max(0.0) as usize).min(u - 1)
        };
        let (ix, iy, iz) = (cell(l[0], b.l), cell(l[1], b.w), cell(l[2], b.h));
        counts[(ix * u + iy) * u + iz] += 1;
    }
    counts
}

/// The grid branch's input rows `[U³, 7]`: local lattice offset from the
/// box center (3), box center in world coordinates (3), log-occupancy (1).
pub fn gpe_features(b: &Box3D, pts: &[[f64; 3]], u: usize) -> Array {
    let counts = grid_counts(b, pts, u);
    let centers = box_grid_centers(b, u);
    let mut data = Vec::with_capacity(centers.len() * GPE_IN);
    for (j, g) in centers.iter().enumerate() {
        let local = b.world_to_local(*g);
        data.extend_from_slice(&local);
        data.extend_from_slice(&[b.x, b.y, b.z]);
        data.push((counts[j] as f64).ln_1p());
    }
    Array::new(vec![centers.len(), GPE_IN], data)
}

/// Project world points to quarter-resolution image coordinates, mapping
/// anything at or behind the camera plane to the off-map sentinel.
pub fn image_refs(points: &[[f64; 3]], calib: &Calibration) -> Array {
    let mut data = Vec::with_capacity(points.len() * 2);
    for p in points {
        let (uw, vw, w) = calib.apply(*p);
        if w <= 1e-9 {
            data.extend_from_slice(&[OFF_MAP.0, OFF_MAP.1]);
        } else {
            data.extend_from_slice(&[uw / w / 4.0, vw / w / 4.0]);
        }
    }
    Array::new(vec![points.len(), 2], data)
}

/// BEV sampling coordinates of world points on a given grid.
pub fn bev_refs(points: &[[f64; 3]], grid: &GridSpec) -> Array {
    let mut data = Vec::with_capacity(points.len() * 2);
    for p in points {
        let (u, v) = bev_project(p[0], p[1], grid);
        data.extend_from_slice(&[u, v]);
    }
    Array::new(vec![points.len(), 2], data)
}

// ── branches ───────────────────────────────────────────────────────────

/// Everything the refinement stage reads from the first stage.
pub struct Stage1Maps {
    pub voxmap: Tensor,
    pub cam_fv: Tensor,
    pub f_b: Tensor,
}

/// Point branch. Returns `[U³, c_b]`; a proposal containing no points
/// yields an exact-zero constant.
#[allow(clippy::too_many_arguments)]
pub fn pgf_branch(
    tape: &mut Tape,
    p: &PgfP,
    d: &Stage2Dims,
    prop: &Box3D,
    pts: &[[f64; 3]],
    maps: &Stage1Maps,
    base_grid: &GridSpec,
    calib: &Calibration,
    with_kde: bool,
) -> Tensor {
    if pts.is_empty() {
        return tape.zeros(&[d.cells, d.c_b]);
    }
    let n = pts.len();
    let mut bev = Vec::with_capacity(n * 2);
    for p in pts {
        let (u, v) = bev_project(p[0], p[1], base_grid);
        bev.extend_from_slice(&[u, v]);
    }
    let coords = tape.constant(Array::new(vec![n, 2], bev));
    let queries = tape.bilinear_sample(maps.voxmap, coords);
    let refs = image_refs(pts, calib);
    let fused = cmda_fusion(tape, &p.att, &d.pgf, queries, &refs, maps.cam_fv);
    let kde = if with_kde {
        kde_channel(pts, 0.5 * ball_radius(prop, d.u))
    } else {
        vec![0.0; n]
    };
    let kde_t = tape.constant(Array::new(vec![n, 1], kde));
    let cat = tape.concat_cols(fused, kde_t);
    let centers = box_grid_centers(prop, d.u);
    let groups = ball_groups(pts, &centers, ball_radius(prop, d.u));
    let pooled = tape.rows_max_pool(cat, &groups);
    tape.matmul(pooled, p.out)
}

/// Grid branch: lattice encoding, then attention into the camera volume
/// and the fused BEV map. Returns `[U³, c_b]`.
#[allow(clippy::too_many_arguments)]
pub fn ggf_branch(
    tape: &mut Tape,
    p: &GgfP,
    d: &Stage2Dims,
    prop: &Box3D,
    pts: &[[f64; 3]],
    maps: &Stage1Maps,
    fb_grid: &GridSpec,
    calib: &Calibration,
) -> Tensor {
    let feats = tape.constant(gpe_features(prop, pts, d.u));
    let gpe_out = mlp2_apply(tape, &p.gpe, feats);
    let centers = box_grid_centers(prop, d.u);
    let img = image_refs(&centers, calib);
    let g1 = cmda_fusion(tape, &p.img, &d.ggf_img, gpe_out, &img, maps.cam_fv);
    let bev = bev_refs(&centers, fb_grid);
    let g2 = cmda_fusion(tape, &p.bev, &d.ggf_bev, g1, &bev, maps.f_b);
    g2
}

/// Sum the branches, mix the lattice with one residual self-attention
/// layer, and normalize each row.
pub fn fuse_branches(
    tape: &mut Tape,
    p: &FuseHeadP,
    d: &Stage2Dims,
    pt: Tensor,
    gd: Tensor,
    with_self_attn: bool,
) -> Tensor {
    let mut x = tape.add(pt, gd);
    if with_self_attn {
        let scale = 1.0 / (d.sa_dh as f64).sqrt();
        let mut heads = Vec::with_capacity(d.sa_heads);
        for h in 0..d.sa_heads {
            let q = tape.matmul(x, p.sa_q[h]);
            let k = tape.matmul(x, p.sa_k[h]);
            let v = tape.matmul(x, p.sa_v[h]);
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            heads.push(tape.matmul(a, v));
        }
        let mut cat = heads[0];
        for &h in &heads[1..] {
            cat = tape.concat_cols(cat, h);
        }
        let o = tape.matmul(cat, p.sa_out);
        x = tape.add(x, o);
    }
    tape.layer_norm_rows(x, LN_EPS)
}

/// Flatten the lattice and read out (confidence logit `[1,1]`,
/// box correction `[1,7]`).
pub fn refine_head(tape: &mut Tape, p: &FuseHeadP, d: &Stage2Dims, fused: Tensor) -> (Tensor, Tensor) {
    let flat = tape.reshape(fused, &[1, d.cells * d.c_b]);
    (mlp2_apply(tape, &p.conf, flat), mlp2_apply(tape, &p.reg, flat))
}

/// Full refinement pass for one proposal, honoring the ablation flags.
#[allow(clippy::too_many_arguments)]
pub fn stage2_forward(
    tape: &mut Tape,
    p: &Stage2P,
    d: &Stage2Dims,
    cfg: &Config,
    prop: &Box3D,
    cloud: &PointCloud,
    maps: &Stage1Maps,
    calib: &Calibration,
) -> (Tensor, Tensor) {
    let idx = points_in_box(&cloud.xyz, prop);
    let pts: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.xyz[i]).collect();
    let base_grid = cfg.base_bev_grid();
    let fb_grid = cfg.fb_grid();
    let pt = if cfg.stage2_pgf {
        pgf_branch(tape, &p.pgf, d, prop, &pts, maps, &base_grid, calib, cfg.stage2_kde)
    } else {
        tape.zeros(&[d.cells, d.c_b])
    };
    let gd = if cfg.stage2_ggf {
        ggf_branch(tape, &p.ggf, d, prop, &pts, maps, &fb_grid, calib)
    } else {
        tape.zeros(&[d.cells, d.c_b])
    };
    let fused = fuse_branches(tape, &p.head, d, pt, gd, cfg.stage2_self_attn);
    refine_head(tape, &p.head, d, fused)
}

// ── refinement loss ────────────────────────────────────────────────────

pub struct RefineLosses {
    pub conf: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

/// Confidence target: IoU mapped through `min(1, max(0, 2·IoU − ½))`.
pub fn soft_target(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

/// Confidence: BCE against the soft IoU target, averaged over all
/// sampled proposals. Regression: smooth-L1 on encodings, matched
/// proposals only, normalized by their count.
pub fn refine_loss(
    tape: &mut Tape,
    conf_logits: Tensor,
    regs: Tensor,
    samples: &[SampledProposal],
) -> RefineLosses {
    let n = samples.len();
    assert!(n > 0, "refine_loss needs at least one sampled proposal");
    assert_eq!(tape.shape(conf_logits), &[n, 1]);
    assert_eq!(tape.shape(regs), &[n, REG_DIM]);
    let targets: Vec<f64> = samples.iter().map(|s| soft_target(s.iou)).collect();
    let bce = tape.bce_logits(conf_logits, Array::new(vec![n, 1], targets));
    let s = tape.sum_all(bce);
    let conf = tape.scale(s, 1.0 / n as f64);

    let pos: Vec<usize> = (0..n).filter(|&i| samples[i].gt.is_some()).collect();
    let reg = if pos.is_empty() {
        tape.zeros(&[1])
    } else {
        let encs: Vec<[f64; 7]> = pos
            .iter()
            .map(|&i| encode(&samples[i].prop, &samples[i].gt.unwrap()))
            .collect();
        let pred = tape.gather_rows(regs, pos.clone());
        let s = box_reg_terms(tape, pred, &encs);
        tape.scale(s, 1.0 / pos.len() as f64)
    };
    let total = tape.add(conf, reg);
    RefineLosses { conf, reg, total }
}
