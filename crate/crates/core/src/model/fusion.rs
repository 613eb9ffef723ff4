//! BEV fusion of the radar pyramid with the lifted camera map.
//!
//! The full path: per scale k, a radar-derived
//! occupancy weight W_k gates the camera features (F'_k = F_cam_k ⊙ W_k),
//! the gated map is pushed down to the next scale with a bias-free
//! stride-2 conv, each scale fuses radar and gated camera with a conv,
//! and the three fused maps are resampled to the middle scale and mixed
//! into the final map F_B. The occupancy convs are zero-initialized so a
//! fresh network starts with W_k ≡ 0.5 everywhere; the stride-2 camera
//! chain is bias-free so a zero camera map stays exactly zero at every
//! scale, making the radar-only ablation literally "camera map = 0".

use crate::config::{Config, FusionMode};
use crate::model::backbone::{bind_list, conv_spec};
use crate::model::{Ctx, Dims, Init};
use crate::tensor::{Tape, Tensor};

pub struct RgIterP {
    /// Occupancy convs (3×3 → 1 channel), zero-initialized.
    pub occ: [(Tensor, Tensor); 3],
    /// Stride-2 camera downsamplers, bias-free.
    pub cam_down: [Tensor; 2],
    /// Per-scale fusion convs.
    pub fuse: [(Tensor, Tensor); 3],
    /// Output conv at the middle scale.
    pub out: (Tensor, Tensor),
}

impl RgIterP {
    pub fn spec(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
        let [c0, c1, c2] = cfg.c_bev;
        let ci = cfg.c_cam;
        let mut s = Vec::new();
        for (k, ck) in [c0, c1, c2].into_iter().enumerate() {
            s.push((format!("rgiter.occ{k}.w"), vec![3, 3, ck, 1], Init::Zeros));
            s.push((format!("rgiter.occ{k}.b"), vec![1], Init::Zeros));
        }
        for k in 0..2 {
            s.push((
                format!("rgiter.camdown{k}.w"),
                vec![3, 3, ci, ci],
                Init::He { fan_in: 9 * ci },
            ));
        }
        for (k, ck) in [c0, c1, c2].into_iter().enumerate() {
            s.extend(conv_spec(&format!("rgiter.fuse{k}"), 3, ck + ci, ck));
        }
        s.extend(conv_spec("rgiter.out", 3, c0 + c1 + c2, cfg.c_fb));
        s
    }

    pub fn bind(ctx: &mut Ctx, cfg: &Config) -> RgIterP {
        let ts = bind_list(ctx, &Self::spec(cfg));
        Self::from_slice(&ts)
    }

    pub const N_PARAMS: usize = 6 + 2 + 6 + 2;

    pub fn from_slice(ts: &[Tensor]) -> RgIterP {
        assert_eq!(ts.len(), Self::N_PARAMS);
        RgIterP {
            occ: [(ts[0], ts[1]), (ts[2], ts[3]), (ts[4], ts[5])],
            cam_down: [ts[6], ts[7]],
            fuse: [(ts[8], ts[9]), (ts[10], ts[11]), (ts[12], ts[13])],
            out: (ts[14], ts[15]),
        }
    }
}

pub struct RgIterOut {
    /// Fused map at the middle scale, `[my, mx, c_fb]`.
    pub f_b: Tensor,
    /// Occupancy weights per scale (sigmoid maps, 1 channel).
    pub w: [Tensor; 3],
    /// Gated camera maps per scale.
    pub f_prime: [Tensor; 3],
}

pub fn rgiter(tape: &mut Tape, p: &RgIterP, radar: &[Tensor; 3], cam_bev: Tensor) -> RgIterOut {
    let mut w_maps = Vec::with_capacity(3);
    let mut f_prime = Vec::with_capacity(3);
    let mut fused = Vec::with_capacity(3);
    let mut cam_k = cam_bev;
    for k in 0..3 {
        let occ = tape.conv2d(radar[k], p.occ[k].0, 1, 1);
        let occ = tape.add_chan_bias(occ, p.occ[k].1);
        let w_k = tape.sigmoid(occ);
        let fp = tape.mul_chan_broadcast(cam_k, w_k);
        let cat = tape.concat_chan(radar[k], fp);
        let fk = tape.conv2d(cat, p.fuse[k].0, 1, 1);
        let fk = tape.add_chan_bias(fk, p.fuse[k].1);
        fused.push(tape.relu(fk));
        w_maps.push(w_k);
        f_prime.push(fp);
        if k < 2 {
            cam_k = tape.conv2d(fp, p.cam_down[k], 2, 1);
        }
    }
    let down0 = tape.downsample2x(fused[0]);
    let up2 = tape.upsample2x(fused[2]);
    let cat = tape.concat_chan(down0, fused[1]);
    let cat = tape.concat_chan(cat, up2);
    let out = tape.conv2d(cat, p.out.0, 1, 1);
    // No activation on the output map: a rectifier here silences cells
    // (zero value *and* zero gradient), and sparse radar scenes leave
    // most object cells on the wrong side of it at init. The heads that
    // consume F_B apply their own nonlinearities.
    let f_b = tape.add_chan_bias(out, p.out.1);
    RgIterOut {
        f_b,
        w: [w_maps[0], w_maps[1], w_maps[2]],
        f_prime: [f_prime[0], f_prime[1], f_prime[2]],
    }
}

/// The plain-concatenation comparator: one stride-2 conv over
/// `[radar_bev0 ; cam_bev]` straight to the middle scale.
pub struct ConcatP {
    pub conv: (Tensor, Tensor),
}

impl ConcatP {
    pub fn spec(cfg: &Config) -> Vec<(String, Vec<usize>, Init)> {
        conv_spec("fusion.concat", 3, cfg.c_bev[0] + cfg.c_cam, cfg.c_fb)
    }

    pub fn bind(ctx: &mut Ctx, cfg: &Config) -> ConcatP {
        let ts = bind_list(ctx, &Self::spec(cfg));
        ConcatP {
            conv: (ts[0], ts[1]),
        }
    }
}

/// Build the fused BEV map for the configured mode. `radar` and
/// `cam_bev` are the full-path inputs; ablations substitute exact-zero
/// maps so every mode runs the same parameter set where it applies.
pub fn fuse_bev(
    ctx: &mut Ctx,
    cfg: &Config,
    radar: &[Tensor; 3],
    cam_bev: Tensor,
) -> RgIterOut {
    let dims = Dims::of(cfg);
    match cfg.fusion_mode {
        FusionMode::RgIter => {
            let p = RgIterP::bind(ctx, cfg);
            rgiter(ctx.tape, &p, radar, cam_bev)
        }
        FusionMode::RadarOnly => {
            let p = RgIterP::bind(ctx, cfg);
            let zero_cam = ctx.tape.zeros(&[dims.base.0, dims.base.1, cfg.c_cam]);
            rgiter(ctx.tape, &p, radar, zero_cam)
        }
        FusionMode::CameraOnly => {
            let p = RgIterP::bind(ctx, cfg);
            let shapes = [
                (dims.base, cfg.c_bev[0]),
                (dims.mid, cfg.c_bev[1]),
                (dims.coarse, cfg.c_bev[2]),
            ];
            let zr: Vec<Tensor> = shapes
                .iter()
                .map(|((h, w), c)| ctx.tape.zeros(&[*h, *w, *c]))
                .collect();
            rgiter(ctx.tape, &p, &[zr[0], zr[1], zr[2]], cam_bev)
        }
        FusionMode::Concat => {
            let p = ConcatP::bind(ctx, cfg);
            let cat = ctx.tape.concat_chan(radar[0], cam_bev);
            let y = ctx.tape.conv2d(cat, p.conv.0, 2, 1);
            // Linear output map, matching the iterated path above.
            let f_b = ctx.tape.add_chan_bias(y, p.conv.1);
            // No occupancy or gated maps in this mode; reuse the fused
            // map slot and leave the aux maps as zero-sized dummies.
            let dummy = ctx.tape.zeros(&[1, 1, 1]);
            RgIterOut {
                f_b,
                w: [dummy, dummy, dummy],
                f_prime: [dummy, dummy, dummy],
            }
        }
    }
}
