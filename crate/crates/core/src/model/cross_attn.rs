//! Deformable cross-modality attention.
//!
//! For each query row with a reference point on some feature map, the
//! block samples the map at K learned offsets per head, weights the
//! samples with a per-head softmax, projects through per-head value and
//! output matrices, and sums over heads:
//!
//! `f*ₚ = Σₘ Wₘ [ Σₖ Aₘₚₖ · W'ₘ · map(rₚ + Δrₘₚₖ) ]`
//!
//! Offsets and attention logits are linear in the query. The offset head
//! is zero-initialized, so an untrained block samples exactly at the
//! reference points. A reference far outside the map yields zero through
//! the value path (all bilinear corners out of bounds). The paired
//! fusion MLP mixes the attended features back into the query.

use crate::model::backbone::bind_list;
use crate::model::{Ctx, Init};
use crate::tensor::{Array, Tape, Tensor};

#[derive(Copy, Clone, Debug)]
pub struct CmdaDims {
    /// Query channels.
    pub cq: usize,
    /// Channels of the sampled map.
    pub cmap: usize,
    /// Output channels of the attention block.
    pub cout: usize,
    /// Per-head value channels.
    pub ch: usize,
    /// Heads (M) and samples per head (K).
    pub m: usize,
    pub k: usize,
    /// Output channels of the fusion MLP.
    pub cfused: usize,
}

impl CmdaDims {
    pub fn new(cq: usize, cmap: usize, cout: usize, m: usize, k: usize, cfused: usize) -> Self {
        assert!(m >= 1 && k >= 1);
        CmdaDims {
            cq,
            cmap,
            cout,
            ch: (cout / m).max(1),
            m,
            k,
            cfused,
        }
    }
}

/// Parameters of one attention block (heads share nothing).
pub struct CmdaP {
    /// `[cq, m·k·2]` / `[m·k·2]` — zero-initialized.
    pub off_w: Tensor,
    pub off_b: Tensor,
    /// `[cq, m·k]` / `[m·k]`.
    pub att_w: Tensor,
    pub att_b: Tensor,
    /// Per head: value projection `[cmap, ch]`, bias-free.
    pub val_w: Vec<Tensor>,
    /// Per head: output projection `[ch, cout]`, bias-free.
    pub out_w: Vec<Tensor>,
}

impl CmdaP {
    pub fn spec(prefix: &str, d: &CmdaDims) -> Vec<(String, Vec<usize>, Init)> {
        let mk = d.m * d.k;
        let mut s = vec![
            (format!("{prefix}.off.w"), vec![d.cq, mk * 2], Init::Zeros),
            (format!("{prefix}.off.b"), vec![mk * 2], Init::Zeros),
            (
                format!("{prefix}.att.w"),
                vec![d.cq, mk],
                Init::Lecun { fan_in: d.cq },
            ),
            (format!("{prefix}.att.b"), vec![mk], Init::Zeros),
        ];
        for m in 0..d.m {
            s.push((
                format!("{prefix}.val{m}.w"),
                vec![d.cmap, d.ch],
                Init::Lecun { fan_in: d.cmap },
            ));
        }
        for m in 0..d.m {
            s.push((
                format!("{prefix}.out{m}.w"),
                vec![d.ch, d.cout],
                Init::Lecun { fan_in: d.ch },
            ));
        }
        s
    }

    pub fn bind(ctx: &mut Ctx, prefix: &str, d: &CmdaDims) -> CmdaP {
        let ts = bind_list(ctx, &Self::spec(prefix, d));
        Self::from_slice(&ts, d)
    }

    pub fn n_params(d: &CmdaDims) -> usize {
        4 + 2 * d.m
    }

    pub fn from_slice(ts: &[Tensor], d: &CmdaDims) -> CmdaP {
        assert_eq!(ts.len(), Self::n_params(d));
        CmdaP {
            off_w: ts[0],
            off_b: ts[1],
            att_w: ts[2],
            att_b: ts[3],
            val_w: ts[4..4 + d.m].to_vec(),
            out_w: ts[4 + d.m..4 + 2 * d.m].to_vec(),
        }
    }
}

/// The attention block. `refs` are fixed map coordinates, one per query
/// row (a sentinel far outside the map makes that row's output zero).
/// Also returns the per-head attention weights `[N·M, K]` (rows sum to 1).
pub fn cmda(
    tape: &mut Tape,
    p: &CmdaP,
    d: &CmdaDims,
    queries: Tensor,
    refs: &Array,
    map: Tensor,
) -> (Tensor, Tensor) {
    let n = tape.shape(queries)[0];
    assert_eq!(tape.shape(queries), &[n, d.cq], "cmda: query shape");
    assert_eq!(refs.shape, &[n, 2], "cmda: refs must be [N,2]");
    assert_eq!(tape.shape(map)[2], d.cmap, "cmda: map channels");
    let mk = d.m * d.k;

    let off = tape.matmul(queries, p.off_w);
    let off = tape.add_row_bias(off, p.off_b);
    let logits = tape.matmul(queries, p.att_w);
    let logits = tape.add_row_bias(logits, p.att_b);
    let per_head = tape.reshape(logits, &[n * d.m, d.k]);
    let attn = tape.softmax_rows(per_head);
    let attn_cols = tape.reshape(attn, &[n, mk]);

    let refs_t = tape.constant(refs.clone());
    let mut total: Option<Tensor> = None;
    for m in 0..d.m {
        let mut head_sum: Option<Tensor> = None;
        for k in 0..d.k {
            let idx = m * d.k + k;
            let delta = tape.slice_cols(off, idx * 2, 2);
            let pos = tape.add(refs_t, delta);
            let sampled = tape.bilinear_sample(map, pos);
            let val = tape.matmul(sampled, p.val_w[m]);
            let a = tape.slice_cols(attn_cols, idx, 1);
            let weighted = tape.mul_rows(val, a);
            head_sum = Some(match head_sum {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
        }
        let head_out = tape.matmul(head_sum.unwrap(), p.out_w[m]);
        total = Some(match total {
            Some(acc) => tape.add(acc, head_out),
            None => head_out,
        });
    }
    (total.unwrap(), attn)
}

/// Fusion MLP: `fused = W₂ relu(W₁ [query ; attended] + b₁) + b₂`.
pub struct FuseP {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FuseP {
    pub fn spec(prefix: &str, d: &CmdaDims) -> Vec<(String, Vec<usize>, Init)> {
        let cin = d.cq + d.cout;
        vec![
            (
                format!("{prefix}.fuse1.w"),
                vec![cin, cin],
                Init::He { fan_in: cin },
            ),
            (format!("{prefix}.fuse1.b"), vec![cin], Init::Zeros),
            (
                format!("{prefix}.fuse2.w"),
                vec![cin, d.cfused],
                Init::Lecun { fan_in: cin },
            ),
            (format!("{prefix}.fuse2.b"), vec![d.cfused], Init::Zeros),
        ]
    }

    pub fn bind(ctx: &mut Ctx, prefix: &str, d: &CmdaDims) -> FuseP {
        let ts = bind_list(ctx, &Self::spec(prefix, d));
        Self::from_slice(&ts)
    }

    pub fn from_slice(ts: &[Tensor]) -> FuseP {
        assert_eq!(ts.len(), 4);
        FuseP {
            w1: ts[0],
            b1: ts[1],
            w2: ts[2],
            b2: ts[3],
        }
    }
}

pub fn fuse_mlp(tape: &mut Tape, p: &FuseP, queries: Tensor, attended: Tensor) -> Tensor {
    let x = tape.concat_cols(queries, attended);
    let h = tape.matmul(x, p.w1);
    let h = tape.add_row_bias(h, p.b1);
    let h = tape.relu(h);
    let y = tape.matmul(h, p.w2);
    tape.add_row_bias(y, p.b2)
}

/// Attention + fusion MLP, the unit reused by the point branch and (twice)
/// by the grid branch.
pub struct CmdaFusionP {
    pub att: CmdaP,
    pub fuse: FuseP,
}

impl CmdaFusionP {
    pub fn spec(prefix: &str, d: &CmdaDims) -> Vec<(String, Vec<usize>, Init)> {
        let mut s = CmdaP::spec(prefix, d);
        s.extend(FuseP::spec(prefix, d));
        s
    }

    pub fn bind(ctx: &mut Ctx, prefix: &str, d: &CmdaDims) -> CmdaFusionP {
        let ts = bind_list(ctx, &Self::spec(prefix, d));
        Self::from_slice(&ts, d)
    }

    pub fn n_params(d: &CmdaDims) -> usize {
        CmdaP::n_params(d) + 4
    }

    pub fn from_slice(ts: &[Tensor], d: &CmdaDims) -> CmdaFusionP {
        let na = CmdaP::n_params(d);
        assert_eq!(ts.len(), na + 4);
        CmdaFusionP {
            att: CmdaP::from_slice(&ts[..na], d),
            fuse: FuseP::from_slice(&ts[na..]),
        }
    }
}

pub fn cmda_fusion(
    tape: &mut Tape,
    p: &CmdaFusionP,
    d: &CmdaDims,
    queries: Tensor,
    refs: &Array,
    map: Tensor,
) -> Tensor {
    let (attended, _) = cmda(tape, &p.att, d, queries, refs, map);
    fuse_mlp(tape, &p.fuse, queries, attended)
}

/// Reference sentinel for rows that must not read the map (e.g. a point
/// behind the camera): far enough out that no learnable offset reaches
/// back inside, so every bilinear corner is out of bounds and the value
/// path contributes exactly zero.
pub const OFF_MAP: (f64, f64) = (-1.0e9, -1.0e9);
