//! The two-stage detector.
//!
//! Model code is written in two layers. Functional cores are pure
//! functions of tensors (`fn …(tape, params, inputs…) -> Tensor`), which
//! makes them directly checkable against finite differences. On top of
//! that, thin binding structs (`…P::bind`) pull named parameters out of
//! a [`ParamStore`] onto the current tape through [`Ctx`].

pub mod backbone;
pub mod cross_attn;
pub mod detector;
pub mod fusion;
pub mod gradcases;
pub mod rpn;
pub mod stage2;
pub mod train;

use std::collections::HashMap;

use rand::Rng;

use crate::config::Config;
use crate::tensor::{Array, Gradients, ParamStore, Tape, Tensor};
use crate::util::rng::stream;

/// Weight initialization schemes.
#[derive(Copy, Clone, Debug)]
pub enum Init {
    Zeros,
    /// Every element set to the same value (e.g. a bias prior).
    Const(f64),
    /// Scaled normal, std = sqrt(2 / fan_in) — for ReLU-followed layers.
    He { fan_in: usize },
    /// Scaled normal, std = sqrt(1 / fan_in) — for linear outputs.
    Lecun { fan_in: usize },
}

impl Init {
    pub fn build(self, shape: &[usize], rng: &mut impl Rng) -> Array {
        match self {
            Init::Zeros => Array::zeros(shape),
            Init::Const(c) => Array::full(shape, c),
            Init::He { fan_in } => Array::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Lecun { fan_in } => Array::randn(shape, (1.0 / fan_in as f64).sqrt(), rng),
        }
    }
}

/// Binds store parameters onto a tape, at most once per parameter, and
/// maps gradients back to store slots after the backward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    bound: HashMap<usize, Tensor>,
    init_seed: u64,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, init_seed: u64) -> Self {
        Ctx {
            tape,
            store,
            bound: HashMap::new(),
            init_seed,
        }
    }

    /// Fetch (or lazily initialize) a named parameter and bind it onto
    /// the tape as a differentiable leaf.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Tensor {
        let seed = self.init_seed;
        let slot = self.store.get_or_init(name, || {
            let mut rng = stream(seed, &format!("init/{name}"));
            init.build(shape, &mut rng)
        });
        if let Some(&t) = self.bound.get(&slot) {
            return t;
        }
        let value = self.store.value(slot).clone();
        assert_eq!(
            value.shape, shape,
            "parameter {name} bound with mismatched shape"
        );
        let t = self.tape.input(value);
        self.bound.insert(slot, t);
        t
    }

    /// (slot, gradient) pairs for every bound parameter that received one.
    pub fn collect_grads(&self, g: &Gradients) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(&slot, &t)| g.get(t).map(|gr| (slot, gr.to_vec())))
            .collect();
        out.sort_by_key(|(slot, _)| *slot);
        out
    }
}

/// Derived map extents, all as (rows, cols).
#[derive(Copy, Clone, Debug)]
pub struct Dims {
    /// Base BEV (k=0): rows over y, cols over x.
    pub base: (usize, usize),
    /// k=1 scale, where the fused map and the RPN live.
    pub mid: (usize, usize),
    /// k=2 scale.
    pub coarse: (usize, usize),
    /// Camera feature volume (¼ image resolution).
    pub fv: (usize, usize),
    /// Input image.
    pub img: (usize, usize),
}

impl Dims {
    pub fn of(cfg: &Config) -> Dims {
        let base_grid = cfg.base_bev_grid();
        let (by, bx) = (base_grid.ny(), base_grid.nx());
        let (ih, iw) = (cfg.synth.image_height, cfg.synth.image_width);
        Dims {
            base: (by, bx),
            mid: (by / 2, bx / 2),
            coarse: (by / 4, bx / 4),
            fv: (ih / 4, iw / 4),
            img: (ih, iw),
        }
    }
}

// ── layer helpers ──────────────────────────────────────────────────────

/// 2D conv + channel bias (+ optional ReLU). Kernel He-initialized,
/// bias zero-initialized.
pub fn conv_block(
    ctx: &mut Ctx,
    name: &str,
    x: Tensor,
    (cin, cout): (usize, usize),
    k: usize,
    stride: usize,
    relu: bool,
) -> Tensor {
    let w = ctx.param(
        &format!("{name}.w"),
        &[k, k, cin, cout],
        Init::He { fan_in: k * k * cin },
    );
    let b = ctx.param(&format!("{name}.b"), &[cout], Init::Zeros);
    let y = ctx.tape.conv2d(x, w, stride, k / 2);
    let y = ctx.tape.add_chan_bias(y, b);
    if relu {
        ctx.tape.relu(y)
    } else {
        y
    }
}

/// Bias-free conv (for paths that must map zero inputs to zero outputs).
pub fn conv_nobias(
    ctx: &mut Ctx,
    name: &str,
    x: Tensor,
    (cin, cout): (usize, usize),
    k: usize,
    stride: usize,
    init: Init,
) -> Tensor {
    let w = ctx.param(&format!("{name}.w"), &[k, k, cin, cout], init);
    ctx.tape.conv2d(x, w, stride, k / 2)
}

/// Row-wise linear layer `[N,cin] -> [N,cout]` with bias.
pub fn linear(ctx: &mut Ctx, name: &str, x: Tensor, (cin, cout): (usize, usize)) -> Tensor {
    let w = ctx.param(
        &format!("{name}.w"),
        &[cin, cout],
        Init::Lecun { fan_in: cin },
    );
    let b = ctx.param(&format!("{name}.b"), &[cout], Init::Zeros);
    let y = ctx.tape.matmul(x, w);
    ctx.tape.add_row_bias(y, b)
}

/// Bias-free linear layer.
pub fn linear_nobias(
    ctx: &mut Ctx,
    name: &str,
    x: Tensor,
    (cin, cout): (usize, usize),
    init: Init,
) -> Tensor {
    let w = ctx.param(&format!("{name}.w"), &[cin, cout], init);
    ctx.tape.matmul(x, w)
}

/// Two-layer MLP with ReLU in between.
pub fn mlp2(
    ctx: &mut Ctx,
    name: &str,
    x: Tensor,
    (cin, hidden, cout): (usize, usize, usize),
) -> Tensor {
    let w1 = ctx.param(
        &format!("{name}.l1.w"),
        &[cin, hidden],
        Init::He { fan_in: cin },
    );
    let b1 = ctx.param(&format!("{name}.l1.b"), &[hidden], Init::Zeros);
    let h = ctx.tape.matmul(x, w1);
    let h = ctx.tape.add_row_bias(h, b1);
    let h = ctx.tape.relu(h);
    linear(ctx, &format!("{name}.l2"), h, (hidden, cout))
}
