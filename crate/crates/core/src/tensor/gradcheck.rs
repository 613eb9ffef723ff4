//! Finite-difference validation of the backward pass.
//!
//! Every differentiable op has a case here: a small random input set and
//! a closure building a scalar loss on a fresh tape. The checker compares
//! reverse-mode gradients against central differences element by element
//! and reports the worst relative error
//!
//! ```text
//! rel = |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)
//! ```
//!
//! Losses are weighted sums with fixed random weights so that no gradient
//! component is structurally zero. Inputs are drawn away from the kinks
//! of non-smooth ops (relu at 0, interpolation at integer coordinates),
//! and seeds are fixed, so the suite is deterministic.

use rand::Rng;

use crate::tensor::{Array, Tape, Tensor};
use crate::util::rng::stream;

/// Threshold a healthy op must stay under.
pub const MAX_REL_ERR: f64 = 1e-4;

const DEFAULT_EPS: f64 = 1e-5;
const DEFAULT_PROBES: usize = 60;

type LossFn = Box<dyn Fn(&mut Tape, &[Tensor]) -> Tensor>;

pub struct Case {
    pub name: String,
    inputs: Vec<Array>,
    eps: f64,
    max_probes: usize,
    f: LossFn,
}

impl Case {
    pub fn new(
        name: &str,
        inputs: Vec<Array>,
        f: impl Fn(&mut Tape, &[Tensor]) -> Tensor + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            inputs,
            eps: DEFAULT_EPS,
            max_probes: DEFAULT_PROBES,
            f: Box::new(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

pub fn run_case(case: &Case) -> Report {
    run_case_inner(case, false)
}

/// Runs with the conv backward deliberately corrupted; the conv cases
/// must then FAIL, proving the checker can actually catch a wrong
/// gradient (negative control).
pub fn run_case_corrupted(case: &Case) -> Report {
    run_case_inner(case, true)
}

fn run_case_inner(case: &Case, corrupt: bool) -> Report {
    let mut tape = Tape::new();
    tape.set_backward_corruption(corrupt);
    let handles: Vec<Tensor> = case.inputs.iter().map(|a| tape.input(a.clone())).collect();
    let loss = (case.f)(&mut tape, &handles);
    assert_eq!(tape.value(loss).numel(), 1, "{}: loss must be scalar", case.name);
    let grads = tape.backward(loss);
    let ad: Vec<Vec<f64>> = handles
        .iter()
        .zip(&case.inputs)
        .map(|(h, a)| {
            grads
                .get(*h)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; a.numel()])
        })
        .collect();

    let mut max_rel: f64 = 0.0;
    let mut probes = 0;
    for (i, arr) in case.inputs.iter().enumerate() {
        let n = arr.numel();
        if n == 0 {
            continue;
        }
        let stride = (n / case.max_probes).max(1);
        let mut j = 0;
        while j < n {
            let fp = eval_perturbed(case, i, j, case.eps);
            let fm = eval_perturbed(case, i, j, -case.eps);
            let fd = (fp - fm) / (2.0 * case.eps);
            let g = ad[i][j];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            probes += 1;
            j += stride;
        }
    }
    Report {
        name: case.name.clone(),
        max_rel_err: max_rel,
        probes,
    }
}

fn eval_perturbed(case: &Case, input_idx: usize, elem: usize, delta: f64) -> f64 {
    let mut tape = Tape::new();
    let handles: Vec<Tensor> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut a = a.clone();
            if i == input_idx {
                a.data[elem] += delta;
            }
            tape.constant(a)
        })
        .collect();
    let loss = (case.f)(&mut tape, &handles);
    tape.value(loss).data[0]
}

/// Scalar loss: elementwise product with fixed weights, then total sum.
fn weighted_sum(tape: &mut Tape, x: Tensor, weights: &Array) -> Tensor {
    let w = tape.mul_const(x, weights.clone());
    tape.sum_all(w)
}

/// Random-weighted sum of `x` with weights derived from `tag` — the
/// standard scalarizer for module-level gradient checks.
pub fn weighted_loss(tape: &mut Tape, x: Tensor, tag: &str) -> Tensor {
    let shape = tape.shape(x).to_vec();
    let w = weights_for(&shape, tag);
    weighted_sum(tape, x, &w)
}

fn weights_for(shape: &[usize], tag: &str) -> Array {
    let mut rng = stream(91, tag);
    Array::randn(shape, 1.0, &mut rng)
}

/// Coordinates strictly inside cells (no integer u/v) spread over and
/// slightly beyond the map so out-of-bounds corners are exercised.
fn safe_coords(p: usize, h: usize, w: usize, tag: &str) -> Array {
    let mut rng = stream(17, tag);
    let mut data = Vec::with_capacity(p * 2);
    for i in 0..p {
        let span_u = (w as f64 + 1.0) * if i % 3 == 0 { 1.2 } else { 0.9 };
        let span_v = (h as f64 + 1.0) * if i % 4 == 0 { 1.2 } else { 0.9 };
        let cell_u = (rng.gen::<f64>() * span_u).floor() - 1.0;
        let cell_v = (rng.gen::<f64>() * span_v).floor() - 1.0;
        data.push(cell_u + 0.2 + 0.6 * rng.gen::<f64>());
        data.push(cell_v + 0.2 + 0.6 * rng.gen::<f64>());
    }
    Array::new(vec![p, 2], data)
}

/// One case per tape op (plus stride/padding variants where relevant).
pub fn op_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    let mut rng = stream(5, "gradcheck-op-inputs");

    let a34 = Array::randn(&[3, 4], 1.0, &mut rng);
    let b34 = Array::randn(&[3, 4], 1.0, &mut rng);

    cases.push(Case::new("add", vec![a34.clone(), b34.clone()], |t, h| {
        let y = t.add(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[3, 4], "add"))
    }));
    cases.push(Case::new("sub", vec![a34.clone(), b34.clone()], |t, h| {
        let y = t.sub(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[3, 4], "sub"))
    }));
    cases.push(Case::new("scale", vec![a34.clone()], |t, h| {
        let y = t.scale(h[0], -1.7);
        weighted_sum(t, y, &weights_for(&[3, 4], "scale"))
    }));
    cases.push(Case::new("add_scalar", vec![a34.clone()], |t, h| {
        let y = t.add_scalar(h[0], 0.3);
        weighted_sum(t, y, &weights_for(&[3, 4], "add_scalar"))
    }));
    cases.push(Case::new("mul", vec![a34.clone(), b34.clone()], |t, h| {
        let y = t.mul(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[3, 4], "mul"))
    }));

    let map443 = Array::randn(&[4, 4, 3], 1.0, &mut rng);
    let w441 = Array::randn(&[4, 4, 1], 1.0, &mut rng);
    cases.push(Case::new(
        "mul_chan_broadcast",
        vec![map443.clone(), w441],
        |t, h| {
            let y = t.mul_chan_broadcast(h[0], h[1]);
            weighted_sum(t, y, &weights_for(&[4, 4, 3], "mul_chan_broadcast"))
        },
    ));

    let rows53 = Array::randn(&[5, 3], 1.0, &mut rng);
    let scal5 = Array::randn(&[5], 1.0, &mut rng);
    cases.push(Case::new("mul_rows", vec![rows53.clone(), scal5], |t, h| {
        let y = t.mul_rows(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[5, 3], "mul_rows"))
    }));
    cases.push(Case::new("mul_const", vec![a34.clone()], |t, h| {
        let y = t.mul_const(h[0], weights_for(&[3, 4], "mul_const-coeff"));
        weighted_sum(t, y, &weights_for(&[3, 4], "mul_const"))
    }));

    let m23 = Array::randn(&[2, 3], 1.0, &mut rng);
    let m34 = Array::randn(&[3, 4], 1.0, &mut rng);
    cases.push(Case::new("matmul", vec![m23, m34], |t, h| {
        let y = t.matmul(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[2, 4], "matmul"))
    }));
    cases.push(Case::new("transpose", vec![a34.clone()], |t, h| {
        let y = t.transpose(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 3], "transpose"))
    }));

    let img663 = Array::randn(&[6, 6, 3], 1.0, &mut rng);
    let ker3324 = Array::randn(&[3, 3, 3, 4], 0.5, &mut rng);
    cases.push(Case::new(
        "conv2d_s1",
        vec![img663.clone(), ker3324.clone()],
        |t, h| {
            let y = t.conv2d(h[0], h[1], 1, 1);
            weighted_sum(t, y, &weights_for(&[6, 6, 4], "conv2d_s1"))
        },
    ));
    cases.push(Case::new(
        "conv2d_s2",
        vec![img663.clone(), ker3324.clone()],
        |t, h| {
            let y = t.conv2d(h[0], h[1], 2, 1);
            weighted_sum(t, y, &weights_for(&[3, 3, 4], "conv2d_s2"))
        },
    ));
    let ker1134 = Array::randn(&[1, 1, 3, 4], 0.5, &mut rng);
    cases.push(Case::new("conv2d_1x1", vec![img663.clone(), ker1134], |t, h| {
        let y = t.conv2d(h[0], h[1], 1, 0);
        weighted_sum(t, y, &weights_for(&[6, 6, 4], "conv2d_1x1"))
    }));

    let bias3 = Array::randn(&[3], 1.0, &mut rng);
    cases.push(Case::new(
        "add_chan_bias",
        vec![map443.clone(), bias3.clone()],
        |t, h| {
            let y = t.add_chan_bias(h[0], h[1]);
            weighted_sum(t, y, &weights_for(&[4, 4, 3], "add_chan_bias"))
        },
    ));
    cases.push(Case::new(
        "add_row_bias",
        vec![rows53.clone(), bias3.clone()],
        |t, h| {
            let y = t.add_row_bias(h[0], h[1]);
            weighted_sum(t, y, &weights_for(&[5, 3], "add_row_bias"))
        },
    ));
    cases.push(Case::new(
        "mul_cols_broadcast",
        vec![rows53.clone(), bias3.clone()],
        |t, h| {
            let y = t.mul_cols_broadcast(h[0], h[1]);
            weighted_sum(t, y, &weights_for(&[5, 3], "mul_cols_broadcast"))
        },
    ));

    // Activations. Keep relu inputs away from the kink.
    let mut relu_in = Array::randn(&[4, 5], 1.0, &mut rng);
    for v in relu_in.data.iter_mut() {
        if v.abs() < 0.05 {
            *v += 0.1 * v.signum().max(0.5);
        }
    }
    cases.push(Case::new("relu", vec![relu_in], |t, h| {
        let y = t.relu(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "relu"))
    }));
    let act45 = Array::randn(&[4, 5], 1.0, &mut rng);
    cases.push(Case::new("sigmoid", vec![act45.clone()], |t, h| {
        let y = t.sigmoid(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "sigmoid"))
    }));
    cases.push(Case::new("exp", vec![act45.clone()], |t, h| {
        let y = t.exp(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "exp"))
    }));
    let pos45 = Array::uniform(&[4, 5], 0.5, 2.5, &mut rng);
    cases.push(Case::new("ln", vec![pos45], |t, h| {
        let y = t.ln(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "ln"))
    }));
    cases.push(Case::new("sin", vec![act45.clone()], |t, h| {
        let y = t.sin(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "sin"))
    }));
    cases.push(Case::new("cos", vec![act45.clone()], |t, h| {
        let y = t.cos(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "cos"))
    }));
    cases.push(Case::new("softmax_rows", vec![act45.clone()], |t, h| {
        let y = t.softmax_rows(h[0]);
        weighted_sum(t, y, &weights_for(&[4, 5], "softmax_rows"))
    }));

    cases.push(Case::new("sum_all", vec![a34.clone()], |t, h| t.sum_all(h[0])));
    cases.push(Case::new("mean_all", vec![a34.clone()], |t, h| {
        t.mean_all(h[0])
    }));
    let grp63 = Array::randn(&[6, 3], 1.0, &mut rng);
    cases.push(Case::new("sum_group_rows", vec![grp63], |t, h| {
        let y = t.sum_group_rows(h[0], 3);
        weighted_sum(t, y, &weights_for(&[2, 3], "sum_group_rows"))
    }));

    let c42 = Array::randn(&[4, 2], 1.0, &mut rng);
    let c43 = Array::randn(&[4, 3], 1.0, &mut rng);
    cases.push(Case::new("concat_cols", vec![c42.clone(), c43.clone()], |t, h| {
        let y = t.concat_cols(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[4, 5], "concat_cols"))
    }));
    let r23 = Array::randn(&[2, 3], 1.0, &mut rng);
    let r43 = Array::randn(&[4, 3], 1.0, &mut rng);
    cases.push(Case::new("concat_rows", vec![r23, r43], |t, h| {
        let y = t.concat_rows(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[6, 3], "concat_rows"))
    }));
    let hw2 = Array::randn(&[3, 4, 2], 1.0, &mut rng);
    let hw3 = Array::randn(&[3, 4, 3], 1.0, &mut rng);
    cases.push(Case::new("concat_chan", vec![hw2, hw3], |t, h| {
        let y = t.concat_chan(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[3, 4, 5], "concat_chan"))
    }));
    let s46 = Array::randn(&[4, 6], 1.0, &mut rng);
    cases.push(Case::new("slice_cols", vec![s46], |t, h| {
        let y = t.slice_cols(h[0], 2, 3);
        weighted_sum(t, y, &weights_for(&[4, 3], "slice_cols"))
    }));
    cases.push(Case::new("reshape", vec![a34.clone()], |t, h| {
        let y = t.reshape(h[0], &[2, 6]);
        weighted_sum(t, y, &weights_for(&[2, 6], "reshape"))
    }));
    let g53 = Array::randn(&[5, 3], 1.0, &mut rng);
    cases.push(Case::new("gather_rows", vec![g53.clone()], |t, h| {
        let y = t.gather_rows(h[0], vec![4, 0, 2, 0]);
        weighted_sum(t, y, &weights_for(&[4, 3], "gather_rows"))
    }));
    let sc33 = Array::randn(&[3, 3], 1.0, &mut rng);
    cases.push(Case::new("scatter_rows", vec![sc33], |t, h| {
        let y = t.scatter_rows(h[0], vec![5, 1, 3], 6);
        weighted_sum(t, y, &weights_for(&[6, 3], "scatter_rows"))
    }));

    let map562 = Array::randn(&[5, 6, 2], 1.0, &mut rng);
    let coords = safe_coords(7, 5, 6, "bilinear_sample-coords");
    cases.push(Case::new(
        "bilinear_sample",
        vec![map562.clone(), coords.clone()],
        |t, h| {
            let y = t.bilinear_sample(h[0], h[1]);
            weighted_sum(t, y, &weights_for(&[7, 2], "bilinear_sample"))
        },
    ));
    let vals72 = Array::randn(&[7, 2], 1.0, &mut rng);
    cases.push(Case::new("bilinear_splat", vec![vals72], move |t, h| {
        let pts: Vec<(f64, f64)> = coords
            .data
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect();
        let y = t.bilinear_splat(h[0], pts, 5, 6);
        weighted_sum(t, y, &weights_for(&[5, 6, 2], "bilinear_splat"))
    }));

    let map442 = Array::randn(&[4, 4, 2], 1.0, &mut rng);
    cases.push(Case::new("upsample2x", vec![map442.clone()], |t, h| {
        let y = t.upsample2x(h[0]);
        weighted_sum(t, y, &weights_for(&[8, 8, 2], "upsample2x"))
    }));
    cases.push(Case::new("downsample2x", vec![map442.clone()], |t, h| {
        let y = t.downsample2x(h[0]);
        weighted_sum(t, y, &weights_for(&[2, 2, 2], "downsample2x"))
    }));
    cases.push(Case::new("maxpool2", vec![map442.clone()], |t, h| {
        let y = t.maxpool2(h[0]);
        weighted_sum(t, y, &weights_for(&[2, 2, 2], "maxpool2"))
    }));
    cases.push(Case::new("rows_max_pool", vec![g53.clone()], |t, h| {
        let groups = vec![vec![0, 2, 4], vec![1, 3], vec![], vec![0, 1, 2, 3, 4]];
        let y = t.rows_max_pool(h[0], &groups);
        weighted_sum(t, y, &weights_for(&[4, 3], "rows_max_pool"))
    }));

    let prob34 = Array::randn(&[3, 4], 0.6, &mut rng);
    let feat32 = Array::randn(&[3, 2], 1.0, &mut rng);
    cases.push(Case::new("depth_outer", vec![prob34, feat32], |t, h| {
        let y = t.depth_outer(h[0], h[1]);
        weighted_sum(t, y, &weights_for(&[12, 2], "depth_outer"))
    }));

    let logits = Array::randn(&[4, 3], 1.5, &mut rng);
    cases.push(Case::new("bce_logits", vec![logits], |t, h| {
        let mut trng = stream(23, "bce-targets");
        let targets = Array::new(
            vec![4, 3],
            (0..12).map(|_| if trng.gen::<bool>() { 1.0 } else { 0.0 }).collect(),
        );
        let y = t.bce_logits(h[0], targets);
        weighted_sum(t, y, &weights_for(&[4, 3], "bce_logits"))
    }));
    // Keep |pred − target| away from the huber transition at beta.
    let mut sl_pred = Array::randn(&[4, 3], 1.0, &mut rng);
    let sl_beta = 1.0 / 9.0;
    for v in sl_pred.data.iter_mut() {
        if (v.abs() - sl_beta).abs() < 0.02 {
            *v += 0.05;
        }
    }
    cases.push(Case::new("smooth_l1", vec![sl_pred], move |t, h| {
        let targets = Array::zeros(&[4, 3]);
        let y = t.smooth_l1(h[0], targets, sl_beta);
        weighted_sum(t, y, &weights_for(&[4, 3], "smooth_l1"))
    }));

    let ln46 = Array::randn(&[4, 6], 1.0, &mut rng);
    cases.push(Case::new("layer_norm_rows", vec![ln46], |t, h| {
        let y = t.layer_norm_rows(h[0], 1e-5);
        weighted_sum(t, y, &weights_for(&[4, 6], "layer_norm_rows"))
    }));

    // Composite: a small conv → pool → sample → linear chain, closest to
    // how ops are actually stacked in the model.
    let img883 = Array::randn(&[8, 8, 3], 1.0, &mut rng);
    let kc = Array::randn(&[3, 3, 3, 4], 0.4, &mut rng);
    let lin = Array::randn(&[4, 2], 0.7, &mut rng);
    let pts = safe_coords(5, 4, 4, "composite-coords");
    cases.push(Case::new(
        "composite_chain",
        vec![img883, kc, lin, pts],
        |t, h| {
            let c = t.conv2d(h[0], h[1], 1, 1);
            let c = t.relu(c);
            let p = t.maxpool2(c);
            let s = t.bilinear_sample(p, h[3]);
            let y = t.matmul(s, h[2]);
            let y = t.sigmoid(y);
            weighted_sum(t, y, &weights_for(&[5, 2], "composite_chain"))
        },
    ));

    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_case_passes() {
        for case in op_cases() {
            let r = run_case(&case);
            assert!(
                r.passed(),
                "gradient check failed for {}: max rel err {:.3e} over {} probes",
                r.name,
                r.max_rel_err,
                r.probes
            );
        }
    }

    #[test]
    fn corrupted_conv_backward_is_caught() {
        let cases = op_cases();
        let conv = cases.iter().find(|c| c.name == "conv2d_s1").unwrap();
        let r = run_case_corrupted(conv);
        assert!(
            !r.passed(),
            "corrupted conv gradients slipped past the checker (max rel err {:.3e})",
            r.max_rel_err
        );
    }
}
