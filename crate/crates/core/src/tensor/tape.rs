//! Reverse-mode gradient tape.
//!
//! The tape owns every intermediate value of one forward pass. Ops append
//! nodes and return lightweight [`Tensor`] handles; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients additively.
//!
//! Values are immutable once produced. A tape is confined to a single
//! training step on a single thread; parallelism happens across scenes,
//! each with its own tape.
//!
//! Every op validates shapes and checks its output for NaN/Inf, panicking
//! with the op name rather than letting bad values propagate.

use std::sync::Arc;

use super::array::Array;
use super::kernels::{
    col2im_block, conv_out_extent, im2col_block, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc,
};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Mul(usize, usize),
    /// `[H,W,C] ⊙ [H,W,1]`, the only permitted map broadcast.
    MulChanBroadcast {
        map: usize,
        weight: usize,
    },
    /// `[N,C]` rows scaled by `[N]` scalars.
    MulRows {
        values: usize,
        scalars: usize,
    },
    MulConst {
        input: usize,
        coeff: Arc<Array>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// `[H,W,C] + [C]`
    AddChanBias {
        map: usize,
        bias: usize,
    },
    /// `[N,C] + [C]`
    AddRowBias {
        mat: usize,
        bias: usize,
    },
    /// `[N,C] ⊙ [C]`
    MulColsBroadcast {
        mat: usize,
        scale: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    /// `[G*K, C] -> [G, C]` summing K consecutive rows.
    SumGroupRows {
        input: usize,
        group: usize,
    },
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    ConcatChan(usize, usize),
    SliceCols {
        input: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    GatherRows {
        input: usize,
        idx: Arc<Vec<usize>>,
    },
    /// Rows placed at `idx` in a `[rows, C]` zero matrix; `idx` must be unique.
    ScatterRows {
        input: usize,
        idx: Arc<Vec<usize>>,
    },
    BilinearSample {
        map: usize,
        coords: usize,
    },
    BilinearSplat {
        values: usize,
        coords: Arc<Vec<(f64, f64)>>,
    },
    Upsample2x(usize),
    Downsample2x(usize),
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    RowsMaxPool {
        input: usize,
        arg: Vec<i64>,
    },
    /// `[P,D] ⊗ [P,C] -> [P*D, C]`
    DepthOuter {
        prob: usize,
        feat: usize,
    },
    BceLogits {
        logits: usize,
        targets: Arc<Array>,
    },
    SmoothL1 {
        pred: usize,
        targets: Arc<Array>,
        beta: f64,
    },
    LayerNormRows {
        input: usize,
        eps: f64,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    /// Test hook: deliberately corrupt conv2d input gradients so the
    /// finite-difference checker reports a failure (negative control).
    corrupt_conv_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt_conv_backward: false,
        }
    }

    pub fn set_backward_corruption(&mut self, on: bool) {
        self.corrupt_conv_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].value.shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Leaf with gradient tracking.
    pub fn input(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        self.constant(Array::zeros(shape))
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Tensor {
        assert!(
            value.is_finite(),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Array::new(va.shape.clone(), data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::Add(a.id, b.id), rg)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert_eq!(va.shape, vb.shape, "sub: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Array::new(va.shape.clone(), data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::Sub(a.id, b.id), rg)
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a * c).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Scale(x.id, c), rg)
    }

    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a + c).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::AddScalar(x.id), rg)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert_eq!(va.shape, vb.shape, "mul: shape mismatch (broadcast is only allowed along the channel axis, see mul_chan_broadcast)");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Array::new(va.shape.clone(), data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::Mul(a.id, b.id), rg)
    }

    /// `[H,W,C] ⊙ [H,W,1]` with the single-channel map broadcast over C.
    pub fn mul_chan_broadcast(&mut self, map: Tensor, weight: Tensor) -> Tensor {
        let (vm, vw) = (&self.nodes[map.id].value, &self.nodes[weight.id].value);
        let (h, w, c) = vm.dims3();
        let (wh, ww, wc) = vw.dims3();
        assert!(
            wh == h && ww == w && wc == 1,
            "mul_chan_broadcast: weight must be [H,W,1] matching map [{h},{w},{c}], got {:?}",
            vw.shape
        );
        let mut data = vec![0.0; vm.numel()];
        for p in 0..h * w {
            let s = vw.data[p];
            for ch in 0..c {
                data[p * c + ch] = vm.data[p * c + ch] * s;
            }
        }
        let value = Array::new(vm.shape.clone(), data);
        let rg = self.any_grad(&[map.id, weight.id]);
        self.push(
            value,
            Op::MulChanBroadcast {
                map: map.id,
                weight: weight.id,
            },
            rg,
        )
    }

    /// `[N,C]` rows each scaled by the matching entry of `[N]`.
    pub fn mul_rows(&mut self, values: Tensor, scalars: Tensor) -> Tensor {
        let (vv, vs) = (&self.nodes[values.id].value, &self.nodes[scalars.id].value);
        let (n, c) = vv.dims2();
        assert_eq!(vs.numel(), n, "mul_rows: scalar count must equal row count");
        let mut data = vec![0.0; vv.numel()];
        for i in 0..n {
            let s = vs.data[i];
            for j in 0..c {
                data[i * c + j] = vv.data[i * c + j] * s;
            }
        }
        let value = Array::new(vv.shape.clone(), data);
        let rg = self.any_grad(&[values.id, scalars.id]);
        self.push(
            value,
            Op::MulRows {
                values: values.id,
                scalars: scalars.id,
            },
            rg,
        )
    }

    /// Elementwise product with a fixed coefficient array (masks, loss weights).
    pub fn mul_const(&mut self, x: Tensor, coeff: Array) -> Tensor {
        let v = &self.nodes[x.id].value;
        assert_eq!(v.shape, coeff.shape, "mul_const: shape mismatch");
        let data = v.data.iter().zip(&coeff.data).map(|(a, b)| a * b).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(
            value,
            Op::MulConst {
                input: x.id,
                coeff: Arc::new(coeff),
            },
            rg,
        )
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        matmul_acc(&va.data, &vb.data, &mut data, m, k, n);
        let value = Array::new(vec![m, n], data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::MatMul { a: a.id, b: b.id }, rg)
    }

    pub fn transpose(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (m, n) = v.dims2();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data[i * n + j];
            }
        }
        let value = Array::new(vec![n, m], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Transpose(x.id), rg)
    }

    /// 2D convolution, channels-last. Input `[H,W,Cin]`, kernel
    /// `[kh,kw,Cin,Cout]`, zero padding. No bias; compose with
    /// [`Tape::add_chan_bias`].
    pub fn conv2d(&mut self, input: Tensor, kernel: Tensor, stride: usize, padding: usize) -> Tensor {
        let (vi, vk) = (&self.nodes[input.id].value, &self.nodes[kernel.id].value);
        let (h, w, cin) = vi.dims3();
        assert_eq!(vk.shape.len(), 4, "conv2d: kernel must be [kh,kw,Cin,Cout]");
        let (kh, kw, kcin, cout) = (vk.shape[0], vk.shape[1], vk.shape[2], vk.shape[3]);
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extent must be odd");
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        assert_eq!(
            cin, kcin,
            "conv2d: input has {cin} channels but kernel expects {kcin}"
        );
        let out_h = conv_out_extent(h, kh, stride, padding);
        let out_w = conv_out_extent(w, kw, stride, padding);
        let patch = kh * kw * cin;
        let mut out = vec![0.0; out_h * out_w * cout];
        let rows_per_block = block_rows(out_w, patch, out_h);
        let mut cols = vec![0.0; rows_per_block * out_w * patch];
        let mut oy = 0;
        while oy < out_h {
            let rows = rows_per_block.min(out_h - oy);
            let cols_slice = &mut cols[..rows * out_w * patch];
            im2col_block(
                &vi.data, h, w, cin, kh, kw, stride, padding, out_w, oy, rows, cols_slice,
            );
            let out_slice = &mut out[oy * out_w * cout..(oy + rows) * out_w * cout];
            matmul_acc(cols_slice, &vk.data, out_slice, rows * out_w, patch, cout);
            oy += rows;
        }
        let value = Array::new(vec![out_h, out_w, cout], out);
        let rg = self.any_grad(&[input.id, kernel.id]);
        self.push(
            value,
            Op::Conv2d {
                input: input.id,
                kernel: kernel.id,
                stride,
                padding,
            },
            rg,
        )
    }

    pub fn add_chan_bias(&mut self, map: Tensor, bias: Tensor) -> Tensor {
        let (vm, vb) = (&self.nodes[map.id].value, &self.nodes[bias.id].value);
        let (_, _, c) = vm.dims3();
        assert_eq!(vb.numel(), c, "add_chan_bias: bias length must equal C");
        let mut data = vm.data.clone();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let value = Array::new(vm.shape.clone(), data);
        let rg = self.any_grad(&[map.id, bias.id]);
        self.push(
            value,
            Op::AddChanBias {
                map: map.id,
                bias: bias.id,
            },
            rg,
        )
    }

    pub fn add_row_bias(&mut self, mat: Tensor, bias: Tensor) -> Tensor {
        let (vm, vb) = (&self.nodes[mat.id].value, &self.nodes[bias.id].value);
        let (_, c) = vm.dims2();
        assert_eq!(vb.numel(), c, "add_row_bias: bias length must equal C");
        let mut data = vm.data.clone();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let value = Array::new(vm.shape.clone(), data);
        let rg = self.any_grad(&[mat.id, bias.id]);
        self.push(
            value,
            Op::AddRowBias {
                mat: mat.id,
                bias: bias.id,
            },
            rg,
        )
    }

    pub fn mul_cols_broadcast(&mut self, mat: Tensor, scale: Tensor) -> Tensor {
        let (vm, vs) = (&self.nodes[mat.id].value, &self.nodes[scale.id].value);
        let (_, c) = vm.dims2();
        assert_eq!(vs.numel(), c, "mul_cols_broadcast: scale length must equal C");
        let mut data = vm.data.clone();
        for chunk in data.chunks_mut(c) {
            for (x, s) in chunk.iter_mut().zip(&vs.data) {
                *x *= s;
            }
        }
        let value = Array::new(vm.shape.clone(), data);
        let rg = self.any_grad(&[mat.id, scale.id]);
        self.push(
            value,
            Op::MulColsBroadcast {
                mat: mat.id,
                scale: scale.id,
            },
            rg,
        )
    }

    // ── activations ────────────────────────────────────────────────────

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a.max(0.0)).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Relu(x.id), rg)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Sigmoid(x.id), rg)
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a.exp()).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Exp(x.id), rg)
    }

    pub fn ln(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a.ln()).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Ln(x.id), rg)
    }

    pub fn sin(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a.sin()).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Sin(x.id), rg)
    }

    pub fn cos(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let data = v.data.iter().map(|a| a.cos()).collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Cos(x.id), rg)
    }

    /// Row-wise softmax over the last axis of `[N,K]`.
    pub fn softmax_rows(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, k) = v.dims2();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &v.data[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                data[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                data[i * k + j] /= sum;
            }
        }
        let value = Array::new(vec![n, k], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::SoftmaxRows(x.id), rg)
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let s: f64 = v.data.iter().sum();
        let rg = self.nodes[x.id].requires_grad;
        self.push(Array::scalar(s), Op::SumAll(x.id), rg)
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        assert!(v.numel() > 0, "mean_all: empty tensor");
        let s: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        let rg = self.nodes[x.id].requires_grad;
        self.push(Array::scalar(s), Op::MeanAll(x.id), rg)
    }

    /// Sum groups of `group` consecutive rows: `[G*K, C] -> [G, C]`.
    pub fn sum_group_rows(&mut self, x: Tensor, group: usize) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, c) = v.dims2();
        assert!(group > 0 && n % group == 0, "sum_group_rows: {n} rows not divisible by {group}");
        let g = n / group;
        let mut data = vec![0.0; g * c];
        for i in 0..n {
            let dst = (i / group) * c;
            for j in 0..c {
                data[dst + j] += v.data[i * c + j];
            }
        }
        let value = Array::new(vec![g, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(
            value,
            Op::SumGroupRows {
                input: x.id,
                group,
            },
            rg,
        )
    }

    // ── shape ops ──────────────────────────────────────────────────────

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let (n, ca) = va.dims2();
        let (nb, cb) = vb.dims2();
        assert_eq!(n, nb, "concat_cols: row counts differ");
        let mut data = vec![0.0; n * (ca + cb)];
        for i in 0..n {
            data[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&va.data[i * ca..(i + 1) * ca]);
            data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&vb.data[i * cb..(i + 1) * cb]);
        }
        let value = Array::new(vec![n, ca + cb], data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::ConcatCols(a.id, b.id), rg)
    }

    pub fn concat_rows(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let (na, c) = va.dims2();
        let (nb, cb) = vb.dims2();
        assert_eq!(c, cb, "concat_rows: column counts differ");
        let mut data = Vec::with_capacity((na + nb) * c);
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let value = Array::new(vec![na + nb, c], data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::ConcatRows(a.id, b.id), rg)
    }

    /// Channel concatenation of two `[H,W,·]` maps.
    pub fn concat_chan(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let (h, w, ca) = va.dims3();
        let (hb, wb, cb) = vb.dims3();
        assert!(h == hb && w == wb, "concat_chan: spatial shapes differ");
        let mut data = vec![0.0; h * w * (ca + cb)];
        for p in 0..h * w {
            data[p * (ca + cb)..p * (ca + cb) + ca].copy_from_slice(&va.data[p * ca..(p + 1) * ca]);
            data[p * (ca + cb) + ca..(p + 1) * (ca + cb)]
                .copy_from_slice(&vb.data[p * cb..(p + 1) * cb]);
        }
        let value = Array::new(vec![h, w, ca + cb], data);
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(value, Op::ConcatChan(a.id, b.id), rg)
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, c) = v.dims2();
        assert!(start + len <= c, "slice_cols: {start}+{len} exceeds {c}");
        let mut data = vec![0.0; n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&v.data[i * c + start..i * c + start + len]);
        }
        let value = Array::new(vec![n, len], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(
            value,
            Op::SliceCols {
                input: x.id,
                start,
                len,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Tensor, new_shape: &[usize]) -> Tensor {
        let v = &self.nodes[x.id].value;
        let n: usize = new_shape.iter().product();
        assert_eq!(n, v.numel(), "reshape: element count mismatch");
        let value = Array::new(new_shape.to_vec(), v.data.clone());
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Reshape(x.id), rg)
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, x: Tensor, idx: Vec<usize>) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, c) = v.dims2();
        let mut data = vec![0.0; idx.len() * c];
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < n, "gather_rows: index {r} out of {n}");
            data[i * c..(i + 1) * c].copy_from_slice(&v.data[r * c..(r + 1) * c]);
        }
        let value = Array::new(vec![idx.len(), c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(
            value,
            Op::GatherRows {
                input: x.id,
                idx: Arc::new(idx),
            },
            rg,
        )
    }

    /// Place row i of `x` at `idx[i]` in a `[rows, C]` zero matrix.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, x: Tensor, idx: Vec<usize>, rows: usize) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, c) = v.dims2();
        assert_eq!(n, idx.len(), "scatter_rows: index count mismatch");
        let mut data = vec![0.0; rows * c];
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "scatter_rows: index {r} out of {rows}");
            data[r * c..(r + 1) * c].copy_from_slice(&v.data[i * c..(i + 1) * c]);
        }
        let value = Array::new(vec![rows, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(
            value,
            Op::ScatterRows {
                input: x.id,
                idx: Arc::new(idx),
            },
            rg,
        )
    }

    // ── sampling ───────────────────────────────────────────────────────

    /// Bilinear sampling of `map [H,W,C]` at continuous `coords [P,2]`
    /// given as (u, v) where u indexes W and v indexes H. Out-of-bounds
    /// neighbors contribute zero, so points fully outside return zeros.
    /// Differentiable w.r.t. both the map and the coordinates.
    pub fn bilinear_sample(&mut self, map: Tensor, coords: Tensor) -> Tensor {
        let (vm, vc) = (&self.nodes[map.id].value, &self.nodes[coords.id].value);
        let (h, w, c) = vm.dims3();
        let (p, two) = vc.dims2();
        assert_eq!(two, 2, "bilinear_sample: coords must be [P,2]");
        let mut data = vec![0.0; p * c];
        for i in 0..p {
            let u = vc.data[i * 2];
            let v = vc.data[i * 2 + 1];
            sample_into(&vm.data, h, w, c, u, v, &mut data[i * c..(i + 1) * c]);
        }
        let value = Array::new(vec![p, c], data);
        let rg = self.any_grad(&[map.id, coords.id]);
        self.push(
            value,
            Op::BilinearSample {
                map: map.id,
                coords: coords.id,
            },
            rg,
        )
    }

    /// Adjoint of bilinear sampling: splat rows of `values [P,C]` into an
    /// `[h,w,C]` map at fixed coordinates, distributing each row over the
    /// 4 neighboring cells. Out-of-bounds mass is dropped.
    pub fn bilinear_splat(
        &mut self,
        values: Tensor,
        coords: Vec<(f64, f64)>,
        h: usize,
        w: usize,
    ) -> Tensor {
        let vv = &self.nodes[values.id].value;
        let (p, c) = vv.dims2();
        assert_eq!(p, coords.len(), "bilinear_splat: coordinate count mismatch");
        let mut data = vec![0.0; h * w * c];
        for (i, &(u, v)) in coords.iter().enumerate() {
            let row = &vv.data[i * c..(i + 1) * c];
            for (x, y, wgt) in corner_weights(u, v) {
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let base = (y as usize * w + x as usize) * c;
                for ch in 0..c {
                    data[base + ch] += wgt * row[ch];
                }
            }
        }
        let value = Array::new(vec![h, w, c], data);
        let rg = self.nodes[values.id].requires_grad;
        self.push(
            value,
            Op::BilinearSplat {
                values: values.id,
                coords: Arc::new(coords),
            },
            rg,
        )
    }

    /// Bilinear ×2 upsampling with edge clamping (constant maps stay constant).
    pub fn upsample2x(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (h, w, c) = v.dims3();
        let (oh, ow) = (h * 2, w * 2);
        let mut data = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            let (y0, y1, fy) = resize_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_taps(ox, w);
                let dst = (oy * ow + ox) * c;
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let s00 = (y0 * w + x0) * c;
                let s01 = (y0 * w + x1) * c;
                let s10 = (y1 * w + x0) * c;
                let s11 = (y1 * w + x1) * c;
                for ch in 0..c {
                    data[dst + ch] = w00 * v.data[s00 + ch]
                        + w01 * v.data[s01 + ch]
                        + w10 * v.data[s10 + ch]
                        + w11 * v.data[s11 + ch];
                }
            }
        }
        let value = Array::new(vec![oh, ow, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Upsample2x(x.id), rg)
    }

    /// Bilinear ×½ downsampling (2×2 average).
    pub fn downsample2x(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (h, w, c) = v.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "downsample2x: extents must be even");
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = (oy * ow + ox) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                    for ch in 0..c {
                        data[dst + ch] += 0.25 * v.data[src + ch];
                    }
                }
            }
        }
        let value = Array::new(vec![oh, ow, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::Downsample2x(x.id), rg)
    }

    /// 2×2 stride-2 max pooling.
    pub fn maxpool2(&mut self, x: Tensor) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (h, w, c) = v.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: extents must be even");
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; oh * ow * c];
        let mut argmax = vec![0u32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if v.data[src] > best {
                            best = v.data[src];
                            best_idx = src;
                        }
                    }
                    let dst = (oy * ow + ox) * c + ch;
                    data[dst] = best;
                    argmax[dst] = best_idx as u32;
                }
            }
        }
        let value = Array::new(vec![oh, ow, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::MaxPool2 { input: x.id, argmax }, rg)
    }

    /// Per-group max over arbitrary row subsets of `[N,C]`; groups may
    /// overlap or be empty (empty groups pool to zero).
    pub fn rows_max_pool(&mut self, x: Tensor, groups: &[Vec<usize>]) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, c) = v.dims2();
        let g = groups.len();
        let mut data = vec![0.0; g * c];
        let mut arg = vec![-1i64; g * c];
        for (gi, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = usize::MAX;
                for &r in members {
                    assert!(r < n, "rows_max_pool: row {r} out of {n}");
                    let val = v.data[r * c + ch];
                    if val > best {
                        best = val;
                        best_row = r;
                    }
                }
                data[gi * c + ch] = best;
                arg[gi * c + ch] = best_row as i64;
            }
        }
        let value = Array::new(vec![g, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::RowsMaxPool { input: x.id, arg }, rg)
    }

    /// Outer product per row: `[P,D] ⊗ [P,C] -> [P*D, C]`, row `p*D+d`
    /// holding `prob[p,d] * feat[p,:]`.
    pub fn depth_outer(&mut self, prob: Tensor, feat: Tensor) -> Tensor {
        let (vp, vf) = (&self.nodes[prob.id].value, &self.nodes[feat.id].value);
        let (p, d) = vp.dims2();
        let (p2, c) = vf.dims2();
        assert_eq!(p, p2, "depth_outer: row counts differ");
        let mut data = vec![0.0; p * d * c];
        for i in 0..p {
            let frow = &vf.data[i * c..(i + 1) * c];
            for j in 0..d {
                let s = vp.data[i * d + j];
                let dst = (i * d + j) * c;
                for ch in 0..c {
                    data[dst + ch] = s * frow[ch];
                }
            }
        }
        let value = Array::new(vec![p * d, c], data);
        let rg = self.any_grad(&[prob.id, feat.id]);
        self.push(
            value,
            Op::DepthOuter {
                prob: prob.id,
                feat: feat.id,
            },
            rg,
        )
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Elementwise binary cross-entropy on logits, numerically stable.
    pub fn bce_logits(&mut self, logits: Tensor, targets: Array) -> Tensor {
        let v = &self.nodes[logits.id].value;
        assert_eq!(v.shape, targets.shape, "bce_logits: shape mismatch");
        let data = v
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[logits.id].requires_grad;
        self.push(
            value,
            Op::BceLogits {
                logits: logits.id,
                targets: Arc::new(targets),
            },
            rg,
        )
    }

    /// Elementwise smooth-L1 (Huber) against fixed targets.
    pub fn smooth_l1(&mut self, pred: Tensor, targets: Array, beta: f64) -> Tensor {
        assert!(beta > 0.0, "smooth_l1: beta must be positive");
        let v = &self.nodes[pred.id].value;
        assert_eq!(v.shape, targets.shape, "smooth_l1: shape mismatch");
        let data = v
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&x, &t)| {
                let d = x - t;
                if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                }
            })
            .collect();
        let value = Array::new(v.shape.clone(), data);
        let rg = self.nodes[pred.id].requires_grad;
        self.push(
            value,
            Op::SmoothL1 {
                pred: pred.id,
                targets: Arc::new(targets),
                beta,
            },
            rg,
        )
    }

    /// Row-wise layer normalization (no affine; compose with
    /// [`Tape::mul_cols_broadcast`] and [`Tape::add_row_bias`]).
    pub fn layer_norm_rows(&mut self, x: Tensor, eps: f64) -> Tensor {
        let v = &self.nodes[x.id].value;
        let (n, c) = v.dims2();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = &v.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let value = Array::new(vec![n, c], data);
        let rg = self.nodes[x.id].requires_grad;
        self.push(value, Op::LayerNormRows { input: x.id, eps }, rg)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients for every node that
    /// requires them are retrievable through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Tensor) -> Gradients {
        assert_eq!(
            self.nodes[loss.id].value.numel(),
            1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.step_backward(id, &gout, &mut grads);
            // Leaf grads are kept for retrieval.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Gradients { grads }
    }

    fn step_backward(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($pid:expr, $f:expr) => {{
                let pid: usize = $pid;
                if self.nodes[pid].requires_grad {
                    let n = self.nodes[pid].value.numel();
                    let slot = grads[pid].get_or_insert_with(|| vec![0.0; n]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot.as_mut_slice());
                }
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |g: &mut [f64]| add_assign(g, gout));
                acc!(*b, |g: &mut [f64]| add_assign(g, gout));
            }
            Op::Sub(a, b) => {
                acc!(*a, |g: &mut [f64]| add_assign(g, gout));
                acc!(*b, |g: &mut [f64]| sub_assign(g, gout));
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc!(*x, |g: &mut [f64]| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::AddScalar(x) => {
                acc!(*x, |g: &mut [f64]| add_assign(g, gout));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                acc!(*a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i];
                    }
                });
                acc!(*b, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i];
                    }
                });
            }
            Op::MulChanBroadcast { map, weight } => {
                let vm = &self.nodes[*map].value;
                let vw = &self.nodes[*weight].value;
                let (_, _, c) = vm.dims3();
                acc!(*map, |g: &mut [f64]| {
                    for p in 0..vw.numel() {
                        let s = vw.data[p];
                        for ch in 0..c {
                            g[p * c + ch] += gout[p * c + ch] * s;
                        }
                    }
                });
                acc!(*weight, |g: &mut [f64]| {
                    for p in 0..vw.numel() {
                        let mut s = 0.0;
                        for ch in 0..c {
                            s += gout[p * c + ch] * vm.data[p * c + ch];
                        }
                        g[p] += s;
                    }
                });
            }
            Op::MulRows { values, scalars } => {
                let vv = &self.nodes[*values].value;
                let vs = &self.nodes[*scalars].value;
                let (n, c) = vv.dims2();
                acc!(*values, |g: &mut [f64]| {
                    for i in 0..n {
                        let s = vs.data[i];
                        for j in 0..c {
                            g[i * c + j] += gout[i * c + j] * s;
                        }
                    }
                });
                acc!(*scalars, |g: &mut [f64]| {
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += gout[i * c + j] * vv.data[i * c + j];
                        }
                        g[i] += s;
                    }
                });
            }
            Op::MulConst { input, coeff } => {
                acc!(*input, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * coeff.data[i];
                    }
                });
            }
            Op::MatMul { a, b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k) = va.dims2();
                let (_, n) = vb.dims2();
                acc!(*a, |g: &mut [f64]| {
                    matmul_a_bt_acc(gout, &vb.data, g, m, n, k);
                });
                acc!(*b, |g: &mut [f64]| {
                    matmul_at_b_acc(&va.data, gout, g, m, k, n);
                });
            }
            Op::Transpose(x) => {
                let v = &self.nodes[*x].value;
                let (m, n) = v.dims2();
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                self.conv2d_backward(*input, *kernel, *stride, *padding, gout, grads);
            }
            Op::AddChanBias { map, bias } => {
                let c = self.nodes[*bias].value.numel();
                acc!(*map, |g: &mut [f64]| add_assign(g, gout));
                acc!(*bias, |g: &mut [f64]| {
                    for chunk in gout.chunks(c) {
                        for (gi, go) in g.iter_mut().zip(chunk) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::AddRowBias { mat, bias } => {
                let c = self.nodes[*bias].value.numel();
                acc!(*mat, |g: &mut [f64]| add_assign(g, gout));
                acc!(*bias, |g: &mut [f64]| {
                    for chunk in gout.chunks(c) {
                        for (gi, go) in g.iter_mut().zip(chunk) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::MulColsBroadcast { mat, scale } => {
                let vm = &self.nodes[*mat].value;
                let vs = &self.nodes[*scale].value;
                let c = vs.numel();
                acc!(*mat, |g: &mut [f64]| {
                    for (row, grow) in gout.chunks(c).zip(g.chunks_mut(c)) {
                        for j in 0..c {
                            grow[j] += row[j] * vs.data[j];
                        }
                    }
                });
                acc!(*scale, |g: &mut [f64]| {
                    for (i, go) in gout.iter().enumerate() {
                        g[i % c] += go * vm.data[i];
                    }
                });
            }
            Op::Relu(x) => {
                let v = &self.nodes[*x].value;
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        if v.data[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y.data[i] * (1.0 - y.data[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &self.nodes[id].value;
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y.data[i];
                    }
                });
            }
            Op::Ln(x) => {
                let v = &self.nodes[*x].value;
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / v.data[i];
                    }
                });
            }
            Op::Sin(x) => {
                let v = &self.nodes[*x].value;
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * v.data[i].cos();
                    }
                });
            }
            Op::Cos(x) => {
                let v = &self.nodes[*x].value;
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * v.data[i].sin();
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[id].value;
                let (n, k) = y.dims2();
                acc!(*x, |g: &mut [f64]| {
                    for i in 0..n {
                        let yrow = &y.data[i * k..(i + 1) * k];
                        let grow = &gout[i * k..(i + 1) * k];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            g[i * k + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let go = gout[0];
                acc!(*x, |g: &mut [f64]| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.numel() as f64;
                let go = gout[0] / n;
                acc!(*x, |g: &mut [f64]| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::SumGroupRows { input, group } => {
                let v = &self.nodes[*input].value;
                let (n, c) = v.dims2();
                let group = *group;
                acc!(*input, |g: &mut [f64]| {
                    for i in 0..n {
                        let src = (i / group) * c;
                        for j in 0..c {
                            g[i * c + j] += gout[src + j];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.dims2().1;
                let cb = self.nodes[*b].value.dims2().1;
                let c = ca + cb;
                acc!(*a, |g: &mut [f64]| {
                    for (i, grow) in g.chunks_mut(ca).enumerate() {
                        for j in 0..ca {
                            grow[j] += gout[i * c + j];
                        }
                    }
                });
                acc!(*b, |g: &mut [f64]| {
                    for (i, grow) in g.chunks_mut(cb).enumerate() {
                        for j in 0..cb {
                            grow[j] += gout[i * c + ca + j];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].value.numel();
                acc!(*a, |g: &mut [f64]| add_assign(g, &gout[..na]));
                acc!(*b, |g: &mut [f64]| add_assign(g, &gout[na..]));
            }
            Op::ConcatChan(a, b) => {
                let (_, _, ca) = self.nodes[*a].value.dims3();
                let (_, _, cb) = self.nodes[*b].value.dims3();
                let c = ca + cb;
                acc!(*a, |g: &mut [f64]| {
                    for (p, grow) in g.chunks_mut(ca).enumerate() {
                        for j in 0..ca {
                            grow[j] += gout[p * c + j];
                        }
                    }
                });
                acc!(*b, |g: &mut [f64]| {
                    for (p, grow) in g.chunks_mut(cb).enumerate() {
                        for j in 0..cb {
                            grow[j] += gout[p * c + ca + j];
                        }
                    }
                });
            }
            Op::SliceCols { input, start, len } => {
                let (_, c) = self.nodes[*input].value.dims2();
                let (start, len) = (*start, *len);
                acc!(*input, |g: &mut [f64]| {
                    for (i, grow) in gout.chunks(len).enumerate() {
                        for j in 0..len {
                            g[i * c + start + j] += grow[j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc!(*x, |g: &mut [f64]| add_assign(g, gout));
            }
            Op::GatherRows { input, idx } => {
                let (_, c) = self.nodes[*input].value.dims2();
                acc!(*input, |g: &mut [f64]| {
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += gout[i * c + j];
                        }
                    }
                });
            }
            Op::ScatterRows { input, idx } => {
                let (_, c) = self.nodes[*input].value.dims2();
                acc!(*input, |g: &mut [f64]| {
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[r * c + j];
                        }
                    }
                });
            }
            Op::BilinearSample { map, coords } => {
                let vm = &self.nodes[*map].value;
                let vc = &self.nodes[*coords].value;
                let (h, w, c) = vm.dims3();
                let p = vc.dims2().0;
                acc!(*map, |g: &mut [f64]| {
                    for i in 0..p {
                        let u = vc.data[i * 2];
                        let v = vc.data[i * 2 + 1];
                        let grow = &gout[i * c..(i + 1) * c];
                        for (x, y, wgt) in corner_weights(u, v) {
                            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                                continue;
                            }
                            let base = (y as usize * w + x as usize) * c;
                            for ch in 0..c {
                                g[base + ch] += wgt * grow[ch];
                            }
                        }
                    }
                });
                acc!(*coords, |g: &mut [f64]| {
                    for i in 0..p {
                        let u = vc.data[i * 2];
                        let v = vc.data[i * 2 + 1];
                        let grow = &gout[i * c..(i + 1) * c];
                        let (du, dv) = sample_coord_grad(&vm.data, h, w, c, u, v, grow);
                        g[i * 2] += du;
                        g[i * 2 + 1] += dv;
                    }
                });
            }
            Op::BilinearSplat { values, coords } => {
                let (_, c) = self.nodes[*values].value.dims2();
                let out = &self.nodes[id].value;
                let (h, w, _) = out.dims3();
                acc!(*values, |g: &mut [f64]| {
                    for (i, &(u, v)) in coords.iter().enumerate() {
                        for (x, y, wgt) in corner_weights(u, v) {
                            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                                continue;
                            }
                            let base = (y as usize * w + x as usize) * c;
                            for ch in 0..c {
                                g[i * c + ch] += wgt * gout[base + ch];
                            }
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let v = &self.nodes[*x].value;
                let (h, w, c) = v.dims3();
                let (oh, ow) = (h * 2, w * 2);
                acc!(*x, |g: &mut [f64]| {
                    for oy in 0..oh {
                        let (y0, y1, fy) = resize_taps(oy, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = resize_taps(ox, w);
                            let src = (oy * ow + ox) * c;
                            let w00 = (1.0 - fy) * (1.0 - fx);
                            let w01 = (1.0 - fy) * fx;
                            let w10 = fy * (1.0 - fx);
                            let w11 = fy * fx;
                            for ch in 0..c {
                                let go = gout[src + ch];
                                g[(y0 * w + x0) * c + ch] += w00 * go;
                                g[(y0 * w + x1) * c + ch] += w01 * go;
                                g[(y1 * w + x0) * c + ch] += w10 * go;
                                g[(y1 * w + x1) * c + ch] += w11 * go;
                            }
                        }
                    }
                });
            }
            Op::Downsample2x(x) => {
                let v = &self.nodes[*x].value;
                let (h, w, c) = v.dims3();
                let ow = w / 2;
                acc!(*x, |g: &mut [f64]| {
                    for oy in 0..h / 2 {
                        for ox in 0..ow {
                            let src = (oy * ow + ox) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let dst = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                                for ch in 0..c {
                                    g[dst + ch] += 0.25 * gout[src + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                acc!(*input, |g: &mut [f64]| {
                    for (o, &src) in argmax.iter().enumerate() {
                        g[src as usize] += gout[o];
                    }
                });
            }
            Op::RowsMaxPool { input, arg } => {
                let (_, c) = self.nodes[*input].value.dims2();
                acc!(*input, |g: &mut [f64]| {
                    for (o, &src_row) in arg.iter().enumerate() {
                        if src_row >= 0 {
                            let ch = o % c;
                            g[src_row as usize * c + ch] += gout[o];
                        }
                    }
                });
            }
            Op::DepthOuter { prob, feat } => {
                let vp = &self.nodes[*prob].value;
                let vf = &self.nodes[*feat].value;
                let (p, d) = vp.dims2();
                let (_, c) = vf.dims2();
                acc!(*prob, |g: &mut [f64]| {
                    for i in 0..p {
                        for j in 0..d {
                            let base = (i * d + j) * c;
                            let mut s = 0.0;
                            for ch in 0..c {
                                s += gout[base + ch] * vf.data[i * c + ch];
                            }
                            g[i * d + j] += s;
                        }
                    }
                });
                acc!(*feat, |g: &mut [f64]| {
                    for i in 0..p {
                        for j in 0..d {
                            let base = (i * d + j) * c;
                            let s = vp.data[i * d + j];
                            for ch in 0..c {
                                g[i * c + ch] += gout[base + ch] * s;
                            }
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let v = &self.nodes[*logits].value;
                acc!(*logits, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (sigmoid(v.data[i]) - targets.data[i]);
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                targets,
                beta,
            } => {
                let v = &self.nodes[*pred].value;
                let beta = *beta;
                acc!(*pred, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        let d = v.data[i] - targets.data[i];
                        let dd = if d.abs() < beta { d / beta } else { d.signum() };
                        g[i] += gout[i] * dd;
                    }
                });
            }
            Op::LayerNormRows { input, eps } => {
                let v = &self.nodes[*input].value;
                let y = &self.nodes[id].value;
                let (n, c) = v.dims2();
                let eps = *eps;
                acc!(*input, |g: &mut [f64]| {
                    for i in 0..n {
                        let row = &v.data[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yrow = &y.data[i * c..(i + 1) * c];
                        let grow = &gout[i * c..(i + 1) * c];
                        let gmean = grow.iter().sum::<f64>() / c as f64;
                        let gydot: f64 =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[i * c + j] += inv * (grow[j] - gmean - yrow[j] * gydot);
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let vi = &self.nodes[input].value;
        let vk = &self.nodes[kernel].value;
        let (h, w, cin) = vi.dims3();
        let (kh, kw, _, cout) = (vk.shape[0], vk.shape[1], vk.shape[2], vk.shape[3]);
        let out_h = conv_out_extent(h, kh, stride, padding);
        let out_w = conv_out_extent(w, kw, stride, padding);
        let patch = kh * kw * cin;

        let need_input = self.nodes[input].requires_grad;
        let need_kernel = self.nodes[kernel].requires_grad;
        if !need_input && !need_kernel {
            return;
        }

        let rows_per_block = block_rows(out_w, patch, out_h);
        let mut cols = vec![0.0; rows_per_block * out_w * patch];
        let mut dcols = vec![0.0; rows_per_block * out_w * patch];
        let mut dkernel = if need_kernel {
            Some(vec![0.0; vk.numel()])
        } else {
            None
        };
        let mut dinput = if need_input {
            Some(vec![0.0; vi.numel()])
        } else {
            None
        };

        let mut oy = 0;
        while oy < out_h {
            let rows = rows_per_block.min(out_h - oy);
            let npos = rows * out_w;
            let gblock = &gout[oy * out_w * cout..(oy + rows) * out_w * cout];
            if let Some(dk) = dkernel.as_mut() {
                let cols_slice = &mut cols[..npos * patch];
                im2col_block(
                    &vi.data, h, w, cin, kh, kw, stride, padding, out_w, oy, rows, cols_slice,
                );
                matmul_at_b_acc(cols_slice, gblock, dk, npos, patch, cout);
            }
            if let Some(di) = dinput.as_mut() {
                let dcols_slice = &mut dcols[..npos * patch];
                dcols_slice.fill(0.0);
                matmul_a_bt_acc(gblock, &vk.data, dcols_slice, npos, cout, patch);
                col2im_block(
                    dcols_slice,
                    h,
                    w,
                    cin,
                    kh,
                    kw,
                    stride,
                    padding,
                    out_w,
                    oy,
                    rows,
                    di,
                );
            }
            oy += rows;
        }

        if let Some(mut di) = dinput {
            if self.corrupt_conv_backward {
                for v in di.iter_mut() {
                    *v *= 1.01;
                }
            }
            let slot = grads[input].get_or_insert_with(|| vec![0.0; vi.numel()]);
            add_assign(slot, &di);
        }
        if let Some(dk) = dkernel {
            let slot = grads[kernel].get_or_insert_with(|| vec![0.0; vk.numel()]);
            add_assign(slot, &dk);
        }
    }
}

/// Leaf gradients extracted by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Mul(..) => "mul",
        Op::MulChanBroadcast { .. } => "mul_chan_broadcast",
        Op::MulRows { .. } => "mul_rows",
        Op::MulConst { .. } => "mul_const",
        Op::MatMul { .. } => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Conv2d { .. } => "conv2d",
        Op::AddChanBias { .. } => "add_chan_bias",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::MulColsBroadcast { .. } => "mul_cols_broadcast",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::SumGroupRows { .. } => "sum_group_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatChan(..) => "concat_chan",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape(..) => "reshape",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::BilinearSample { .. } => "bilinear_sample",
        Op::BilinearSplat { .. } => "bilinear_splat",
        Op::Upsample2x(..) => "upsample2x",
        Op::Downsample2x(..) => "downsample2x",
        Op::MaxPool2 { .. } => "maxpool2",
        Op::RowsMaxPool { .. } => "rows_max_pool",
        Op::DepthOuter { .. } => "depth_outer",
        Op::BceLogits { .. } => "bce_logits",
        Op::SmoothL1 { .. } => "smooth_l1",
        Op::LayerNormRows { .. } => "layer_norm_rows",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// The 4 bilinear corner taps and weights for a continuous (u, v).
fn corner_weights(u: f64, v: f64) -> [(isize, isize, f64); 4] {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

fn sample_into(map: &[f64], h: usize, w: usize, c: usize, u: f64, v: f64, out: &mut [f64]) {
    for (x, y, wgt) in corner_weights(u, v) {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize || wgt == 0.0 {
            continue;
        }
        let base = (y as usize * w + x as usize) * c;
        for ch in 0..c {
            out[ch] += wgt * map[base + ch];
        }
    }
}

/// d(sample)/du and /dv contracted against the output gradient row.
fn sample_coord_grad(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    u: f64,
    v: f64,
    grow: &[f64],
) -> (f64, f64) {
    let x0 = u.floor() as isize;
    let y0 = v.floor() as isize;
    let fx = u - u.floor();
    let fy = v - v.floor();
    let fetch = |x: isize, y: isize, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            map[(y as usize * w + x as usize) * c + ch]
        }
    };
    let mut du = 0.0;
    let mut dv = 0.0;
    for (ch, &g) in grow.iter().enumerate() {
        let f00 = fetch(x0, y0, ch);
        let f10 = fetch(x0 + 1, y0, ch);
        let f01 = fetch(x0, y0 + 1, ch);
        let f11 = fetch(x0 + 1, y0 + 1, ch);
        du += g * ((f10 - f00) * (1.0 - fy) + (f11 - f01) * fy);
        dv += g * ((f01 - f00) * (1.0 - fx) + (f11 - f10) * fx);
    }
    (du, dv)
}

/// Clamped source taps for ×2 upsampling at output index `o`.
fn resize_taps(o: usize, extent: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let max = (extent - 1) as f64;
    if src >= max {
        return (extent - 1, extent - 1, 0.0);
    }
    let s0 = src.floor();
    (s0 as usize, s0 as usize + 1, src - s0)
}

/// Row-block size keeping the im2col scratch buffer around 2 MB.
fn block_rows(out_w: usize, patch: usize, out_h: usize) -> usize {
    let target = 1usize << 18;
    (target / (out_w * patch).max(1)).clamp(1, out_h.max(1))
}
