//! Hot numeric kernels shared by the tape ops.
//!
//! Everything is written in the axpy/row-streaming form that LLVM
//! auto-vectorizes well on a single core. These three matmul variants
//! back conv2d (via im2col), linear layers and attention.

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// C[m,n] += A^T B where A is [p,m], B is [p,n].
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    for r in 0..p {
        let a_row = &a[r * m..(r + 1) * m];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// C[m,n] += A B^T where A is [m,k], B is [n,k]. Row-dot-row form.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += a_row[t] * b_row[t];
            }
            c_row[j] += s;
        }
    }
}

/// Number of output positions along one axis for a strided convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// im2col for one block of output rows of a channels-last conv.
///
/// Fills `cols` (shape `[rows_in_block * out_w, kh*kw*cin]`) from
/// `input` `[h,w,cin]`, zero-padding out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
pub fn im2col_block(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_w: usize,
    oy_start: usize,
    oy_count: usize,
    cols: &mut [f64],
) {
    let patch = kh * kw * cin;
    debug_assert_eq!(cols.len(), oy_count * out_w * patch);
    cols.fill(0.0);
    for by in 0..oy_count {
        let oy = oy_start + by;
        for ox in 0..out_w {
            let col_base = (by * out_w + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let src = (iy * w + ix) * cin;
                    let dst = col_base + (ky * kw + kx) * cin;
                    cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                }
            }
        }
    }
}

/// Scatter-add transpose of `im2col_block`: accumulates column gradients
/// back into the input gradient buffer.
#[allow(clippy::too_many_arguments)]
pub fn col2im_block(
    cols: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_w: usize,
    oy_start: usize,
    oy_count: usize,
    grad_input: &mut [f64],
) {
    let patch = kh * kw * cin;
    debug_assert_eq!(cols.len(), oy_count * out_w * patch);
    for by in 0..oy_count {
        let oy = oy_start + by;
        for ox in 0..out_w {
            let col_base = (by * out_w + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let dst = (iy * w + ix) * cin;
                    let src = col_base + (ky * kw + kx) * cin;
                    for c in 0..cin {
                        grad_input[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 2.0, -1.0]; // 3x2
        let b = [2.0, 1.0, 0.0, -1.0, 1.0, 4.0]; // 3x2
        // A^T B : [2x2]
        let mut c1 = vec![0.0; 4];
        matmul_at_b_acc(&a, &b, &mut c1, 3, 2, 2);
        // Same product via explicit transpose + matmul.
        let at = [1.0, 0.5, 2.0, -2.0, 3.0, -1.0]; // 2x3
        let mut c2 = vec![0.0; 4];
        matmul_acc(&at, &b, &mut c2, 2, 3, 2);
        for (x, y) in c1.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // A B^T where both are [3x2] -> [3x3]
        let mut c3 = vec![0.0; 9];
        matmul_a_bt_acc(&a, &b, &mut c3, 3, 2, 3);
        let bt = [2.0, 0.0, 1.0, 1.0, -1.0, 4.0]; // 2x3
        let mut c4 = vec![0.0; 9];
        matmul_acc(&a, &bt, &mut c4, 3, 2, 3);
        for (x, y) in c3.iter().zip(c4.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (h, w, cin, kh, kw, stride, pad) = (5, 4, 3, 3, 3, 2, 1);
        let out_h = conv_out_extent(h, kh, stride, pad);
        let out_w = conv_out_extent(w, kw, stride, pad);
        let mut x = vec![0.0; h * w * cin];
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let patch = kh * kw * cin;
        let mut cols = vec![0.0; out_h * out_w * patch];
        im2col_block(&x, h, w, cin, kh, kw, stride, pad, out_w, 0, out_h, &mut cols);
        let mut y = vec![0.0; cols.len()];
        for (i, v) in y.iter_mut().enumerate() {
            *v = (i as f64 * 0.11).cos();
        }
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut xg = vec![0.0; x.len()];
        col2im_block(&y, h, w, cin, kh, kw, stride, pad, out_w, 0, out_h, &mut xg);
        let rhs: f64 = x.iter().zip(xg.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
