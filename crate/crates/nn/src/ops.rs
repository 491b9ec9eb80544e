//! Numeric kernels: activations, convolutions, batch norm, pooling.
//!
//! Every forward kernel has a matching backward kernel. Convolutions use
//! symmetric zero padding of `(k - 1) / 2`.

use crate::tensor::Tensor;

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_145_75;
const LN2_LO: f32 = 1.428_606_8e-6;
const ROUND_MAGIC: f32 = 12_582_912.0;

/// `exp` with ~2 ulp error that the compiler can vectorize.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = ((n as i32 + 127) << 23) as u32;
    p * f32::from_bits(bits)
}

#[inline(always)]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

#[inline(always)]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline(always)]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn conv_out_len(len: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (len + 2 * pad - k) / stride + 1
}

/// `C = alpha * A B + beta * C` for row-major operands; `trans_*` selects the
/// transposed view of the stored matrix. `A` is `m x k`, `B` is `k x n` after
/// transposition.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe views inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 1x1 convolution, weight `[cout, cin]`.
pub fn pointwise_forward(x: &Tensor, w: &[f32], cout: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    assert_eq!(w.len(), cout * cin);
    let hw = h * wd;
    let mut y = Tensor::zeros([n, cout, h, wd]);
    for i in 0..n {
        gemm(cout, cin, hw, w, false, x.sample(i), false, 0.0, y.sample_mut(i));
    }
    y
}

/// Accumulates into `dw`; returns the input gradient when `need_dx`.
pub fn pointwise_backward(
    x: &Tensor,
    w: &[f32],
    dy: &Tensor,
    dw: &mut [f32],
    need_dx: bool,
) -> Option<Tensor> {
    let [n, cin, h, wd] = x.shape();
    let cout = dy.channels();
    let hw = h * wd;
    for i in 0..n {
        gemm(cout, hw, cin, dy.sample(i), false, x.sample(i), true, 1.0, dw);
    }
    need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            gemm(cin, cout, hw, w, true, dy.sample(i), false, 0.0, dx.sample_mut(i));
        }
        dx
    })
}

/// Output column range `[lo, hi)` whose input index `o * stride + kx - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(in_len: usize, out_len: usize, kx: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let last = in_len as isize - 1 + pad as isize - kx as isize;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Depthwise convolution, weight `[c, k, k]`.
pub fn depthwise_forward(x: &Tensor, w: &[f32], k: usize, stride: usize) -> Tensor {
    let [n, c, h, wd] = x.shape();
    assert_eq!(w.len(), c * k * k);
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let ydata = y.data_mut();
    let xdata = x.data();
    for plane in 0..n * c {
        let ch = plane % c;
        let xin = &xdata[plane * h * wd..(plane + 1) * h * wd];
        let out = &mut ydata[plane * ho * wo..(plane + 1) * ho * wo];
        let kern = &w[ch * k * k..(ch + 1) * k * k];
        for ky in 0..k {
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row_in = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                let row_out = &mut out[oy * wo..(oy + 1) * wo];
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    let (lo, hi) = valid_range(wd, wo, kx, pad, stride);
                    if lo >= hi {
                        continue;
                    }
                    if stride == 1 {
                        let off = lo + kx - pad;
                        let src = &row_in[off..off + (hi - lo)];
                        for (o, s) in row_out[lo..hi].iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    } else {
                        for ox in lo..hi {
                            row_out[ox] += wv * row_in[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise_backward(
    x: &Tensor,
    w: &[f32],
    k: usize,
    stride: usize,
    dy: &Tensor,
    dw: &mut [f32],
    need_dx: bool,
) -> Option<Tensor> {
    let [n, c, h, wd] = x.shape();
    let pad = (k - 1) / 2;
    let [_, _, ho, wo] = dy.shape();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let xdata = x.data();
    let dydata = dy.data();
    for plane in 0..n * c {
        let ch = plane % c;
        let xin = &xdata[plane * h * wd..(plane + 1) * h * wd];
        let g = &dydata[plane * ho * wo..(plane + 1) * ho * wo];
        let kern = &w[ch * k * k..(ch + 1) * k * k];
        let dkern = &mut dw[ch * k * k..(ch + 1) * k * k];
        let mut dplane = dx
            .as_mut()
            .map(|t| &mut t.data_mut()[plane * h * wd..(plane + 1) * h * wd]);
        for ky in 0..k {
            for oy in 0..ho {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                let row_in = &xin[iy * wd..(iy + 1) * wd];
                let row_g = &g[oy * wo..(oy + 1) * wo];
                for kx in 0..k {
                    let (lo, hi) = valid_range(wd, wo, kx, pad, stride);
                    if lo >= hi {
                        continue;
                    }
                    let wv = kern[ky * k + kx];
                    let mut acc = 0.0f32;
                    if stride == 1 {
                        let off = lo + kx - pad;
                        let src = &row_in[off..off + (hi - lo)];
                        for (gv, s) in row_g[lo..hi].iter().zip(src) {
                            acc += gv * s;
                        }
                        if let Some(dp) = dplane.as_deref_mut() {
                            let drow = &mut dp[iy * wd + off..iy * wd + off + (hi - lo)];
                            for (d, gv) in drow.iter_mut().zip(&row_g[lo..hi]) {
                                *d += wv * gv;
                            }
                        }
                    } else {
                        for ox in lo..hi {
                            acc += row_g[ox] * row_in[ox * stride + kx - pad];
                        }
                        if let Some(dp) = dplane.as_deref_mut() {
                            let drow = &mut dp[iy * wd..(iy + 1) * wd];
                            for ox in lo..hi {
                                drow[ox * stride + kx - pad] += wv * row_g[ox];
                            }
                        }
                    }
                    dkern[ky * k + kx] += acc;
                }
            }
        }
    }
    dx
}

/// Unfold one `[cin, h, w]` sample into `[cin * k * k, ho * wo]` columns.
fn im2col(x: &[f32], cin: usize, h: usize, wd: usize, k: usize, stride: usize, cols: &mut [f32]) {
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(wd, wo, kx, pad, stride);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ci * h * wd + iy as usize * wd..][..wd];
                    for ox in lo..hi {
                        dst[oy * wo + ox] = src[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], cin: usize, h: usize, wd: usize, k: usize, stride: usize, dx: &mut [f32]) {
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(wd, wo, kx, pad, stride);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[ci * h * wd + iy as usize * wd..][..wd];
                    for ox in lo..hi {
                        dst[ox * stride + kx - pad] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Full convolution, weight `[cout, cin, k, k]`.
pub fn dense_conv_forward(x: &Tensor, w: &[f32], cout: usize, k: usize, stride: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    assert_eq!(w.len(), cout * cin * k * k);
    let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
    let rows = cin * k * k;
    let mut cols = vec![0.0; rows * ho * wo];
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    for i in 0..n {
        im2col(x.sample(i), cin, h, wd, k, stride, &mut cols);
        gemm(cout, rows, ho * wo, w, false, &cols, false, 0.0, y.sample_mut(i));
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn dense_conv_backward(
    x: &Tensor,
    w: &[f32],
    k: usize,
    stride: usize,
    dy: &Tensor,
    dw: &mut [f32],
    need_dx: bool,
) -> Option<Tensor> {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, ho, wo] = dy.shape();
    let rows = cin * k * k;
    let mut cols = vec![0.0; rows * ho * wo];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        im2col(x.sample(i), cin, h, wd, k, stride, &mut cols);
        gemm(cout, ho * wo, rows, dy.sample(i), false, &cols, true, 1.0, dw);
        if let Some(dx) = dx.as_mut() {
            gemm(rows, cout, ho * wo, w, true, dy.sample(i), false, 0.0, &mut cols);
            col2im(&cols, cin, h, wd, k, stride, dx.sample_mut(i));
        }
    }
    dx
}

/// `y[n, o] = sum_i x[n, i] w[o, i] + b[o]`.
pub fn linear_forward(x: &[f32], w: &[f32], b: &[f32], n: usize, inp: usize, out: usize) -> Vec<f32> {
    let mut y = vec![0.0; n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(b);
    }
    gemm(n, inp, out, x, false, w, true, 1.0, &mut y);
    y
}

/// Accumulates weight and bias gradients; returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    inp: usize,
    out: usize,
    dw: &mut [f32],
    db: &mut [f32],
) -> Vec<f32> {
    gemm(out, n, inp, dy, true, x, false, 1.0, dw);
    for row in dy.chunks(out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = vec![0.0; n * inp];
    gemm(n, out, inp, dy, false, w, false, 0.0, &mut dx);
    dx
}

/// Global average pool `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let hw = x.plane_len();
    let inv = 1.0 / hw as f32;
    x.data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f32>() * inv)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], shape: [usize; 4]) -> Tensor {
    let hw = shape[2] * shape[3];
    let inv = 1.0 / hw as f32;
    let mut dx = Tensor::zeros(shape);
    for (plane, g) in dx.data_mut().chunks_mut(hw).zip(dy) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// Per-channel batch statistics over `(n, h, w)`: `(mean, biased variance)`.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let hw = x.plane_len();
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for (plane_idx, plane) in x.data().chunks(hw).enumerate() {
        let ch = plane_idx % c;
        mean[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (plane_idx, plane) in x.data().chunks(hw).enumerate() {
        let ch = plane_idx % c;
        let m = mean[ch] as f32;
        var[ch] += plane
            .iter()
            .map(|&v| {
                let d = v - m;
                (d * d) as f64
            })
            .sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_std_exp() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let rel = (fast_exp(x) - x.exp()).abs() / x.exp();
            assert!(rel < 5e-7, "x={x} rel={rel}");
            x += 0.0137;
        }
        assert!(fast_exp(-1000.0) >= 0.0);
        assert!(fast_exp(1000.0).is_finite());
    }

    fn naive_conv(x: &Tensor, w: &[f32], cout: usize, k: usize, stride: usize, groups: usize) -> Tensor {
        let [n, cin, h, wd] = x.shape();
        let pad = (k - 1) / 2;
        let (ho, wo) = (conv_out_len(h, k, stride), conv_out_len(wd, k, stride));
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let mut y = Tensor::zeros([n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                let g = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for cl in 0..cin_g {
                            let ci = g * cin_g + cl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    acc += xv * w[((co * cin_g + cl) * k + ky) * k + kx];
                                }
                            }
                        }
                        y.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: [usize; 4]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect())
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn convolutions_match_naive_reference() {
        for &(h, wd) in &[(7usize, 7usize), (8, 5), (1, 1), (2, 3)] {
            let x = ramp([2, 4, h, wd]);
            for &(k, s) in &[(3usize, 1usize), (3, 2), (5, 1), (5, 2)] {
                let w: Vec<f32> = (0..4 * k * k).map(|i| (i as f32 * 0.13).sin()).collect();
                let got = depthwise_forward(&x, &w, k, s);
                let want = naive_conv(&x, &w, 4, k, s, 4);
                assert_eq!(got.shape(), want.shape());
                assert_close(got.data(), want.data(), 1e-5);

                let wd_: Vec<f32> = (0..3 * 4 * k * k).map(|i| (i as f32 * 0.07).cos()).collect();
                let got = dense_conv_forward(&x, &wd_, 3, k, s);
                let want = naive_conv(&x, &wd_, 3, k, s, 1);
                assert_close(got.data(), want.data(), 1e-5);
            }
            let wp: Vec<f32> = (0..6 * 4).map(|i| i as f32 * 0.1 - 1.0).collect();
            let got = pointwise_forward(&x, &wp, 6);
            let want = naive_conv(&x, &wp, 6, 1, 1, 1);
            assert_close(got.data(), want.data(), 1e-5);
        }
    }

    /// Loss `sum(y * r)` for a fixed random-ish `r`; gradient w.r.t. y is `r`.
    fn probe(shape: [usize; 4]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 53 % 97) as f32 / 48.0) - 1.0).collect())
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    fn check_conv_grads(
        forward: &dyn Fn(&Tensor, &[f32]) -> Tensor,
        backward: &dyn Fn(&Tensor, &[f32], &Tensor, &mut [f32]) -> Option<Tensor>,
        x: Tensor,
        w: Vec<f32>,
    ) {
        let y = forward(&x, &w);
        let r = probe(y.shape());
        let mut dw = vec![0.0; w.len()];
        let dx = backward(&x, &w, &r, &mut dw).unwrap();
        let eps = 1e-2f32;
        for i in (0..w.len()).step_by(3) {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (dot(&forward(&x, &wp), &r) - dot(&forward(&x, &wm), &r)) / (2.0 * eps as f64);
            assert!((fd - dw[i] as f64).abs() < 1e-3 * (1.0 + fd.abs()), "dw[{i}] {fd} vs {}", dw[i]);
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (dot(&forward(&xp, &w), &r) - dot(&forward(&xm, &w), &r)) / (2.0 * eps as f64);
            let an = dx.data()[i] as f64;
            assert!((fd - an).abs() < 1e-3 * (1.0 + fd.abs()), "dx[{i}] {fd} vs {an}");
        }
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        for &(k, s) in &[(3usize, 1usize), (3, 2), (5, 2), (5, 1)] {
            let x = ramp([2, 3, 7, 6]);
            let w: Vec<f32> = (0..3 * k * k).map(|i| (i as f32 * 0.31).sin()).collect();
            check_conv_grads(
                &|x, w| depthwise_forward(x, w, k, s),
                &|x, w, dy, dw| depthwise_backward(x, w, k, s, dy, dw, true),
                x,
                w,
            );
        }
    }

    #[test]
    fn dense_and_pointwise_gradients_match_finite_differences() {
        let x = ramp([2, 3, 6, 5]);
        let w: Vec<f32> = (0..4 * 3 * 9).map(|i| (i as f32 * 0.17).cos()).collect();
        check_conv_grads(
            &|x, w| dense_conv_forward(x, w, 4, 3, 2),
            &|x, w, dy, dw| dense_conv_backward(x, w, 3, 2, dy, dw, true),
            x.clone(),
            w,
        );
        let w: Vec<f32> = (0..5 * 3).map(|i| (i as f32 * 0.41).sin()).collect();
        check_conv_grads(
            &|x, w| pointwise_forward(x, w, 5),
            &|x, w, dy, dw| pointwise_backward(x, w, dy, dw, true),
            x,
            w,
        );
    }

    #[test]
    fn linear_matches_manual_product() {
        let x = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let w = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let b = [0.01, -0.02];
        let y = linear_forward(&x, &w, &b, 2, 3, 2);
        let expect = [
            0.1 + 0.4 + 0.9 + 0.01,
            -0.4 + 1.0 - 1.8 - 0.02,
            -0.1 + 0.1 + 0.0 + 0.01,
            0.4 + 0.25 - 0.0 - 0.02,
        ];
        assert_close(&y, &expect, 1e-6);
    }
}
