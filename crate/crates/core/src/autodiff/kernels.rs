//! Convolution, normalization and dense kernels with their adjoints.

/// `c = op(a) · op(b) + beta · c`, with `op(a)` of shape `m × k` and `op(b)` of shape `k × n`.
///
/// `a` is stored row-major as `m × k` (or `k × m` when `trans_a`), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made through these strides.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one CHW image into a `[C·k·k, Ho·Wo]` patch matrix.
pub fn im2col(x: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.pad as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// [`im2col`] in transposed `[Ho·Wo, C·k·k]` layout, one contiguous patch per output pixel.
pub fn im2col_t(x: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.pad as isize);
    let rows = g.col_rows();
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut col[(oy * wo + ox) * rows..(oy * wo + ox + 1) * rows];
            let mut r = 0;
            for c in 0..g.channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let inside_y = iy >= 0 && iy < h as isize;
                    for kx in 0..k {
                        let ix = (ox * s) as isize + kx as isize - p;
                        dst[r] = if inside_y && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        r += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto a CHW image, accumulating.
pub fn col2im(col: &[f32], g: &ConvGeometry, x: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s, p) = (g.height, g.width, g.kernel, g.stride, g.pad as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a batch. `w` is `[Co, C, k, k]`.
pub fn conv2d_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    w: &[f32],
    bias: &[f32],
    out_channels: usize,
) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let howo = ho * wo;
    let in_len = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut out = vec![0.0f32; batch * out_channels * howo];
    let direct = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0f32; rows * howo] };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_channels * howo..(n + 1) * out_channels * howo];
        for (co, chunk) in dst.chunks_mut(howo).enumerate() {
            chunk.fill(bias[co]);
        }
        let patches: &[f32] = if direct {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        gemm(out_channels, rows, howo, w, false, patches, false, dst, 1.0);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw, db)`; `dx` is skipped when not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    w: &[f32],
    out_channels: usize,
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (ho, wo) = g.out_hw();
    let howo = ho * wo;
    let in_len = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let direct = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let mut dx = need_dx.then(|| vec![0.0f32; batch * in_len]);
    let mut dw = vec![0.0f32; out_channels * rows];
    let mut db = vec![0.0f32; out_channels];
    let mut col = vec![0.0f32; rows * howo];
    for n in 0..batch {
        let dyn_ = &dy[n * out_channels * howo..(n + 1) * out_channels * howo];
        for (co, chunk) in dyn_.chunks(howo).enumerate() {
            db[co] += chunk.iter().sum::<f32>();
        }
        let xn = &x[n * in_len..(n + 1) * in_len];
        if need_dw {
            im2col_t(xn, g, &mut col);
            gemm(out_channels, howo, rows, dyn_, false, &col, false, &mut dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if direct {
                gemm(rows, out_channels, howo, w, true, dyn_, false, dxn, 1.0);
            } else {
                gemm(rows, out_channels, howo, w, true, dyn_, false, &mut col, 0.0);
                col2im(&col, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 stride-2 transposed convolution. `w` is `[C, Co, 2, 2]`.
pub fn upconv_forward(
    x: &[f32],
    batch: usize,
    channels: usize,
    h: usize,
    w_: usize,
    w: &[f32],
    bias: &[f32],
    out_channels: usize,
) -> Vec<f32> {
    let hw = h * w_;
    let (oh, ow) = (2 * h, 2 * w_);
    let mut out = vec![0.0f32; batch * out_channels * oh * ow];
    let mut tmp = vec![0.0f32; out_channels * 4 * hw];
    for n in 0..batch {
        let xn = &x[n * channels * hw..(n + 1) * channels * hw];
        gemm(out_channels * 4, channels, hw, w, true, xn, false, &mut tmp, 0.0);
        let on = &mut out[n * out_channels * oh * ow..(n + 1) * out_channels * oh * ow];
        for co in 0..out_channels {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &tmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = &mut on[co * oh * ow + (2 * i + a) * ow..];
                        for j in 0..w_ {
                            row[2 * j + b] = src[i * w_ + j] + bias[co];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upconv_backward(
    x: &[f32],
    batch: usize,
    channels: usize,
    h: usize,
    w_: usize,
    w: &[f32],
    out_channels: usize,
    dy: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let hw = h * w_;
    let (oh, ow) = (2 * h, 2 * w_);
    let mut dx = need_dx.then(|| vec![0.0f32; batch * channels * hw]);
    let mut dw = vec![0.0f32; channels * out_channels * 4];
    let mut db = vec![0.0f32; out_channels];
    let mut tmp = vec![0.0f32; out_channels * 4 * hw];
    for n in 0..batch {
        let dyn_ = &dy[n * out_channels * oh * ow..(n + 1) * out_channels * oh * ow];
        for co in 0..out_channels {
            db[co] += dyn_[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f32>();
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut tmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = &dyn_[co * oh * ow + (2 * i + a) * ow..];
                        for j in 0..w_ {
                            dst[i * w_ + j] = row[2 * j + b];
                        }
                    }
                }
            }
        }
        let xn = &x[n * channels * hw..(n + 1) * channels * hw];
        gemm(channels, hw, out_channels * 4, xn, false, &tmp, true, &mut dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * channels * hw..(n + 1) * channels * hw];
            gemm(channels, out_channels * 4, hw, w, false, &tmp, false, dxn, 1.0);
        }
    }
    (dx, dw, db)
}

pub const NORM_EPS: f32 = 1e-5;

/// Instance normalization with per-channel affine. Returns output and `(mean, rstd)` per (n, c).
pub fn instance_norm_forward(
    x: &[f32],
    batch: usize,
    channels: usize,
    hw: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<(f32, f32)>) {
    let mut out = vec![0.0f32; x.len()];
    let mut stats = Vec::with_capacity(batch * channels);
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * hw;
            let plane = &x[off..off + hw];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let var = plane
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / hw as f64;
            let rstd = 1.0 / (var + NORM_EPS as f64).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            let (gm, bt) = (gamma[c], beta[c]);
            for (o, &v) in out[off..off + hw].iter_mut().zip(plane) {
                *o = (v - mean) * rstd * gm + bt;
            }
            stats.push((mean, rstd));
        }
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    x: &[f32],
    batch: usize,
    channels: usize,
    hw: usize,
    gamma: &[f32],
    stats: &[(f32, f32)],
    dy: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * hw;
            let (mean, rstd) = stats[n * channels + c];
            let xs = &x[off..off + hw];
            let dys = &dy[off..off + hw];
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (&v, &d) in xs.iter().zip(dys) {
                let xhat = (v - mean) * rstd;
                sum_dy += d as f64;
                sum_dy_xhat += (d * xhat) as f64;
            }
            dgamma[c] += sum_dy_xhat as f32;
            dbeta[c] += sum_dy as f32;
            if let Some(dx) = dx.as_mut() {
                let g = gamma[c];
                let m_dy = (sum_dy / hw as f64) as f32;
                let m_dyx = (sum_dy_xhat / hw as f64) as f32;
                for ((o, &v), &d) in dx[off..off + hw].iter_mut().zip(xs).zip(dys) {
                    let xhat = (v - mean) * rstd;
                    *o = g * rstd * (d - m_dy - xhat * m_dyx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], g: &ConvGeometry, w: &[f32], b: &[f32], co: usize) -> Vec<f32> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((o * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let g = ConvGeometry { channels: 3, height: 7, width: 6, kernel: k, stride, pad };
            let x: Vec<f32> = (0..3 * 7 * 6).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
            let w: Vec<f32> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f32 - 3.0) / 5.0).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, 1, &g, &w, &b, 4);
            let slow = naive_conv(&x, &g, &w, &b, 4);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transposed_patches_match() {
        let g = ConvGeometry { channels: 3, height: 5, width: 6, kernel: 3, stride: 2, pad: 1 };
        let (ho, wo) = g.out_hw();
        let x: Vec<f32> = (0..g.channels * g.height * g.width).map(|i| i as f32).collect();
        let mut a = vec![0.0; g.col_rows() * ho * wo];
        let mut b = a.clone();
        im2col(&x, &g, &mut a);
        im2col_t(&x, &g, &mut b);
        for r in 0..g.col_rows() {
            for q in 0..ho * wo {
                assert_eq!(a[r * ho * wo + q], b[q * g.col_rows() + r]);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeometry { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let (ho, wo) = g.out_hw();
        let x: Vec<f32> = (0..g.channels * g.height * g.width).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.col_rows() * ho * wo).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| (*a * *b) as f64).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (*a * *b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
