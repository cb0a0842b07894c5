//! Raw numeric kernels shared by the tape and by tape-free inference.
//!
//! Image tensors are `[channels, height, width]`. Convolutions are stride 1
//! with zero padding chosen so the output keeps the input's spatial size
//! (`pad = dilation * (k - 1) / 2`, odd `k` only).

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

/// Geometry of a same-padded, stride-1 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    fn pad(&self) -> isize {
        (self.dilation * (self.kernel - 1) / 2) as isize
    }

    /// For kernel tap `k` along one axis, the valid output range `[lo, hi)`
    /// whose input coordinate `o + k*d - pad` stays inside `[0, size)`.
    fn valid_range(&self, tap: usize, size: usize) -> (usize, usize, isize) {
        let shift = (tap * self.dilation) as isize - self.pad();
        let lo = (-shift).max(0) as usize;
        let hi = ((size as isize) - shift).clamp(0, size as isize) as usize;
        (lo, hi.max(lo), shift)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: ConvGeometry) -> Vec<f64> {
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let plane = h * wd;
    let mut out = vec![0.0; g.out_channels * plane];
    for co in 0..g.out_channels {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..g.in_channels {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let (ylo, yhi, sy) = g.valid_range(ky, h);
                for kx in 0..k {
                    let wv = w[((co * g.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi, sx) = g.valid_range(kx, wd);
                    for oy in ylo..yhi {
                        let iy = (oy as isize + sy) as usize;
                        let drow = &mut dst[oy * wd + xlo..oy * wd + xhi];
                        let start = (iy * wd) as isize + xlo as isize + sx;
                        let srow = &src[start as usize..start as usize + (xhi - xlo)];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoints of [`conv2d`] with respect to input, weight and bias. The
/// input adjoint is skipped (returned empty) unless `want_input` is set.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: ConvGeometry,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let plane = h * wd;
    let mut gx = vec![0.0; if want_input { g.in_channels * plane } else { 0 }];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    for co in 0..g.out_channels {
        let go = &grad_out[co * plane..(co + 1) * plane];
        gb[co] = go.iter().sum();
        for ci in 0..g.in_channels {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let (ylo, yhi, sy) = g.valid_range(ky, h);
                for kx in 0..k {
                    let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (xlo, xhi, sx) = g.valid_range(kx, wd);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = (oy as isize + sy) as usize;
                        let grow = &go[oy * wd + xlo..oy * wd + xhi];
                        let start = ((iy * wd) as isize + xlo as isize + sx) as usize;
                        let n = xhi - xlo;
                        let srow = &src[start..start + n];
                        for (&gv, &sv) in grow.iter().zip(srow) {
                            acc += gv * sv;
                        }
                        if want_input {
                            let dstrow = &mut gx[ci * plane + start..ci * plane + start + n];
                            for (d, &gv) in dstrow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Source index pair and weight for half-pixel-centred bilinear sampling.
fn bilinear_taps(out_size: usize, in_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[c, h, w]` to `[c, oh, ow]`.
pub fn upsample_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}

/// 2×2 average pooling with stride 2; `h` and `w` must be even.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                out[(ch * oh + oy) * ow + ox] = 0.25
                    * (src[y * w + xx] + src[y * w + xx + 1] + src[(y + 1) * w + xx] + src[(y + 1) * w + xx + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * grad_out[(ch * oh + oy) * ow + ox];
                let (y, xx) = (2 * oy, 2 * ox);
                dst[y * w + xx] += g;
                dst[y * w + xx + 1] += g;
                dst[(y + 1) * w + xx] += g;
                dst[(y + 1) * w + xx + 1] += g;
            }
        }
    }
    gx
}

/// Softmax over the leading axis of a `[c, rest]` tensor, independently for
/// every trailing position.
pub fn softmax_axis0(x: &[f64], c: usize) -> Vec<f64> {
    let rest = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for p in 0..rest {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(x[ch * rest + p]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (x[ch * rest + p] - max).exp();
            out[ch * rest + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out[ch * rest + p] /= sum;
        }
    }
    out
}

/// `x − logsumexp(x)` over the leading axis, per trailing position.
pub fn log_softmax_axis0(x: &[f64], c: usize) -> Vec<f64> {
    let rest = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for p in 0..rest {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(x[ch * rest + p]);
        }
        let sum: f64 = (0..c).map(|ch| (x[ch * rest + p] - max).exp()).sum();
        let lse = max + sum.ln();
        for ch in 0..c {
            out[ch * rest + p] = x[ch * rest + p] - lse;
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 1), vec![-2.0, -2.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            height: 3,
            width: 3,
            kernel: 3,
            dilation: 2,
        };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(conv2d(&x, &w, &[0.0], g), x);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            height: 5,
            width: 4,
            kernel: 3,
            dilation: 2,
        };
        let x: Vec<f64> = (0..40).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|v| ((v * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let b = [0.5, -0.25, 0.0];
        let fast = conv2d(&x, &w, &b, g);
        for co in 0..3 {
            for oy in 0..5isize {
                for ox in 0..4isize {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let iy = oy + ky * 2 - 2;
                                let ix = ox + kx * 2 - 2;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[ci * 20 + (iy * 4 + ix) as usize];
                                }
                            }
                        }
                    }
                    let got = fast[co * 20 + (oy * 4 + ox) as usize];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = vec![2.5; 2 * 4 * 4];
        let up = upsample_bilinear(&x, 2, 4, 4, 8, 8);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax_axis0(&[0.0, 0.0, 0.0], 3);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
