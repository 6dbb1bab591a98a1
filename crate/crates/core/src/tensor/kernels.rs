//! Raw loops behind the tape: GEMM variants and batched im2col convolution.
//!
//! Every routine accumulates into its output slice (`+=`), which is what the
//! backward pass wants and costs the forward pass one zero-fill.

use crate::error::{Error, Result};

/// Output extent of a cross-correlation along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::geometry("conv2d", "stride must be >= 1"));
    }
    if kernel == 0 || kernel > input + 2 * padding {
        return Err(Error::geometry(
            "conv2d",
            format!("kernel {kernel} does not fit input {input} with padding {padding}"),
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis (no padding).
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::geometry("conv2d_transpose", "stride must be >= 1"));
    }
    if kernel == 0 || input == 0 {
        return Err(Error::geometry(
            "conv2d_transpose",
            format!("kernel {kernel} with input extent {input}"),
        ));
    }
    Ok((input - 1) * stride + kernel)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in arow.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of one cross-correlation: an image of `channels × height × width`
/// scanned by `kh × kw` windows, producing `oh × ow` patch positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds `batch` images into columns `[patch_len × (batch·positions)]`.
pub(crate) fn im2col(x: &[f64], batch: usize, g: &Window) -> Vec<f64> {
    let positions = g.positions();
    let cols_n = batch * positions;
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for b in 0..batch {
        let img = &x[b * g.image_len()..(b + 1) * g.image_len()];
        for ci in 0..g.channels {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ci * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * cols_n + b * positions..row * cols_n + (b + 1) * positions];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &img[(ci * g.height + iy as usize) * g.width..];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * g.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds columns back onto images, summing overlapping contributions.
pub(crate) fn col2im(cols: &[f64], batch: usize, g: &Window, x: &mut [f64]) {
    let positions = g.positions();
    let cols_n = batch * positions;
    for b in 0..batch {
        let img = &mut x[b * g.image_len()..(b + 1) * g.image_len()];
        for ci in 0..g.channels {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ci * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * cols_n + b * positions..row * cols_n + (b + 1) * positions];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = (ci * g.height + iy as usize) * g.width;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                img[base + ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, channels, positions]` → `[channels, batch·positions]`
pub(crate) fn to_channel_major(x: &[f64], batch: usize, channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * positions..(b * channels + c + 1) * positions];
            out[c * batch * positions + b * positions..c * batch * positions + (b + 1) * positions]
                .copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub(crate) fn from_channel_major(x: &[f64], batch: usize, channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * positions..(b * channels + c + 1) * positions].copy_from_slice(
                &x[c * batch * positions + b * positions..c * batch * positions + (b + 1) * positions],
            );
        }
    }
    out
}

/// Batched cross-correlation. `kernels` is `[c_out, c_in, kh, kw]`, the input
/// window `g` describes one `[c_in, h, w]` image.
pub(crate) fn conv2d_forward(
    x: &[f64],
    kernels: &[f64],
    bias: &[f64],
    batch: usize,
    c_out: usize,
    g: &Window,
) -> Vec<f64> {
    let cols = im2col(x, batch, g);
    let n = batch * g.positions();
    let mut y = vec![0.0; c_out * n];
    gemm(kernels, &cols, &mut y, c_out, g.patch_len(), n);
    for (co, row) in y.chunks_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v += bias[co]);
    }
    from_channel_major(&y, batch, c_out, g.positions())
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernels: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernels: &[f64],
    dout: &[f64],
    batch: usize,
    c_out: usize,
    g: &Window,
    want: [bool; 3],
) -> ConvGrads {
    let n = batch * g.positions();
    let k = g.patch_len();
    let dout_t = to_channel_major(dout, batch, c_out, g.positions());
    let bias = want[2].then(|| dout_t.chunks(n).map(|r| r.iter().sum()).collect());
    let kernel_grad = want[1].then(|| {
        let cols = im2col(x, batch, g);
        let mut dk = vec![0.0; c_out * k];
        gemm_a_bt(&dout_t, &cols, &mut dk, c_out, n, k);
        dk
    });
    let input = want[0].then(|| {
        let mut dcols = vec![0.0; k * n];
        gemm_at_b(kernels, &dout_t, &mut dcols, k, c_out, n);
        let mut dx = vec![0.0; batch * g.image_len()];
        col2im(&dcols, batch, g, &mut dx);
        dx
    });
    ConvGrads {
        input,
        kernels: kernel_grad,
        bias,
    }
}

/// Batched transposed convolution. `kernels` is `[c_in, c_out, kh, kw]`;
/// `g` is the window over the *output* image (`c_out × oh' × ow'`) whose
/// patch positions are the `h × w` input pixels.
pub(crate) fn conv_transpose_forward(
    x: &[f64],
    kernels: &[f64],
    bias: &[f64],
    batch: usize,
    c_in: usize,
    g: &Window,
) -> Vec<f64> {
    let n = batch * g.positions();
    let k = g.patch_len();
    let x_t = to_channel_major(x, batch, c_in, g.positions());
    let mut cols = vec![0.0; k * n];
    gemm_at_b(kernels, &x_t, &mut cols, k, c_in, n);
    let mut out = vec![0.0; batch * g.image_len()];
    col2im(&cols, batch, g, &mut out);
    let spatial = g.height * g.width;
    for img in out.chunks_mut(g.image_len()) {
        for (co, plane) in img.chunks_mut(spatial).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[co]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    x: &[f64],
    kernels: &[f64],
    dout: &[f64],
    batch: usize,
    c_in: usize,
    g: &Window,
    want: [bool; 3],
) -> ConvGrads {
    let n = batch * g.positions();
    let k = g.patch_len();
    let spatial = g.height * g.width;
    let bias = want[2].then(|| {
        let mut db = vec![0.0; g.channels];
        for img in dout.chunks(g.image_len()) {
            for (co, plane) in img.chunks(spatial).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        db
    });
    let dcols = im2col(dout, batch, g);
    let input = want[0].then(|| {
        let mut dx_t = vec![0.0; c_in * n];
        gemm(kernels, &dcols, &mut dx_t, c_in, k, n);
        from_channel_major(&dx_t, batch, c_in, g.positions())
    });
    let kernel_grad = want[1].then(|| {
        let x_t = to_channel_major(x, batch, c_in, g.positions());
        let mut dk = vec![0.0; c_in * k];
        gemm_a_bt(&x_t, &dcols, &mut dk, c_in, n, k);
        dk
    });
    ConvGrads {
        input,
        kernels: kernel_grad,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expected = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm_at_b(&transpose(&a, m, k), &b, &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        gemm_a_bt(&a, &transpose(&b, k, n), &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - expected[i]).abs() < 1e-12);
            assert!((c2[i] - expected[i]).abs() < 1e-12);
            assert!((c3[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_conv_matches_im2col() {
        // 2 images, 2 channels, 5x4, 3x2 kernels, stride 2, padding 1
        let g = Window {
            channels: 2,
            height: 5,
            width: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            padding: 1,
            oh: conv_out_dim(5, 3, 2, 1).unwrap(),
            ow: conv_out_dim(4, 2, 2, 1).unwrap(),
        };
        let batch = 2;
        let c_out = 3;
        let x: Vec<f64> = (0..batch * g.image_len()).map(|i| (i as f64 * 0.13).sin()).collect();
        let w: Vec<f64> = (0..c_out * g.patch_len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let y = conv2d_forward(&x, &w, &bias, batch, c_out, &g);
        for b in 0..batch {
            for co in 0..c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = bias[co];
                        for ci in 0..g.channels {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    s += w[((co * 2 + ci) * 3 + ki) * 2 + kj]
                                        * x[((b * 2 + ci) * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                        let got = y[((b * c_out + co) * g.oh + oy) * g.ow + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let t = to_channel_major(&x, 2, 3, 4);
        assert_eq!(from_channel_major(&t, 2, 3, 4), x);
    }

    #[test]
    fn out_dims() {
        assert_eq!(conv_out_dim(7, 3, 1, 1).unwrap(), 7);
        assert_eq!(conv_out_dim(7, 3, 1, 0).unwrap(), 5);
        assert_eq!(conv_out_dim(28, 3, 2, 1).unwrap(), 14);
        assert!(conv_out_dim(2, 3, 1, 0).is_err());
        assert!(conv_out_dim(7, 3, 0, 0).is_err());
        assert_eq!(conv_transpose_out_dim(1, 3, 1).unwrap(), 3);
        assert_eq!(conv_transpose_out_dim(5, 3, 1).unwrap(), 7);
        assert_eq!(conv_transpose_out_dim(3, 2, 2).unwrap(), 6);
    }
}
