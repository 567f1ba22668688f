//! Forward and backward kernels on raw row-major buffers.
//!
//! The tape in [`super::tape`] owns shapes and bookkeeping; everything here
//! is plain slice arithmetic so it can be tested in isolation.

/// `c = alpha * a @ b + beta * c` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
/// Transposition is expressed through the `*_t` flags.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the buffers whose lengths are
    // asserted, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of a square-kernel 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }
}

/// Unfold one sample into columns `off..off + ho*wo` of a row-major buffer
/// with leading dimension `ld` (one row per `(channel, ky, kx)`).
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64], ld: usize, off: usize) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ld + off..row * ld + off + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into one sample.
fn col2im(g: &ConvGeom, col: &[f64], ld: usize, off: usize, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ld + off..row * ld + off + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Whole-batch column matrix `[in_ch·k·k, batch·ho·wo]`.
fn batch_cols(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.in_ch * g.height * g.width;
    let ld = g.batch * cols;
    let mut col = vec![0.0; rows * ld];
    for n in 0..g.batch {
        im2col(g, &x[n * in_per..(n + 1) * in_per], &mut col, ld, n * cols);
    }
    col
}

/// `[out_ch, batch·spatial]` ⇄ `[batch, out_ch, spatial]`.
fn channel_major_to_nchw(c: usize, n: usize, spatial: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for b in 0..n {
            let s = &src[ch * n * spatial + b * spatial..][..spatial];
            out[(b * c + ch) * spatial..][..spatial].copy_from_slice(s);
        }
    }
    out
}

fn nchw_to_channel_major(n: usize, c: usize, spatial: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = &src[(b * c + ch) * spatial..][..spatial];
            out[ch * n * spatial + b * spatial..][..spatial].copy_from_slice(s);
        }
    }
    out
}

/// Convolution forward as one GEMM over the whole batch. Returns the output
/// and, when `keep_cols`, the column matrix for reuse in the weight gradient.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], keep_cols: bool) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let col = batch_cols(g, x);
    let ld = g.batch * cols;
    let mut y = vec![0.0; g.out_ch * ld];
    gemm(g.out_ch, rows, ld, w, false, &col, false, &mut y, 1.0, 0.0);
    let y = channel_major_to_nchw(g.out_ch, g.batch, cols, &y);
    (y, if keep_cols { col } else { Vec::new() })
}

/// Gradient w.r.t. the input.
pub fn conv2d_backward_input(g: &ConvGeom, w: &[f64], dy: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.in_ch * g.height * g.width;
    let ld = g.batch * cols;
    let dy = nchw_to_channel_major(g.batch, g.out_ch, cols, dy);
    let mut dcol = vec![0.0; rows * ld];
    gemm(rows, g.out_ch, ld, w, true, &dy, false, &mut dcol, 1.0, 0.0);
    let mut dx = vec![0.0; g.batch * in_per];
    for n in 0..g.batch {
        col2im(g, &dcol, ld, n * cols, &mut dx[n * in_per..(n + 1) * in_per]);
    }
    dx
}

/// Gradient w.r.t. the weight, given the saved column matrix (or the input,
/// when `saved` is empty).
pub fn conv2d_backward_weight(g: &ConvGeom, x: &[f64], saved: &[f64], dy: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let ld = g.batch * cols;
    let rebuilt;
    let col: &[f64] = if saved.is_empty() {
        rebuilt = batch_cols(g, x);
        &rebuilt
    } else {
        saved
    };
    let dy = nchw_to_channel_major(g.batch, g.out_ch, cols, dy);
    let mut dw = vec![0.0; g.out_ch * rows];
    gemm(g.out_ch, ld, rows, &dy, false, col, true, &mut dw, 1.0, 0.0);
    dw
}

/// Non-overlapping max pooling (`stride == kernel`). Returns output and argmax
/// indices into the input.
pub fn maxpool_forward(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * w + ox * k + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn avgpool_forward(n: usize, c: usize, h: usize, w: usize, k: usize, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ky in 0..k {
                    let row = base + (oy * k + ky) * w + ox * k;
                    s += x[row..row + k].iter().sum::<f64>();
                }
                y.push(s * inv);
            }
        }
    }
    y
}

pub fn avgpool_backward(n: usize, c: usize, h: usize, w: usize, k: usize, dy: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[plane * ho * wo + oy * wo + ox] * inv;
                for ky in 0..k {
                    let row = base + (oy * k + ky) * w + ox * k;
                    for v in &mut dx[row..row + k] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance of an NCHW (or NC) buffer.
pub fn channel_moments(n: usize, c: usize, spatial: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            s += x[base..base + spatial].iter().sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            ss += x[base..base + spatial]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

/// Row-wise softmax of an `[rows, cols]` buffer.
pub fn softmax_rows(cols: usize, z: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(z.len());
    for row in z.chunks(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = p.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            p.push(e);
        }
        for v in &mut p[start..] {
            *v /= s;
        }
    }
    p
}

/// Row-wise log-sum-exp.
pub fn logsumexp_rows(cols: usize, z: &[f64]) -> Vec<f64> {
    z.chunks(cols)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}
