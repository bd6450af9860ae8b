//! Numeric kernels behind the layers. All activations are batch-major and
//! channels-last; convolutions and pooling treat 1-D inputs as `H = 1`.
//!
//! Parallel loops split work over samples. Reductions over the batch are
//! summed per fixed-size chunk and then folded in chunk order, so results do
//! not depend on the number of worker threads.

use rayon::prelude::*;

/// Samples per partial gradient in batch reductions.
const REDUCE_CHUNK: usize = 4;

/// `C = A·B + beta·C` for an `m×k` A and a `k×n` B given by row/column strides.
/// C is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_row: isize,
    a_col: isize,
    b: &[f64],
    b_row: isize,
    b_col: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, a_row, a_col), "gemm lhs too small");
    assert!(b.len() >= span(k, n, b_row, b_col), "gemm rhs too small");
    // SAFETY: bounds of all three operands were checked above and the
    // output does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_row,
            a_col,
            b.as_ptr(),
            b_row,
            b_col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 convolution geometry over an `h × w × c` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, c: usize, kh: usize, kw: usize, f: usize, same: bool) -> Self {
        if same {
            ConvGeom {
                h,
                w,
                c,
                kh,
                kw,
                f,
                oh: h,
                ow: w,
                pad_top: (kh - 1) / 2,
                pad_left: (kw - 1) / 2,
            }
        } else {
            ConvGeom {
                h,
                w,
                c,
                kh,
                kw,
                f,
                oh: h + 1 - kh,
                ow: w + 1 - kw,
                pad_top: 0,
                pad_left: 0,
            }
        }
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.c
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow * self.f
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    fn col_width(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        let cw = self.col_width();
        for oy in 0..self.oh {
            for ky in 0..self.kh {
                let iy = oy as isize + ky as isize - self.pad_top as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for ox in 0..self.ow {
                    let row = &mut col[(oy * self.ow + ox) * cw..];
                    for kx in 0..self.kw {
                        let ix = ox as isize + kx as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.c;
                        let dst = (ky * self.kw + kx) * self.c;
                        row[dst..dst + self.c].copy_from_slice(&x[src..src + self.c]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let cw = self.col_width();
        for oy in 0..self.oh {
            for ky in 0..self.kh {
                let iy = oy as isize + ky as isize - self.pad_top as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for ox in 0..self.ow {
                    let row = &col[(oy * self.ow + ox) * cw..];
                    for kx in 0..self.kw {
                        let ix = ox as isize + kx as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.c;
                        let src = (ky * self.kw + kx) * self.c;
                        for (d, s) in dx[dst..dst + self.c].iter_mut().zip(&row[src..src + self.c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation plus bias; kernel is `[kh, kw, c, f]`.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let batch = x.len() / g.in_len();
    let mut out = vec![0.0; batch * g.out_len()];
    let (rows, cw) = (g.rows(), g.col_width());
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each_init(
            || vec![0.0; rows * cw],
            |col, (y, xs)| {
                g.im2col(xs, col);
                gemm(rows, cw, g.f, col, cw as isize, 1, kernel, g.f as isize, 1, 0.0, y);
                for r in y.chunks_exact_mut(g.f) {
                    for (v, b) in r.iter_mut().zip(bias) {
                        *v += b;
                    }
                }
            },
        );
    out
}

pub(crate) struct ConvGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let batch = x.len() / g.in_len();
    let (rows, cw, f) = (g.rows(), g.col_width(), g.f);
    let (in_len, out_len) = (g.in_len(), g.out_len());

    let chunk_grads = |xs: &[f64], dys: &[f64], mut dxs: Option<&mut [f64]>| {
        let mut dk = vec![0.0; cw * f];
        let mut db = vec![0.0; f];
        let mut col = vec![0.0; rows * cw];
        let mut dcol = if dxs.is_some() { vec![0.0; rows * cw] } else { Vec::new() };
        for (s, (xs, dys)) in xs.chunks(in_len).zip(dys.chunks(out_len)).enumerate() {
            g.im2col(xs, &mut col);
            // dK += colᵀ · dY
            gemm(cw, rows, f, &col, 1, cw as isize, dys, f as isize, 1, 1.0, &mut dk);
            for r in dys.chunks_exact(f) {
                for (acc, v) in db.iter_mut().zip(r) {
                    *acc += v;
                }
            }
            if let Some(dx) = dxs.as_deref_mut() {
                // dcol = dY · Kᵀ
                gemm(rows, f, cw, dys, f as isize, 1, kernel, 1, f as isize, 0.0, &mut dcol);
                g.col2im(&dcol, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        (dk, db)
    };

    let mut dx = need_input_grad.then(|| vec![0.0; batch * in_len]);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(REDUCE_CHUNK * in_len)
            .zip(x.par_chunks(REDUCE_CHUNK * in_len))
            .zip(dy.par_chunks(REDUCE_CHUNK * out_len))
            .map(|((dxs, xs), dys)| chunk_grads(xs, dys, Some(dxs)))
            .collect(),
        None => x
            .par_chunks(REDUCE_CHUNK * in_len)
            .zip(dy.par_chunks(REDUCE_CHUNK * out_len))
            .map(|(xs, dys)| chunk_grads(xs, dys, None))
            .collect(),
    };
    let mut kernel_grad = vec![0.0; cw * f];
    let mut bias_grad = vec![0.0; f];
    for (dk, db) in partials {
        kernel_grad.iter_mut().zip(&dk).for_each(|(a, b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    }
    ConvGrads {
        kernel: kernel_grad,
        bias: bias_grad,
        input: dx,
    }
}

/// Max-pooling geometry over an `h × w × c` sample. With `same` padding the
/// output is `ceil(in / stride)` and padded cells never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl PoolGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(h: usize, w: usize, c: usize, ph: usize, pw: usize, sh: usize, sw: usize, same: bool) -> Self {
        let dim = |len: usize, pool: usize, stride: usize| {
            if same {
                let out = len.div_ceil(stride);
                let pad = ((out - 1) * stride + pool).saturating_sub(len);
                (out, pad / 2)
            } else {
                ((len - pool) / stride + 1, 0)
            }
        };
        let (oh, pad_top) = dim(h, ph, sh);
        let (ow, pad_left) = dim(w, pw, sw);
        PoolGeom {
            h,
            w,
            c,
            ph,
            pw,
            sh,
            sw,
            oh,
            ow,
            pad_top,
            pad_left,
        }
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.c
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow * self.c
    }
}

/// Returns pooled values and, per output cell, the flat in-sample index of the winner.
pub(crate) fn pool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let batch = x.len() / g.in_len();
    let mut y = vec![0.0; batch * g.out_len()];
    let mut arg = vec![0u32; batch * g.out_len()];
    y.par_chunks_mut(g.out_len())
        .zip(arg.par_chunks_mut(g.out_len()))
        .zip(x.par_chunks(g.in_len()))
        .for_each(|((ys, args), xs)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for ch in 0..g.c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for ky in 0..g.ph {
                            let iy = (oy * g.sh + ky) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.pw {
                                let ix = (ox * g.sw + kx) as isize - g.pad_left as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let i = (iy as usize * g.w + ix as usize) * g.c + ch;
                                if best_i == usize::MAX || xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = (oy * g.ow + ox) * g.c + ch;
                        ys[o] = best;
                        args[o] = best_i as u32;
                    }
                }
            }
        });
    (y, arg)
}

pub(crate) fn pool_backward(g: &PoolGeom, dy: &[f64], arg: &[u32]) -> Vec<f64> {
    let batch = dy.len() / g.out_len();
    let mut dx = vec![0.0; batch * g.in_len()];
    dx.par_chunks_mut(g.in_len())
        .zip(dy.par_chunks(g.out_len()))
        .zip(arg.par_chunks(g.out_len()))
        .for_each(|((dxs, dys), args)| {
            for (d, a) in dys.iter().zip(args) {
                dxs[*a as usize] += d;
            }
        });
    dx
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNormTrace {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalises with batch statistics over every axis but the last.
pub(crate) fn batchnorm_train(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, BatchNormTrace) {
    let n = (x.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((xr, hr), yr) in x
        .chunks_exact(channels)
        .zip(xhat.chunks_exact_mut(channels))
        .zip(y.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            hr[c] = (xr[c] - mean[c]) * inv_std[c];
            yr[c] = gamma[c] * hr[c] + beta[c];
        }
    }
    (
        y,
        BatchNormTrace {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub(crate) fn batchnorm_infer(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let scale: Vec<f64> = (0..channels).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(channels).zip(y.chunks_exact_mut(channels)) {
        for c in 0..channels {
            yr[c] = (xr[c] - mean[c]) * scale[c] + beta[c];
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward(
    dy: &[f64],
    trace: &BatchNormTrace,
    gamma: &[f64],
    channels: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (dy.len() / channels) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (dr, hr) in dy.chunks_exact(channels).zip(trace.xhat.chunks_exact(channels)) {
        for c in 0..channels {
            dgamma[c] += dr[c] * hr[c];
            dbeta[c] += dr[c];
        }
    }
    // with dxhat = dy·γ:  Σdxhat = γ·dβ and Σ dxhat·xhat = γ·dγ
    let mut dx = vec![0.0; dy.len()];
    for ((dr, hr), xr) in dy
        .chunks_exact(channels)
        .zip(trace.xhat.chunks_exact(channels))
        .zip(dx.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            let g = gamma[c];
            xr[c] = trace.inv_std[c] / n * (n * dr[c] * g - g * dbeta[c] - hr[c] * g * dgamma[c]);
        }
    }
    (dx, dgamma, dbeta)
}

/// `y = x·W + b` for `x: [batch, in]`, `W: [in, out]`.
pub(crate) fn dense_forward(x: &[f64], inputs: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let outputs = bias.len();
    let batch = x.len() / inputs;
    let mut y = vec![0.0; batch * outputs];
    gemm(batch, inputs, outputs, x, inputs as isize, 1, weight, outputs as isize, 1, 0.0, &mut y);
    for r in y.chunks_exact_mut(outputs) {
        r.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

/// Returns `(dW, db, dx)`.
pub(crate) fn dense_backward(
    x: &[f64],
    inputs: usize,
    weight: &[f64],
    dy: &[f64],
    outputs: usize,
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let batch = x.len() / inputs;
    let mut dw = vec![0.0; inputs * outputs];
    gemm(inputs, batch, outputs, x, 1, inputs as isize, dy, outputs as isize, 1, 0.0, &mut dw);
    let mut db = vec![0.0; outputs];
    for r in dy.chunks_exact(outputs) {
        db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let dx = need_input_grad.then(|| {
        let mut dx = vec![0.0; batch * inputs];
        gemm(batch, outputs, inputs, dy, outputs as isize, 1, weight, 1, outputs as isize, 0.0, &mut dx);
        dx
    });
    (dw, db, dx)
}

/// Max-subtracted softmax over the last axis.
pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        yr.iter_mut().for_each(|o| *o /= sum);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, 2, 1, &b, 2, 1, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // Aᵀ·B
        gemm(2, 2, 2, &a, 1, 2, &b, 2, 1, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // A·Bᵀ accumulated onto the previous result
        gemm(2, 2, 2, &a, 2, 1, &b, 1, 2, 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn same_padding_offsets_match_keras() {
        let g = ConvGeom::new(1, 400, 4, 1, 10, 40, true);
        assert_eq!((g.oh, g.ow, g.pad_left), (1, 400, 4));
        let v = ConvGeom::new(19, 25, 64, 7, 7, 32, false);
        assert_eq!((v.oh, v.ow), (13, 19));
    }

    #[test]
    fn pool_same_padding_keeps_length() {
        let g = PoolGeom::new(1, 400, 8, 1, 3, 1, 1, true);
        assert_eq!((g.oh, g.ow, g.pad_left), (1, 400, 1));
        let f = PoolGeom::new(39, 51, 64, 2, 2, 2, 2, false);
        assert_eq!((f.oh, f.ow), (19, 25));
    }
}
