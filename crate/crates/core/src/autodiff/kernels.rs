//! Raw numeric kernels shared by forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`; when `trans_a` the buffer holds `a` as `k x m`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k, "gemm lhs too short");
    assert!(b.len() >= k * n, "gemm rhs too short");
    assert!(c.len() >= m * n, "gemm output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|d| *d = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + v) as isize - g.pad as isize;
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

/// Adjoint of [`im2col`]: scatter-adds columns back into `[C, H, W]`.
pub fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + v) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output row range `[lo, hi)` for which `y + u - r` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, u: usize, r: usize) -> (usize, usize) {
    let lo = r.saturating_sub(u);
    let hi = (n + r).saturating_sub(u).min(n);
    (lo, hi.max(lo))
}

/// Same-padded depthwise correlation of one `[H, W]` plane with one `k x k`
/// filter, accumulated into `out`.
pub fn depthwise_plane(x: &[f64], h: usize, w: usize, filter: &[f64], k: usize, out: &mut [f64]) {
    let r = k / 2;
    for u in 0..k {
        let (ylo, yhi) = valid_range(h, u, r);
        for v in 0..k {
            let f = filter[u * k + v];
            if f == 0.0 {
                continue;
            }
            let (xlo, xhi) = valid_range(w, v, r);
            for y in ylo..yhi {
                let iy = y + u - r;
                let src = &x[iy * w + xlo + v - r..iy * w + xhi + v - r];
                let dst = &mut out[y * w + xlo..y * w + xhi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += f * s;
                }
            }
        }
    }
}

/// Backward of [`depthwise_plane`]: accumulates into `dx` and `dfilter`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_plane_backward(
    x: &[f64],
    h: usize,
    w: usize,
    filter: &[f64],
    k: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dfilter: Option<&mut [f64]>,
) {
    let r = k / 2;
    if let Some(dx) = dx {
        for u in 0..k {
            let (ylo, yhi) = valid_range(h, u, r);
            for v in 0..k {
                let f = filter[u * k + v];
                if f == 0.0 {
                    continue;
                }
                let (xlo, xhi) = valid_range(w, v, r);
                for y in ylo..yhi {
                    let iy = y + u - r;
                    let src = &dout[y * w + xlo..y * w + xhi];
                    let dst = &mut dx[iy * w + xlo + v - r..iy * w + xhi + v - r];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += f * s;
                    }
                }
            }
        }
    }
    if let Some(df) = dfilter {
        for u in 0..k {
            let (ylo, yhi) = valid_range(h, u, r);
            for v in 0..k {
                let (xlo, xhi) = valid_range(w, v, r);
                let mut acc = 0.0;
                for y in ylo..yhi {
                    let iy = y + u - r;
                    let xs = &x[iy * w + xlo + v - r..iy * w + xhi + v - r];
                    let ds = &dout[y * w + xlo..y * w + xhi];
                    acc += xs.iter().zip(ds).map(|(a, b)| a * b).sum::<f64>();
                }
                df[u * k + v] += acc;
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for half-pixel-centred bilinear resampling of
/// an axis of length `n` by integer `factor`.
pub fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
}
