//! Unnormalised complex DFT kernels.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley–Tukey transform;
//! every other length falls back to the direct O(n²) sum with a root table.

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `exp(-2πi ·)` kernel.
    Forward,
    /// `exp(+2πi ·)` kernel, without the `1/n` factor.
    Inverse,
}

#[derive(Clone, Debug)]
pub struct Fft1d {
    n: usize,
    // exp(-2πi k / n) for k in 0..n
    roots_re: Vec<f64>,
    roots_im: Vec<f64>,
    bitrev: Option<Vec<usize>>,
}

impl Fft1d {
    pub fn new(n: usize) -> Self {
        assert!(n > 0);
        let (roots_re, roots_im) = (0..n)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        let bitrev = n.is_power_of_two().then(|| {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect()
        });
        Fft1d {
            n,
            roots_re,
            roots_im,
            bitrev,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Transforms `re`/`im` (length n) in place. `scratch` must hold 2n values.
    pub fn process(&self, re: &mut [f64], im: &mut [f64], dir: Direction, scratch: &mut Vec<f64>) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        if n == 1 {
            return;
        }
        let sign = match dir {
            Direction::Forward => 1.0,
            Direction::Inverse => -1.0,
        };
        match &self.bitrev {
            Some(rev) => {
                for i in 0..n {
                    let j = rev[i];
                    if i < j {
                        re.swap(i, j);
                        im.swap(i, j);
                    }
                }
                let mut len = 2;
                while len <= n {
                    let half = len / 2;
                    let step = n / len;
                    for start in (0..n).step_by(len) {
                        for j in 0..half {
                            let wr = self.roots_re[j * step];
                            let wi = sign * self.roots_im[j * step];
                            let a = start + j;
                            let b = a + half;
                            let vr = re[b] * wr - im[b] * wi;
                            let vi = re[b] * wi + im[b] * wr;
                            re[b] = re[a] - vr;
                            im[b] = im[a] - vi;
                            re[a] += vr;
                            im[a] += vi;
                        }
                    }
                    len *= 2;
                }
            }
            None => {
                scratch.clear();
                scratch.resize(2 * n, 0.0);
                let (out_re, out_im) = scratch.split_at_mut(n);
                for m in 0..n {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for j in 0..n {
                        let idx = (j * m) % n;
                        let wr = self.roots_re[idx];
                        let wi = sign * self.roots_im[idx];
                        sr += re[j] * wr - im[j] * wi;
                        si += re[j] * wi + im[j] * wr;
                    }
                    out_re[m] = sr;
                    out_im[m] = si;
                }
                re.copy_from_slice(out_re);
                im.copy_from_slice(out_im);
            }
        }
    }
}

/// Separable 2D transform over `h x w` planes.
#[derive(Clone, Debug)]
pub struct Fft2Plan {
    h: usize,
    w: usize,
    rows: Fft1d,
    cols: Fft1d,
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Self {
        Fft2Plan {
            h,
            w,
            rows: Fft1d::new(w),
            cols: Fft1d::new(h),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Transforms every consecutive `h*w` plane of `re`/`im` in place.
    pub fn process(&self, re: &mut [f64], im: &mut [f64], dir: Direction) {
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        assert_eq!(re.len() % plane, 0);
        assert_eq!(re.len(), im.len());
        let mut scratch = Vec::new();
        let mut col_re = vec![0.0; h];
        let mut col_im = vec![0.0; h];
        for (pre, pim) in re.chunks_mut(plane).zip(im.chunks_mut(plane)) {
            for (rr, ri) in pre.chunks_mut(w).zip(pim.chunks_mut(w)) {
                self.rows.process(rr, ri, dir, &mut scratch);
            }
            if h > 1 {
                for x in 0..w {
                    for y in 0..h {
                        col_re[y] = pre[y * w + x];
                        col_im[y] = pim[y * w + x];
                    }
                    self.cols.process(&mut col_re, &mut col_im, dir, &mut scratch);
                    for y in 0..h {
                        pre[y * w + x] = col_re[y];
                        pim[y * w + x] = col_im[y];
                    }
                }
            }
        }
    }
}

/// One-shot in-place transform of all trailing `h x w` planes.
pub fn fft2_planes(re: &mut [f64], im: &mut [f64], h: usize, w: usize, dir: Direction) {
    Fft2Plan::new(h, w).process(re, im, dir);
}
