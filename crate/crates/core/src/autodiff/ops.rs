use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{GradSink, Node, Var};
use crate::error::{invalid_shape, shape_mismatch, Error, Result};
use crate::spectral::fft::{Direction, Fft2Plan};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Neg,
    Square,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Neg => -x,
            UnaryKind::Square => x * x,
            UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Neg => -1.0,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// `x * s` with `s` a one-element tensor.
    ScaleBy(usize, usize),
    Unary(usize, UnaryKind),
    Sum(usize),
    Mean(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: usize,
        w: usize,
        bias: Option<usize>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        eps: f64,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        /// Geometry of the output image viewed as the input of the adjoint
        /// convolution.
        geom: ConvGeom,
        batch: usize,
        c_in: usize,
    },
    DepthwiseBank {
        x: usize,
        filters: usize,
        planes: usize,
        m: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Fft2 {
        x: usize,
        h: usize,
        w: usize,
        dir: Direction,
        scale: f64,
    },
    ComplexFromReal(usize),
    RealPart(usize),
    ComplexMulKernel {
        z: usize,
        kre: usize,
        kim: usize,
        batch: usize,
        plane: usize,
    },
    Upsample {
        x: usize,
        factor: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ScaleBy(a, b) => vec![*a, *b],
            AddScalar(a) | MulScalar(a, _) | Unary(a, _) | Sum(a) | Mean(a) | Reshape(a)
            | ComplexFromReal(a) | RealPart(a) => vec![*a],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } => vec![*a, *b],
            Linear { x, w, bias, .. }
            | Conv2d { x, w, bias, .. }
            | ConvTranspose2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Softmax { x, .. } | Gather { x, .. } | Fft2 { x, .. } | Upsample { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            DepthwiseBank { x, filters, .. } => vec![*x, *filters],
            Concat { inputs, .. } => inputs.clone(),
            ComplexMulKernel { z, kre, kim, .. } => vec![*z, *kre, *kim],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], nodes: &[Node], sink: &mut GradSink) {
        let val = |id: usize| -> &Tensor { &nodes[id].value };
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(d) = sink.slot(id) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = sink.slot(*a) {
                    axpy(d, g, 1.0);
                }
                if let Some(d) = sink.slot(*b) {
                    axpy(d, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(d) = sink.slot(*a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if let Some(d) = sink.slot(*b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(d) = sink.slot(*a) {
                    for i in 0..d.len() {
                        d[i] += g[i] / vb[i];
                    }
                }
                if let Some(d) = sink.slot(*b) {
                    for i in 0..d.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = sink.slot(*a) {
                    axpy(d, g, 1.0);
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(d) = sink.slot(*a) {
                    axpy(d, g, *s);
                }
            }
            Op::ScaleBy(x, s) => {
                let (vx, vs) = (val(*x).data(), val(*s).item());
                if let Some(d) = sink.slot(*x) {
                    axpy(d, g, vs);
                }
                if let Some(d) = sink.slot(*s) {
                    d[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Unary(a, kind) => {
                let vx = val(*a).data();
                let vy = out.data();
                if let Some(d) = sink.slot(*a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * kind.derivative(vx[i], vy[i]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = sink.slot(*a) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = sink.slot(*a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if let Some(d) = sink.slot(*a) {
                    // dA = dC · Bᵀ
                    kernels::gemm(*m, *n, *k, g, false, vb, true, d, 1.0);
                }
                if let Some(d) = sink.slot(*b) {
                    // dB = Aᵀ · dC
                    kernels::gemm(*k, *m, *n, va, true, g, false, d, 1.0);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(d) = sink.slot(*a) {
                    for i in 0..*batch {
                        let gb = &g[i * sc..(i + 1) * sc];
                        let bb = &vb[i * sb..(i + 1) * sb];
                        // dA = dC · op(B)ᵀ
                        kernels::gemm(*m, *n, *k, gb, false, bb, !trans_b, &mut d[i * sa..(i + 1) * sa], 1.0);
                    }
                }
                if let Some(d) = sink.slot(*b) {
                    for i in 0..*batch {
                        let gb = &g[i * sc..(i + 1) * sc];
                        let ab = &va[i * sa..(i + 1) * sa];
                        let db = &mut d[i * sb..(i + 1) * sb];
                        if *trans_b {
                            // B stored n x k: dB = dCᵀ · A
                            kernels::gemm(*n, *m, *k, gb, true, ab, false, db, 1.0);
                        } else {
                            kernels::gemm(*k, *m, *n, ab, true, gb, false, db, 1.0);
                        }
                    }
                }
            }
            Op::Linear {
                x,
                w,
                bias,
                rows,
                k,
                n,
            } => {
                let (vx, vw) = (val(*x).data(), val(*w).data());
                if let Some(d) = sink.slot(*x) {
                    kernels::gemm(*rows, *n, *k, g, false, vw, true, d, 1.0);
                }
                if let Some(d) = sink.slot(*w) {
                    kernels::gemm(*k, *rows, *n, vx, true, g, false, d, 1.0);
                }
                if let Some(b) = bias {
                    if let Some(d) = sink.slot(*b) {
                        for row in g.chunks(*n) {
                            axpy(d, row, 1.0);
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let y = out.data();
                if let Some(d) = sink.slot(*x) {
                    for ((dr, gr), yr) in d.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..*cols {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                eps,
            } => {
                let vx = val(*x).data();
                let vg = val(*gamma).data();
                let c = *cols;
                let rows = vx.len() / c;
                let mut xhat = vec![0.0; vx.len()];
                let mut rstd = vec![0.0; rows];
                for r in 0..rows {
                    let row = &vx[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    rstd[r] = 1.0 / (var + eps).sqrt();
                    for i in 0..c {
                        xhat[r * c + i] = (row[i] - mean) * rstd[r];
                    }
                }
                if let Some(d) = sink.slot(*gamma) {
                    for r in 0..rows {
                        for i in 0..c {
                            d[i] += g[r * c + i] * xhat[r * c + i];
                        }
                    }
                }
                if let Some(d) = sink.slot(*beta) {
                    for row in g.chunks(c) {
                        axpy(d, row, 1.0);
                    }
                }
                if let Some(d) = sink.slot(*x) {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        for i in 0..c {
                            dxhat[i] = g[r * c + i] * vg[i];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[r * c..(r + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for i in 0..c {
                            d[r * c + i] += rstd[r] * (dxhat[i] - mean_d - xhat[r * c + i] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                c_out,
            } => {
                let (vx, vw) = (val(*x).data(), val(*w).data());
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let out_sz = c_out * cols;
                let pointwise = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
                let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * cols] };
                let mut dcol = vec![0.0; if pointwise { 0 } else { rows * cols }];
                let need_x = nodes[*x].tracked;
                let need_w = nodes[*w].tracked;
                for b in 0..*batch {
                    let xb = &vx[b * in_sz..(b + 1) * in_sz];
                    let gb = &g[b * out_sz..(b + 1) * out_sz];
                    if need_w {
                        let colref: &[f64] = if pointwise {
                            xb
                        } else {
                            kernels::im2col(xb, geom, &mut col);
                            &col
                        };
                        let d = sink.slot(*w).unwrap();
                        kernels::gemm(*c_out, cols, rows, gb, false, colref, true, d, 1.0);
                    }
                    if need_x {
                        let d = sink.slot(*x).unwrap();
                        let db = &mut d[b * in_sz..(b + 1) * in_sz];
                        if pointwise {
                            kernels::gemm(rows, *c_out, cols, vw, true, gb, false, db, 1.0);
                        } else {
                            kernels::gemm(rows, *c_out, cols, vw, true, gb, false, &mut dcol, 0.0);
                            kernels::col2im(&dcol, geom, db);
                        }
                    }
                }
                if let Some(bi) = bias {
                    if let Some(d) = sink.slot(*bi) {
                        for b in 0..*batch {
                            for (c, dc) in d.iter_mut().enumerate() {
                                let s = b * out_sz + c * cols;
                                *dc += g[s..s + cols].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                geom,
                batch,
                c_in,
            } => {
                // Forward was: col = Wᵀ·X, out = col2im(col). Adjoint uses im2col.
                let (vx, vw) = (val(*x).data(), val(*w).data());
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let c_out = geom.channels;
                let in_sz = c_in * cols;
                let out_sz = c_out * geom.height * geom.width;
                let mut gcol = vec![0.0; rows * cols];
                for b in 0..*batch {
                    let gb = &g[b * out_sz..(b + 1) * out_sz];
                    kernels::im2col(gb, geom, &mut gcol);
                    if let Some(d) = sink.slot(*x) {
                        kernels::gemm(*c_in, rows, cols, vw, false, &gcol, false, &mut d[b * in_sz..(b + 1) * in_sz], 1.0);
                    }
                    if let Some(d) = sink.slot(*w) {
                        let xb = &vx[b * in_sz..(b + 1) * in_sz];
                        kernels::gemm(*c_in, cols, rows, xb, false, &gcol, true, d, 1.0);
                    }
                }
                if let Some(bi) = bias {
                    if let Some(d) = sink.slot(*bi) {
                        let plane = geom.height * geom.width;
                        for b in 0..*batch {
                            for (c, dc) in d.iter_mut().enumerate() {
                                let s = b * out_sz + c * plane;
                                *dc += g[s..s + plane].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::DepthwiseBank {
                x,
                filters,
                planes,
                m,
                h,
                w,
                k,
            } => {
                let (vx, vf) = (val(*x).data(), val(*filters).data());
                let plane = h * w;
                let kk = k * k;
                let need_x = nodes[*x].tracked;
                let need_f = nodes[*filters].tracked;
                let mut df_local = vec![0.0; if need_f { m * kk } else { 0 }];
                for p in 0..*planes {
                    let xp = &vx[p * plane..(p + 1) * plane];
                    for j in 0..*m {
                        let gp = &g[(p * m + j) * plane..(p * m + j + 1) * plane];
                        let f = &vf[j * kk..(j + 1) * kk];
                        let dx = if need_x {
                            Some(&mut sink.slot(*x).unwrap()[p * plane..(p + 1) * plane])
                        } else {
                            None
                        };
                        let dfj = if need_f {
                            Some(&mut df_local[j * kk..(j + 1) * kk])
                        } else {
                            None
                        };
                        kernels::depthwise_plane_backward(xp, *h, *w, f, *k, gp, dx, dfj);
                    }
                }
                if need_f {
                    axpy(sink.slot(*filters).unwrap(), &df_local, 1.0);
                }
            }
            Op::Gather { x, index } => {
                if let Some(d) = sink.slot(*x) {
                    for (gi, &src) in g.iter().zip(index.iter()) {
                        d[src] += gi;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = sink.slot(*a) {
                    axpy(d, g, 1.0);
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&id, &chunk) in inputs.iter().zip(chunks) {
                    if let Some(d) = sink.slot(id) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            axpy(&mut d[o * chunk..(o + 1) * chunk], src, 1.0);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Fft2 {
                x,
                h,
                w,
                dir,
                scale,
            } => {
                // The adjoint of the DFT matrix is its conjugate: swap direction.
                if let Some(d) = sink.slot(*x) {
                    let half = g.len() / 2;
                    let mut re = g[..half].to_vec();
                    let mut im = g[half..].to_vec();
                    let adj = match dir {
                        Direction::Forward => Direction::Inverse,
                        Direction::Inverse => Direction::Forward,
                    };
                    Fft2Plan::new(*h, *w).process(&mut re, &mut im, adj);
                    axpy(&mut d[..half], &re, *scale);
                    axpy(&mut d[half..], &im, *scale);
                }
            }
            Op::ComplexFromReal(a) => {
                if let Some(d) = sink.slot(*a) {
                    let n = d.len();
                    axpy(d, &g[..n], 1.0);
                }
            }
            Op::RealPart(a) => {
                if let Some(d) = sink.slot(*a) {
                    let n = g.len();
                    axpy(&mut d[..n], g, 1.0);
                }
            }
            Op::ComplexMulKernel {
                z,
                kre,
                kim,
                batch,
                plane,
            } => {
                let vz = val(*z).data();
                let (vr, vi) = (val(*kre).data(), val(*kim).data());
                let half = vz.len() / 2;
                let (zr, zi) = vz.split_at(half);
                let (gr, gi) = g.split_at(half);
                if let Some(d) = sink.slot(*z) {
                    // dz = conj(k) * g
                    for b in 0..*batch {
                        for i in 0..*plane {
                            let j = b * plane + i;
                            d[j] += vr[i] * gr[j] + vi[i] * gi[j];
                            d[half + j] += vr[i] * gi[j] - vi[i] * gr[j];
                        }
                    }
                }
                // dk = sum_b conj(z) * g
                if let Some(d) = sink.slot(*kre) {
                    for b in 0..*batch {
                        for i in 0..*plane {
                            let j = b * plane + i;
                            d[i] += zr[j] * gr[j] + zi[j] * gi[j];
                        }
                    }
                }
                if let Some(d) = sink.slot(*kim) {
                    for b in 0..*batch {
                        for i in 0..*plane {
                            let j = b * plane + i;
                            d[i] += zr[j] * gi[j] - zi[j] * gr[j];
                        }
                    }
                }
            }
            Op::Upsample {
                x,
                factor,
                planes,
                h,
                w,
            } => {
                if let Some(d) = sink.slot(*x) {
                    let ty = kernels::bilinear_taps(*h, *factor);
                    let tx = kernels::bilinear_taps(*w, *factor);
                    let (oh, ow) = (h * factor, w * factor);
                    for p in 0..*planes {
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                                dp[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves the spatial extent (odd kernels only).
    Same,
    Valid,
}

impl<'g> Var<'g> {
    fn push(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op)
    }

    fn binary(&self, other: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_mismatch(name, a.shape(), b.shape()));
        }
        a.zip_map(&b, f)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.push(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.push(v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::DivisionByZero("div"));
        }
        let v = self.binary(other, "div", |a, b| a / b)?;
        Ok(self.push(v, Op::Div(self.id, other.id)))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|a| a + s);
        self.push(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|a| a * s);
        self.push(v, Op::MulScalar(self.id, s))
    }

    pub fn div_scalar(&self, s: f64) -> Result<Var<'g>> {
        if s == 0.0 {
            return Err(Error::DivisionByZero("div_scalar"));
        }
        Ok(self.mul_scalar(1.0 / s))
    }

    /// Multiplies every element by the one-element tensor `s`.
    pub fn scale_by(&self, s: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(s);
        let sv = s.value();
        if sv.len() != 1 {
            return Err(invalid_shape("scale_by", sv.shape(), "scale must have one element"));
        }
        let k = sv.item();
        let v = self.value().map(|a| a * k);
        Ok(self.push(v, Op::ScaleBy(self.id, s.id)))
    }

    pub fn unary(&self, kind: UnaryKind) -> Var<'g> {
        let v = self.value().map(|x| kind.apply(x));
        self.push(v, Op::Unary(self.id, kind))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(UnaryKind::Relu)
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(UnaryKind::Neg)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(UnaryKind::Square)
    }

    pub fn gelu(&self) -> Var<'g> {
        self.unary(UnaryKind::Gelu)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let s = self.value().mean();
        self.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        Ok(self.push(
            Tensor::new(&[m, n], c)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&self, other: &Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let bad = || shape_mismatch("batch_matmul", a.shape(), b.shape());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (kb, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut c[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, m, n], c)?,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// Row-wise affine map `x [rows, k] · w [k, n] + bias [n]`.
    pub fn linear(&self, w: &Var<'g>, bias: Option<&Var<'g>>) -> Result<Var<'g>> {
        self.same_graph(w);
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 2 || wv.rank() != 2 || x.shape()[1] != wv.shape()[0] {
            return Err(shape_mismatch("linear", x.shape(), wv.shape()));
        }
        let (rows, k, n) = (x.shape()[0], x.shape()[1], wv.shape()[1]);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [n] {
                return Err(shape_mismatch("linear bias", bv.shape(), &[n]));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(rows, k, n, x.data(), false, wv.data(), false, &mut out, 1.0);
        Ok(self.push(
            Tensor::new(&[rows, n], out)?,
            Op::Linear {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                rows,
                k,
                n,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'g> {
        let x = self.value();
        let cols = *x.shape().last().expect("softmax on rank-0 tensor");
        let mut out = vec![0.0; x.len()];
        kernels::softmax_rows(x.data(), cols, &mut out);
        self.push(
            Tensor::new(x.shape(), out).expect("shape"),
            Op::Softmax { x: self.id, cols },
        )
    }

    /// Normalises each row of `[rows, c]` to zero mean and unit variance, then
    /// applies the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(invalid_shape("layer_norm", x.shape(), "expected [rows, c]"));
        }
        let c = x.shape()[1];
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_mismatch("layer_norm affine", gv.shape(), &[c]));
        }
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                dst[i] = (row[i] - mean) * rstd * gv.data()[i] + bv.data()[i];
            }
        }
        Ok(self.push(
            Tensor::new(x.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                cols: c,
                eps,
            },
        ))
    }

    /// Cross-correlation of `[B, Ci, H, W]` with `[Co, Ci, k, k]`.
    pub fn conv2d(
        &self,
        kernel: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'g>> {
        self.same_graph(kernel);
        let (x, w) = (self.value(), kernel.value());
        if x.rank() != 4 || w.rank() != 4 {
            return Err(shape_mismatch("conv2d", x.shape(), w.shape()));
        }
        let (batch, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, wci, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wci != ci {
            return Err(shape_mismatch("conv2d channels", x.shape(), w.shape()));
        }
        if k != k2 {
            return Err(invalid_shape("conv2d", w.shape(), "kernel must be square"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(invalid_shape("conv2d", w.shape(), "same padding needs an odd kernel"));
                }
                k / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid_shape("conv2d", x.shape(), "input smaller than kernel"));
        }
        let geom = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_sz = ci * h * wd;
        let out_sz = co * cols;
        let mut out = vec![0.0; batch * out_sz];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [co] {
                return Err(shape_mismatch("conv2d bias", bv.shape(), &[co]));
            }
            for bi in 0..batch {
                for c in 0..co {
                    let s = bi * out_sz + c * cols;
                    out[s..s + cols].iter_mut().for_each(|v| *v = bv.data()[c]);
                }
            }
        }
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * cols] };
        for bi in 0..batch {
            let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
            let colref: &[f64] = if pointwise {
                xb
            } else {
                kernels::im2col(xb, &geom, &mut col);
                &col
            };
            kernels::gemm(co, rows, cols, w.data(), false, colref, false, &mut out[bi * out_sz..(bi + 1) * out_sz], 1.0);
        }
        Ok(self.push(
            Tensor::new(&[batch, co, geom.out_height(), geom.out_width()], out)?,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                batch,
                c_out: co,
            },
        ))
    }

    /// Transposed convolution of `[B, Ci, h, w]` with `[Ci, Co, k, k]`, no
    /// padding: output is `[B, Co, (h-1)s+k, (w-1)s+k]`.
    pub fn conv_transpose2d(&self, kernel: &Var<'g>, bias: Option<&Var<'g>>, stride: usize) -> Result<Var<'g>> {
        self.same_graph(kernel);
        let (x, w) = (self.value(), kernel.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0] || w.shape()[2] != w.shape()[3] {
            return Err(shape_mismatch("conv_transpose2d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d stride must be positive".into()));
        }
        let (batch, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (w.shape()[1], w.shape()[2]);
        let geom = ConvGeom {
            channels: co,
            height: (h - 1) * stride + k,
            width: (wd - 1) * stride + k,
            kernel: k,
            stride,
            pad: 0,
        };
        debug_assert_eq!(geom.col_cols(), h * wd);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let plane = geom.height * geom.width;
        let out_sz = co * plane;
        let in_sz = ci * cols;
        let mut out = vec![0.0; batch * out_sz];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [co] {
                return Err(shape_mismatch("conv_transpose2d bias", bv.shape(), &[co]));
            }
            for bi in 0..batch {
                for c in 0..co {
                    let s = bi * out_sz + c * plane;
                    out[s..s + plane].iter_mut().for_each(|v| *v = bv.data()[c]);
                }
            }
        }
        let mut col = vec![0.0; rows * cols];
        for bi in 0..batch {
            // W viewed as [Ci, Co*k*k]; col = Wᵀ · X
            kernels::gemm(rows, ci, cols, w.data(), true, &x.data()[bi * in_sz..(bi + 1) * in_sz], false, &mut col, 0.0);
            kernels::col2im(&col, &geom, &mut out[bi * out_sz..(bi + 1) * out_sz]);
        }
        Ok(self.push(
            Tensor::new(&[batch, co, geom.height, geom.width], out)?,
            Op::ConvTranspose2d {
                x: self.id,
                w: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                batch,
                c_in: ci,
            },
        ))
    }

    /// Applies each of `M` same-padded `k x k` filters to every channel of
    /// `[B, C, H, W]` independently. Output channel `c * M + m` holds filter
    /// `m` applied to input channel `c`.
    pub fn depthwise_bank(&self, filters: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(filters);
        let (x, f) = (self.value(), filters.value());
        if x.rank() != 4 || f.rank() != 3 || f.shape()[1] != f.shape()[2] {
            return Err(shape_mismatch("depthwise_bank", x.shape(), f.shape()));
        }
        let (m, k) = (f.shape()[0], f.shape()[1]);
        if k % 2 == 0 {
            return Err(invalid_shape("depthwise_bank", f.shape(), "filters must have odd size"));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h < k || w < k {
            return Err(invalid_shape("depthwise_bank", x.shape(), format!("field smaller than {k}x{k} kernel")));
        }
        let plane = h * w;
        let planes = b * c;
        let mut out = vec![0.0; planes * m * plane];
        for p in 0..planes {
            let xp = &x.data()[p * plane..(p + 1) * plane];
            for j in 0..m {
                let o = &mut out[(p * m + j) * plane..(p * m + j + 1) * plane];
                kernels::depthwise_plane(xp, h, w, &f.data()[j * k * k..(j + 1) * k * k], k, o);
            }
        }
        Ok(self.push(
            Tensor::new(&[b, c * m, h, w], out)?,
            Op::DepthwiseBank {
                x: self.id,
                filters: filters.id,
                planes,
                m,
                h,
                w,
                k,
            },
        ))
    }

    /// `out[i] = x[index[i]]` (flat indices) with the given output shape.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if numel(shape) != index.len() {
            return Err(invalid_shape("gather", shape, "index length mismatch"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::InvalidArgument(format!("gather index {bad} out of range {}", x.len())));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x: self.id, index }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(self.id)))
    }

    /// Generic axis permutation.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        if perm.len() != shape.len() || (0..shape.len()).any(|d| !perm.contains(&d)) {
            return Err(invalid_shape("permute", &shape, format!("bad permutation {perm:?}")));
        }
        let in_strides = crate::tensor::strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n = numel(&shape);
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Channels `[start, start+len)` of a `[B, C, ...]` tensor.
    pub fn narrow_axis1(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 || start + len > shape[1] || len == 0 {
            return Err(invalid_shape("narrow_axis1", &shape, format!("range {start}+{len}")));
        }
        let inner = numel(&shape[2..]);
        let mut index = Vec::with_capacity(shape[0] * len * inner);
        for b in 0..shape[0] {
            let base = (b * shape[1] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        self.gather(Rc::new(index), &out_shape)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g>(items: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let shape0 = first.shape();
    if axis >= shape0.len() {
        return Err(invalid_shape("concat", &shape0, format!("axis {axis} out of range")));
    }
    let outer = numel(&shape0[..axis]);
    let inner = numel(&shape0[axis + 1..]);
    let mut chunks = Vec::with_capacity(items.len());
    let mut values = Vec::with_capacity(items.len());
    let mut total_axis = 0;
    for v in items {
        first.same_graph(v);
        let s = v.shape();
        if s.len() != shape0.len()
            || s[..axis] != shape0[..axis]
            || s[axis + 1..] != shape0[axis + 1..]
        {
            return Err(shape_mismatch("concat", &shape0, &s));
        }
        chunks.push(s[axis] * inner);
        total_axis += s[axis];
        values.push(v.value());
    }
    let total: usize = chunks.iter().sum();
    let mut data = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (val, &chunk) in values.iter().zip(&chunks) {
            data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = shape0.clone();
    shape[axis] = total_axis;
    Ok(first.push(
        Tensor::new(&shape, data)?,
        Op::Concat {
            inputs: items.iter().map(|v| v.id).collect(),
            outer,
            chunks,
        },
    ))
}

// Complex-valued tensors inside the graph are packed as `[2, ...]`: real part
// first, imaginary part second.
impl<'g> Var<'g> {
    /// Packs a real tensor as a complex one with zero imaginary part.
    pub fn to_complex(&self) -> Var<'g> {
        let x = self.value();
        let mut data = x.data().to_vec();
        data.resize(2 * x.len(), 0.0);
        let mut shape = vec![2];
        shape.extend_from_slice(x.shape());
        self.push(Tensor::new(&shape, data).expect("shape"), Op::ComplexFromReal(self.id))
    }

    /// Real half of a packed complex tensor.
    pub fn real_part(&self) -> Result<Var<'g>> {
        let z = self.value();
        if z.rank() < 1 || z.shape()[0] != 2 {
            return Err(invalid_shape("real_part", z.shape(), "expected packed complex [2, ...]"));
        }
        let half = z.len() / 2;
        let t = Tensor::new(&z.shape()[1..], z.data()[..half].to_vec())?;
        Ok(self.push(t, Op::RealPart(self.id)))
    }

    /// Imaginary half of a packed complex tensor (not differentiable on its
    /// own; used for diagnostics).
    pub fn imag_values(&self) -> Result<Tensor> {
        let z = self.value();
        if z.rank() < 1 || z.shape()[0] != 2 {
            return Err(invalid_shape("imag_values", z.shape(), "expected packed complex [2, ...]"));
        }
        let half = z.len() / 2;
        Tensor::new(&z.shape()[1..], z.data()[half..].to_vec())
    }

    /// 2D DFT over the two trailing axes of a packed complex tensor.
    /// `Inverse` includes the `1/(h w)` normalisation.
    pub fn fft2(&self, dir: Direction) -> Result<Var<'g>> {
        let z = self.value();
        if z.rank() < 3 || z.shape()[0] != 2 {
            return Err(invalid_shape("fft2", z.shape(), "expected packed complex [2, ..., h, w]"));
        }
        z.check_finite("fft2 input")?;
        let r = z.rank();
        let (h, w) = (z.shape()[r - 2], z.shape()[r - 1]);
        let half = z.len() / 2;
        let mut re = z.data()[..half].to_vec();
        let mut im = z.data()[half..].to_vec();
        Fft2Plan::new(h, w).process(&mut re, &mut im, dir);
        let scale = match dir {
            Direction::Forward => 1.0,
            Direction::Inverse => 1.0 / (h * w) as f64,
        };
        if scale != 1.0 {
            re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
        }
        re.extend_from_slice(&im);
        Ok(self.push(
            Tensor::new(z.shape(), re)?,
            Op::Fft2 {
                x: self.id,
                h,
                w,
                dir,
                scale,
            },
        ))
    }

    /// Elementwise complex product of packed `[2, B, rest...]` with a kernel
    /// given as real and imaginary parts of shape `rest`, broadcast over `B`.
    pub fn complex_mul_kernel(&self, kre: &Var<'g>, kim: &Var<'g>) -> Result<Var<'g>> {
        let z = self.value();
        let (r, i) = (kre.value(), kim.value());
        if z.rank() < 3 || z.shape()[0] != 2 || r.shape() != &z.shape()[2..] || i.shape() != r.shape() {
            return Err(shape_mismatch("complex_mul_kernel", z.shape(), r.shape()));
        }
        let batch = z.shape()[1];
        let plane = r.len();
        let half = z.len() / 2;
        let mut out = vec![0.0; z.len()];
        let (zr, zi) = z.data().split_at(half);
        for b in 0..batch {
            for p in 0..plane {
                let j = b * plane + p;
                let (a, c) = (zr[j], zi[j]);
                let (kr, ki) = (r.data()[p], i.data()[p]);
                out[j] = a * kr - c * ki;
                out[half + j] = a * ki + c * kr;
            }
        }
        Ok(self.push(
            Tensor::new(z.shape(), out)?,
            Op::ComplexMulKernel {
                z: self.id,
                kre: kre.id,
                kim: kim.id,
                batch,
                plane,
            },
        ))
    }

    /// Bilinear upsampling of the two trailing axes by an integer factor,
    /// half-pixel centred (`align_corners = false`).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() < 2 || factor == 0 {
            return Err(invalid_shape("upsample_bilinear", x.shape(), "need rank >= 2 and factor >= 1"));
        }
        let r = x.rank();
        let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
        let planes = x.len() / (h * w);
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(h, factor);
        let tx = kernels::bilinear_taps(w, factor);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Upsample {
                x: self.id,
                factor,
                planes,
                h,
                w,
            },
        ))
    }
}
