//! 2D discrete Fourier transforms and the learnable Fourier block.
//!
//! Forward transform: `Z(u,v) = Σ_x Σ_y f(x,y) exp(-2πi (ux/h + vy/w))`.
//! The inverse carries the `1/(hw)` factor.

pub mod fft;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid_shape, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

pub use fft::{Direction, Fft1d, Fft2Plan};

/// Imaginary residue tolerated by [`ifft2`] relative to the grid magnitude.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

/// One `h x w` plane of complex frequency coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexGrid {
            h,
            w,
            re: vec![0.0; h * w],
            im: vec![0.0; h * w],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> (f64, f64) {
        (self.re[u * self.w + v], self.im[u * self.w + v])
    }

    pub fn set(&mut self, u: usize, v: usize, value: (f64, f64)) {
        self.re[u * self.w + v] = value.0;
        self.im[u * self.w + v] = value.1;
    }

    /// `Σ |Z|²`.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| a * a + b * b)
            .sum()
    }

    fn max_abs(&self) -> f64 {
        self.re
            .iter()
            .chain(&self.im)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn trailing_hw(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid_shape(op, shape, "need at least two axes"));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Forward transform of every trailing `h x w` plane of a real field.
pub fn fft2(field: &Tensor) -> Result<Vec<ComplexGrid>> {
    field.check_finite("fft2 input")?;
    let (h, w) = trailing_hw(field.shape(), "fft2")?;
    let plan = Fft2Plan::new(h, w);
    Ok(field
        .data()
        .chunks(h * w)
        .map(|plane| {
            let mut g = ComplexGrid {
                h,
                w,
                re: plane.to_vec(),
                im: vec![0.0; h * w],
            };
            plan.process(&mut g.re, &mut g.im, Direction::Forward);
            g
        })
        .collect())
}

/// Normalised inverse transform, kept complex.
pub fn ifft2_complex(grid: &ComplexGrid) -> ComplexGrid {
    let mut out = grid.clone();
    Fft2Plan::new(grid.h, grid.w).process(&mut out.re, &mut out.im, Direction::Inverse);
    let s = 1.0 / (grid.h * grid.w) as f64;
    out.re.iter_mut().chain(out.im.iter_mut()).for_each(|v| *v *= s);
    out
}

/// Normalised inverse transform to a real field of shape `leading ++ [h, w]`.
///
/// Fails when the imaginary residue exceeds [`IMAG_RESIDUE_TOL`] relative to
/// the input magnitude, which signals a spectrum without conjugate symmetry.
pub fn ifft2(grids: &[ComplexGrid], leading: &[usize]) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("ifft2 of zero grids".into()))?;
    let (h, w) = (first.h, first.w);
    if numel(leading) != grids.len() {
        return Err(invalid_shape("ifft2", leading, format!("{} grids supplied", grids.len())));
    }
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if (g.h, g.w) != (h, w) {
            return Err(invalid_shape("ifft2", &[g.h, g.w], "inconsistent grid sizes"));
        }
        let scale = g.max_abs().max(1.0);
        let out = ifft2_complex(g);
        let residue = out.im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residue > IMAG_RESIDUE_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "ifft2: imaginary residue {residue:.3e} exceeds tolerance; spectrum is not conjugate-symmetric"
            )));
        }
        data.extend_from_slice(&out.re);
    }
    let mut shape = leading.to_vec();
    shape.extend([h, w]);
    Tensor::new(&shape, data)
}

/// Direct evaluation of the defining double sum; O(h²w²). Reference oracle.
pub fn dft2_direct(re: &[f64], im: &[f64], h: usize, w: usize) -> ComplexGrid {
    use std::f64::consts::PI;
    let mut out = ComplexGrid::zeros(h, w);
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for x in 0..h {
                for y in 0..w {
                    let phase = -2.0 * PI * ((u * x) as f64 / h as f64 + (v * y) as f64 / w as f64);
                    let (s, c) = phase.sin_cos();
                    let (a, b) = (re[x * w + y], im[x * w + y]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            out.set(u, v, (sr, si));
        }
    }
    out
}

/// Differentiable forward transform of a real `[..., h, w]` tensor into a
/// packed complex `[2, ..., h, w]` tensor.
pub fn fft2_var<'g>(x: Var<'g>) -> Result<Var<'g>> {
    x.to_complex().fft2(Direction::Forward)
}

/// Differentiable normalised inverse transform, keeping only the real part.
pub fn ifft2_real<'g>(z: Var<'g>) -> Result<Var<'g>> {
    z.fft2(Direction::Inverse)?.real_part()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelInit {
    /// `1 + 0i`: the bare block is the identity.
    Unit,
    /// `0 + 0i`: the residual block is the identity.
    Zero,
    /// `-1 + 0i`: the residual block outputs zero.
    NegUnit,
}

/// Trainable complex multiplier with one coefficient per channel and bin.
#[derive(Clone, Debug)]
pub struct SpectralKernel {
    pub re: ParamId,
    pub im: ParamId,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl SpectralKernel {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, h: usize, w: usize, init: KernelInit) -> Self {
        let shape = [channels, h, w];
        let re = match init {
            KernelInit::Unit => Tensor::ones(&shape),
            KernelInit::Zero => Tensor::zeros(&shape),
            KernelInit::NegUnit => Tensor::full(&shape, -1.0),
        };
        SpectralKernel {
            re: store.add(format!("{name}.re"), re),
            im: store.add(format!("{name}.im"), Tensor::zeros(&shape)),
            channels,
            h,
            w,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels * self.h * self.w
    }
}

/// `Re(IFFT(R ⊙ FFT(u)))` for `u` of shape `[b, c, h, w]`.
pub fn fourier_block<'g>(g: &'g Graph, store: &ParamStore, u: Var<'g>, kernel: &SpectralKernel) -> Result<Var<'g>> {
    let shape = u.shape();
    if shape.len() != 4 || shape[1..] != [kernel.channels, kernel.h, kernel.w] {
        return Err(crate::error::shape_mismatch(
            "fourier_block",
            &shape,
            &[kernel.channels, kernel.h, kernel.w],
        ));
    }
    let z = fft2_var(u)?;
    let kre = g.param(store, kernel.re);
    let kim = g.param(store, kernel.im);
    let mixed = z.complex_mul_kernel(&kre, &kim)?;
    ifft2_real(mixed)
}

/// Applies `depth` residual Fourier blocks: `u <- u + block(u)`.
pub fn stack_fourier_blocks<'g>(
    g: &'g Graph,
    store: &ParamStore,
    u: Var<'g>,
    kernels: &[SpectralKernel],
    depth: usize,
) -> Result<Var<'g>> {
    if depth != kernels.len() {
        return Err(Error::InvalidArgument(format!(
            "stack_fourier_blocks: depth {depth} but {} kernels",
            kernels.len()
        )));
    }
    let mut h = u;
    for k in kernels {
        let mixed = fourier_block(g, store, h, k)?;
        h = h.add(&mixed)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn constant_field_has_only_dc() {
        let f = Tensor::full(&[4, 4], 2.5);
        let z = &fft2(&f).unwrap()[0];
        assert_eq!(z.get(0, 0), (40.0, 0.0));
        for u in 0..4 {
            for v in 0..4 {
                if (u, v) != (0, 0) {
                    let (a, b) = z.get(u, v);
                    assert!(a.abs() < 1e-14 && b.abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut f = Tensor::zeros(&[3, 5]);
        f.set(&[0, 0], 1.0);
        let z = &fft2(&f).unwrap()[0];
        for (a, b) in z.re.iter().zip(&z.im) {
            assert!((a - 1.0).abs() < 1e-15 && b.abs() < 1e-15);
        }
    }

    #[test]
    fn random_6x5_matches_direct_sum() {
        let f = Tensor::randn(&[6, 5], 1.0, &mut rng(1));
        let fast = &fft2(&f).unwrap()[0];
        let slow = dft2_direct(f.data(), &[0.0; 30], 6, 5);
        for i in 0..30 {
            assert!((fast.re[i] - slow.re[i]).abs() < 1e-10);
            assert!((fast.im[i] - slow.im[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_and_zero_grid() {
        let f = Tensor::randn(&[2, 8, 8], 1.0, &mut rng(2));
        let back = ifft2(&fft2(&f).unwrap(), &[2]).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-10);
        let zero = ifft2(&[ComplexGrid::zeros(4, 4)], &[1]).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn symmetric_bin_pair_inverts_to_cosine() {
        let (h, w) = (8, 6);
        let mut z = ComplexGrid::zeros(h, w);
        let amp = (h * w) as f64 / 2.0;
        z.set(1, 0, (amp, 0.0));
        z.set(h - 1, 0, (amp, 0.0));
        let f = ifft2(&[z], &[1]).unwrap();
        for x in 0..h {
            let expect = (2.0 * std::f64::consts::PI * x as f64 / h as f64).cos();
            for y in 0..w {
                assert!((f.at(&[0, x, y]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut z = ComplexGrid::zeros(4, 4);
        z.set(1, 0, (16.0, 0.0));
        assert!(ifft2(&[z], &[1]).is_err());
    }

    #[test]
    fn conjugate_symmetry_of_real_input() {
        let f = Tensor::randn(&[5, 7], 1.0, &mut rng(3));
        let z = &fft2(&f).unwrap()[0];
        for u in 0..5 {
            for v in 0..7 {
                let (a, b) = z.get(u, v);
                let (c, d) = z.get((5 - u) % 5, (7 - v) % 7);
                assert!((a - c).abs() < 1e-12 && (b + d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut f = Tensor::zeros(&[2, 2]);
        f.set(&[1, 1], f64::NAN);
        assert!(fft2(&f).is_err());
    }

    fn block_fixture(init: KernelInit, depth: usize) -> (ParamStore, Vec<SpectralKernel>) {
        let mut store = ParamStore::new();
        let kernels = (0..depth)
            .map(|i| SpectralKernel::new(&mut store, &format!("fb{i}"), 2, 4, 4, init))
            .collect();
        (store, kernels)
    }

    #[test]
    fn unit_kernel_is_identity_and_zero_kernel_annihilates() {
        let u = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng(4));
        for (init, expect_scale) in [(KernelInit::Unit, 1.0), (KernelInit::Zero, 0.0), (KernelInit::NegUnit, -1.0)] {
            let (store, k) = block_fixture(init, 1);
            let g = Graph::new();
            let out = fourier_block(&g, &store, g.constant(u.clone()), &k[0]).unwrap();
            assert!(out.value().max_abs_diff(&u.scale(expect_scale)) < 1e-10);
        }
    }

    #[test]
    fn doubling_kernel_and_its_gradient() {
        let u = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(5));
        let (mut store, k) = block_fixture(KernelInit::Unit, 1);
        store.set(k[0].re, Tensor::full(&[2, 4, 4], 2.0)).unwrap();
        let g = Graph::new();
        let out = fourier_block(&g, &store, g.constant(u.clone()), &k[0]).unwrap();
        assert!(out.value().max_abs_diff(&u.scale(2.0)) < 1e-10);

        let target = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(6));
        let report = check_param_gradients(
            &store,
            |g, s| {
                let out = fourier_block(g, s, g.constant(u.clone()), &k[0])?;
                Ok(out.sub(&g.constant(target.clone()))?.square().sum())
            },
            |_| true,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn stack_depth_rules() {
        let u = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(7));
        let (store, k) = block_fixture(KernelInit::Unit, 1);
        let g = Graph::new();
        let x = g.constant(u.clone());
        let id = stack_fourier_blocks(&g, &store, x, &[], 0).unwrap();
        assert_eq!(id.value().as_ref(), &u);
        let doubled = stack_fourier_blocks(&g, &store, x, &k, 1).unwrap();
        assert!(doubled.value().max_abs_diff(&u.scale(2.0)) < 1e-10);
        assert!(stack_fourier_blocks(&g, &store, x, &[], 2).is_err());
    }

    #[test]
    fn stacked_blocks_both_receive_gradient() {
        let u = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(8));
        let (mut store, k) = block_fixture(KernelInit::Unit, 2);
        let mut r = rng(9);
        for kern in &k {
            store.set(kern.re, Tensor::randn(&[2, 4, 4], 0.5, &mut r)).unwrap();
            store.set(kern.im, Tensor::randn(&[2, 4, 4], 0.5, &mut r)).unwrap();
        }
        let g = Graph::new();
        let out = stack_fourier_blocks(&g, &store, g.constant(u), &k, 2).unwrap();
        let loss = out.square().sum();
        g.backward_into(loss, &mut store).unwrap();
        for kern in &k {
            assert!(store.grad(kern.re).max_abs() > 0.0);
            assert!(store.grad(kern.im).max_abs() > 0.0);
        }
    }
}
