//! Periodic advection–diffusion `∂u/∂t = −v·∇u + νΔu` on a unit-spaced grid.
//!
//! `x` runs along columns and `y` along rows. Space is discretized with
//! central differences and the five-point Laplacian, time with classical RK4.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{sequence_seed, Metadata, SequenceBatch, SequenceSource};
use crate::error::{Error, Result};
use crate::spectral::fft::{fft2_planes, Direction};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvectionConfig {
    pub n_seq: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `(vx, vy)` in cells per unit time.
    pub velocity: (f64, f64),
    pub nu: f64,
    /// Time between frames.
    pub frame_dt: f64,
    /// RK4 steps per frame.
    pub substeps: usize,
    /// Largest integer wavenumber kept in the initial condition.
    pub cutoff: f64,
}

impl Default for AdvectionConfig {
    fn default() -> Self {
        AdvectionConfig {
            n_seq: 64,
            frames: 20,
            height: 32,
            width: 32,
            velocity: (0.5, 0.25),
            nu: 0.02,
            frame_dt: 1.0,
            substeps: 4,
            cutoff: 4.0,
        }
    }
}

impl AdvectionConfig {
    pub fn dt(&self) -> f64 {
        self.frame_dt / self.substeps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 || self.frames == 0 || self.substeps == 0 {
            return Err(Error::Config(format!(
                "advection grid {}×{} with {} frames and {} substeps is degenerate",
                self.height, self.width, self.frames, self.substeps
            )));
        }
        let (vx, vy) = self.velocity;
        if !(vx.is_finite() && vy.is_finite() && self.nu >= 0.0 && self.frame_dt > 0.0 && self.cutoff >= 0.0) {
            return Err(Error::Config("advection parameters must be finite, ν ≥ 0 and frame_dt > 0".into()));
        }
        let dt = self.dt();
        let courant = (vx.abs() + vy.abs()) * dt;
        if courant > 1.0 {
            return Err(Error::Config(format!(
                "CFL violated: (|vx| + |vy|)·Δt = {courant} > 1; raise substeps"
            )));
        }
        let diffusion = self.nu * dt * 2.0;
        if diffusion > 0.25 {
            return Err(Error::Config(format!(
                "diffusion limit violated: ν·Δt·(1/Δx² + 1/Δy²) = {diffusion} > 0.25; raise substeps"
            )));
        }
        Ok(())
    }
}

fn rhs(u: &[f64], out: &mut [f64], h: usize, w: usize, vx: f64, vy: f64, nu: f64) {
    for i in 0..h {
        let (up, dn) = ((i + h - 1) % h, (i + 1) % h);
        for j in 0..w {
            let (lf, rt) = ((j + w - 1) % w, (j + 1) % w);
            let c = u[i * w + j];
            let (l, r, a, b) = (u[i * w + lf], u[i * w + rt], u[up * w + j], u[dn * w + j]);
            let adv = vx * (r - l) * 0.5 + vy * (b - a) * 0.5;
            out[i * w + j] = -adv + nu * (l + r + a + b - 4.0 * c);
        }
    }
}

/// Advances `u` by `steps` RK4 steps of size `dt`.
pub(crate) fn integrate(u: &mut [f64], h: usize, w: usize, velocity: (f64, f64), nu: f64, dt: f64, steps: usize) {
    let n = u.len();
    let (mut k, mut acc, mut stage) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (vx, vy) = velocity;
    for _ in 0..steps {
        acc.fill(0.0);
        for (s, (c, wgt)) in [(0.0, 1.0), (0.5, 2.0), (0.5, 2.0), (1.0, 1.0)].into_iter().enumerate() {
            if s == 0 {
                stage.copy_from_slice(u);
            } else {
                for ((st, &ui), &ki) in stage.iter_mut().zip(u.iter()).zip(&k) {
                    *st = ui + c * dt * ki;
                }
            }
            rhs(&stage, &mut k, h, w, vx, vy, nu);
            for (a, &ki) in acc.iter_mut().zip(&k) {
                *a += wgt * ki;
            }
        }
        for (ui, &a) in u.iter_mut().zip(&acc) {
            *ui += dt / 6.0 * a;
        }
    }
}

/// White noise with every Fourier mode of integer wavenumber magnitude above
/// `cutoff` removed, then standardized to zero mean and unit variance.
pub fn low_pass_noise(h: usize, w: usize, cutoff: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    let mut re: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut im = vec![0.0; h * w];
    fft2_planes(&mut re, &mut im, h, w, Direction::Forward);
    let signed = |u: usize, n: usize| if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
    for u in 0..h {
        for v in 0..w {
            let (a, b) = (signed(u, h), signed(v, w));
            if u + v == 0 || a.hypot(b) > cutoff {
                re[u * w + v] = 0.0;
                im[u * w + v] = 0.0;
            }
        }
    }
    fft2_planes(&mut re, &mut im, h, w, Direction::Inverse);
    let mean = re.iter().sum::<f64>() / re.len() as f64;
    let std = (re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / re.len() as f64).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 0.0 };
    re.iter().map(|v| (v - mean) * scale).collect()
}

pub struct AdvectionSource {
    pub config: AdvectionConfig,
    pub seed: u64,
}

impl AdvectionSource {
    pub fn new(config: AdvectionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(AdvectionSource { config, seed })
    }

    /// Frames `[T, 1, H, W]` evolved from `initial`.
    pub fn evolve(&self, initial: &[f64]) -> Tensor {
        let c = &self.config;
        let (h, w) = (c.height, c.width);
        let mut u = initial.to_vec();
        let mut data = Vec::with_capacity(c.frames * h * w);
        data.extend_from_slice(&u);
        for _ in 1..c.frames {
            integrate(&mut u, h, w, c.velocity, c.nu, c.dt(), c.substeps);
            data.extend_from_slice(&u);
        }
        Tensor::new(&[c.frames, 1, h, w], data).expect("shape matches data")
    }
}

impl SequenceSource for AdvectionSource {
    fn len(&self) -> usize {
        self.config.n_seq
    }

    fn frames(&self) -> usize {
        self.config.frames
    }

    fn frame_shape(&self) -> [usize; 3] {
        [1, self.config.height, self.config.width]
    }

    fn metadata(&self) -> Metadata {
        let c = &self.config;
        Metadata::new("advection_diffusion", self.seed)
            .with("n_seq", c.n_seq)
            .with("frames", c.frames)
            .with("height", c.height)
            .with("width", c.width)
            .with("vx", c.velocity.0)
            .with("vy", c.velocity.1)
            .with("nu", c.nu)
            .with("frame_dt", c.frame_dt)
            .with("substeps", c.substeps)
            .with("cutoff", c.cutoff)
    }

    fn sequence(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("sequence index {index} out of range for {}", self.len())));
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(self.seed, index as u64));
        let u0 = low_pass_noise(c.height, c.width, c.cutoff, &mut rng);
        let seq = self.evolve(&u0);
        seq.check_finite("advection–diffusion frames")?;
        Ok(seq)
    }
}

pub fn gen_advection_diffusion(config: AdvectionConfig, t_in: usize, seed: u64) -> Result<SequenceBatch> {
    super::materialize(&AdvectionSource::new(config, seed)?, t_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn cfg(velocity: (f64, f64), nu: f64) -> AdvectionConfig {
        AdvectionConfig {
            n_seq: 2,
            frames: 12,
            velocity,
            nu,
            ..AdvectionConfig::default()
        }
    }

    fn variance(f: &[f64]) -> f64 {
        let m = f.iter().sum::<f64>() / f.len() as f64;
        f.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f.len() as f64
    }

    #[test]
    fn frozen_field_without_transport() {
        let src = AdvectionSource::new(cfg((0.0, 0.0), 0.0), 1).unwrap();
        let seq = src.sequence(0).unwrap();
        let first = seq.index_axis0(0);
        for t in 1..seq.shape()[0] {
            assert_eq!(seq.index_axis0(t).data(), first.data());
        }
    }

    #[test]
    fn diffusion_conserves_mean_and_dissipates_variance() {
        let src = AdvectionSource::new(cfg((0.0, 0.0), 0.1), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u0: Vec<f64> = low_pass_noise(32, 32, 6.0, &mut rng).iter().map(|v| v + 0.7).collect();
        let seq = src.evolve(&u0);
        let mean0 = u0.iter().sum::<f64>() / u0.len() as f64;
        let mut prev = f64::INFINITY;
        for t in 0..seq.shape()[0] {
            let f = seq.index_axis0(t);
            assert!((f.mean() - mean0).abs() <= 1e-12, "frame {t}: {}", f.mean() - mean0);
            let v = variance(f.data());
            assert!(v <= prev, "frame {t}: {v} > {prev}");
            prev = v;
        }
        assert!(prev < variance(&u0));
    }

    #[test]
    fn advected_mode_matches_closed_form() {
        let (vx, m, w) = (0.5, 2.0, 32usize);
        let c = AdvectionConfig { velocity: (vx, 0.0), nu: 0.0, ..cfg((vx, 0.0), 0.0) };
        let src = AdvectionSource::new(c, 0).unwrap();
        let k = TAU * m / w as f64;
        let u0 = Tensor::from_fn(&[32, w], |i| (k * i[1] as f64).sin());
        let seq = src.evolve(u0.data());
        for t in 0..c.frames {
            let time = t as f64 * c.frame_dt;
            // Central differences move the mode at vx·sin(k)/k instead of vx.
            let exact = Tensor::from_fn(&[32, w], |i| (k * (i[1] as f64 - vx * time)).sin());
            let semi = Tensor::from_fn(&[32, w], |i| (k * i[1] as f64 - vx * k.sin() * time).sin());
            let frame = seq.index_axis0(t).reshape(&[32, w]).unwrap();
            let bound = vx * time * (k - k.sin()) + 1e-6;
            assert!(frame.max_abs_diff(&exact) <= bound, "t={t}");
            // RK4 error against the semi-discrete solution is O(Δt⁴).
            assert!(frame.max_abs_diff(&semi) <= 1e-5, "t={t}");
        }
    }

    #[test]
    fn cfl_violations_are_configuration_errors() {
        assert!(matches!(AdvectionSource::new(cfg((3.0, 2.0), 0.0), 0), Err(Error::Config(_))));
        assert!(matches!(AdvectionSource::new(cfg((0.0, 0.0), 0.6), 0), Err(Error::Config(_))));
        let ok = AdvectionConfig { substeps: 8, ..cfg((3.0, 2.0), 0.6) };
        assert!(AdvectionSource::new(ok, 0).is_ok());
    }

    #[test]
    fn low_pass_noise_is_band_limited_and_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = low_pass_noise(16, 16, 3.0, &mut rng);
        assert!(f.iter().sum::<f64>().abs() < 1e-10);
        assert!((variance(&f) - 1.0).abs() < 1e-10);
        let grids = crate::spectral::fft2(&Tensor::new(&[16, 16], f).unwrap()).unwrap();
        let g = &grids[0];
        for u in 0..16 {
            for v in 0..16 {
                let a = if u <= 8 { u as f64 } else { u as f64 - 16.0 };
                let b = if v <= 8 { v as f64 } else { v as f64 - 16.0 };
                if a.hypot(b) > 3.0 {
                    let (re, im) = g.get(u, v);
                    assert!(re.hypot(im) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_advection_diffusion(cfg((0.5, 0.25), 0.02), 6, 8).unwrap();
        let b = gen_advection_diffusion(cfg((0.5, 0.25), 0.02), 6, 8).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.targets.data(), b.targets.data());
        assert_eq!(a.targets.shape(), &[2, 6, 1, 32, 32]);
    }
}
