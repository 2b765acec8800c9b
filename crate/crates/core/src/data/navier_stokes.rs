//! Pseudo-spectral 2-D Navier–Stokes in vorticity form on the unit torus:
//! `ω_t + u·∇ω = νΔω + f`, with `u = (ψ_y, −ψ_x)` and `−Δψ = ω`.
//!
//! `x` runs along rows and `y` along columns. Nonlinear products are formed
//! in physical space with 2/3-rule dealiasing; time stepping is RK4 with an
//! integrating factor for the viscous term.

use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{sequence_seed, Metadata, SequenceBatch, SequenceSource};
use crate::error::{Error, Result};
use crate::spectral::{Direction, Fft2Plan};
use crate::tensor::Tensor;

pub const BLOW_UP_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavierStokesConfig {
    pub n_seq: usize,
    pub frames: usize,
    /// Grid size per side; a power of two.
    pub n: usize,
    pub nu: f64,
    pub dt: f64,
    /// Simulated time between frames.
    pub frame_interval: f64,
    /// Amplitude `a` of `a·(sin 2π(x+y) + cos 2π(x+y))`.
    pub forcing: f64,
}

impl Default for NavierStokesConfig {
    fn default() -> Self {
        NavierStokesConfig {
            n_seq: 32,
            frames: 20,
            n: 32,
            nu: 1e-3,
            dt: 1e-2,
            frame_interval: 1.0,
            forcing: 0.1,
        }
    }
}

impl NavierStokesConfig {
    /// Solver steps between frames.
    pub fn steps_per_frame(&self) -> usize {
        (self.frame_interval / self.dt).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n.is_power_of_two() || self.n < 4 {
            return Err(Error::Config(format!("navier_stokes grid {} must be a power of two ≥ 4", self.n)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("navier_stokes ν must be > 0, got {}", self.nu)));
        }
        if !(self.dt > 0.0 && self.frame_interval > 0.0 && self.forcing.is_finite()) || self.frames == 0 {
            return Err(Error::Config("navier_stokes needs dt > 0, frame_interval > 0 and ≥ 1 frame".into()));
        }
        Ok(())
    }
}

fn signed(u: usize, n: usize) -> f64 {
    if u <= n / 2 {
        u as f64
    } else {
        u as f64 - n as f64
    }
}

/// Spectral state and precomputed operators for one grid size.
pub struct VorticitySolver {
    n: usize,
    nu: f64,
    plan: Fft2Plan,
    /// Integer wavenumbers along rows and columns, per bin.
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// `4π²|k|²`, with the DC bin set to 1 to keep the inversion finite.
    lap: Vec<f64>,
    dealias: Vec<bool>,
    forcing_re: Vec<f64>,
    forcing_im: Vec<f64>,
}

impl VorticitySolver {
    pub fn new(n: usize, nu: f64, forcing: f64) -> Self {
        let plan = Fft2Plan::new(n, n);
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut lap = vec![1.0; n * n];
        let mut dealias = vec![false; n * n];
        let cut = 2.0 / 3.0 * (n / 2) as f64;
        for u in 0..n {
            for v in 0..n {
                let i = u * n + v;
                let (a, b) = (signed(u, n), signed(v, n));
                kx[i] = a;
                ky[i] = b;
                if i > 0 {
                    lap[i] = 4.0 * PI * PI * (a * a + b * b);
                }
                dealias[i] = a.abs() <= cut && b.abs() <= cut;
            }
        }
        let mut forcing_re: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
                forcing * ((TAU * (x + y)).sin() + (TAU * (x + y)).cos())
            })
            .collect();
        let mut forcing_im = vec![0.0; n * n];
        plan.process(&mut forcing_re, &mut forcing_im, Direction::Forward);
        VorticitySolver {
            n,
            nu,
            plan,
            kx,
            ky,
            lap,
            dealias,
            forcing_re,
            forcing_im,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn forward(&self, field: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut re = field.to_vec();
        let mut im = vec![0.0; re.len()];
        self.plan.process(&mut re, &mut im, Direction::Forward);
        (re, im)
    }

    /// Real part of the normalized inverse transform of `factor·ŝ`, where
    /// `factor` is purely imaginary (`i·f`) or real.
    fn inverse_scaled(&self, re: &[f64], im: &[f64], f: impl Fn(usize) -> f64, imaginary: bool) -> Vec<f64> {
        let nn = (self.n * self.n) as f64;
        let (mut r, mut m): (Vec<f64>, Vec<f64>) = if imaginary {
            (0..re.len()).map(|i| (-f(i) * im[i], f(i) * re[i])).unzip()
        } else {
            (0..re.len()).map(|i| (f(i) * re[i], f(i) * im[i])).unzip()
        };
        self.plan.process(&mut r, &mut m, Direction::Inverse);
        r.iter_mut().for_each(|v| *v /= nn);
        r
    }

    /// Physical vorticity of a spectral state.
    pub fn to_physical(&self, re: &[f64], im: &[f64]) -> Vec<f64> {
        self.inverse_scaled(re, im, |_| 1.0, false)
    }

    /// Dealiased `−(u·∇ω)^ + f̂` with a zero DC bin; also returns `max|ω|`
    /// of the input.
    fn nonlinear(&self, re: &[f64], im: &[f64], out_re: &mut [f64], out_im: &mut [f64]) -> f64 {
        let omega = self.to_physical(re, im);
        let peak = omega.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) });
        // ψ̂ = ω̂ / (4π²|k|²); ∂_x ↦ 2πi·kx.
        let u = self.inverse_scaled(re, im, |i| TAU * self.ky[i] / self.lap[i], true);
        let v = self.inverse_scaled(re, im, |i| -TAU * self.kx[i] / self.lap[i], true);
        let wx = self.inverse_scaled(re, im, |i| TAU * self.kx[i], true);
        let wy = self.inverse_scaled(re, im, |i| TAU * self.ky[i], true);
        let adv: Vec<f64> = (0..u.len()).map(|i| u[i] * wx[i] + v[i] * wy[i]).collect();
        let (nre, nim) = self.forward(&adv);
        for i in 0..re.len() {
            let keep = if self.dealias[i] && i > 0 { 1.0 } else { 0.0 };
            out_re[i] = keep * (self.forcing_re[i] - nre[i]);
            out_im[i] = keep * (self.forcing_im[i] - nim[i]);
        }
        peak
    }

    /// One integrating-factor RK4 step of size `dt` in place: the viscous
    /// term is integrated exactly, the rest with classical RK4. `step` is
    /// only used for errors.
    pub fn step(&self, re: &mut [f64], im: &mut [f64], dt: f64, step: usize) -> Result<()> {
        let len = re.len();
        let full: Vec<f64> = self.lap.iter().enumerate().map(|(i, l)| if i == 0 { 1.0 } else { (-self.nu * l * dt).exp() }).collect();
        let half: Vec<f64> = full.iter().map(|e| e.sqrt()).collect();
        let mut k = [(); 4].map(|_| (vec![0.0; len], vec![0.0; len]));
        let (mut sr, mut si) = (re.to_vec(), im.to_vec());
        for s in 0..4 {
            if s > 0 {
                let (pr, pi) = &k[s - 1];
                for i in 0..len {
                    let (a, b) = match s {
                        1 => (half[i] * (re[i] + 0.5 * dt * pr[i]), half[i] * (im[i] + 0.5 * dt * pi[i])),
                        2 => (half[i] * re[i] + 0.5 * dt * pr[i], half[i] * im[i] + 0.5 * dt * pi[i]),
                        _ => (full[i] * re[i] + dt * half[i] * pr[i], full[i] * im[i] + dt * half[i] * pi[i]),
                    };
                    sr[i] = a;
                    si[i] = b;
                }
            }
            let (kr, ki) = &mut k[s];
            let peak = self.nonlinear(&sr, &si, kr, ki);
            if !(peak <= BLOW_UP_THRESHOLD) {
                return Err(Error::Diverged(format!(
                    "navier_stokes vorticity reached {peak:e} at step {step} (stage {})",
                    s + 1
                )));
            }
        }
        for i in 0..len {
            let (e, h) = (full[i], half[i]);
            re[i] = e * re[i] + dt / 6.0 * (e * k[0].0[i] + 2.0 * h * (k[1].0[i] + k[2].0[i]) + k[3].0[i]);
            im[i] = e * im[i] + dt / 6.0 * (e * k[0].1[i] + 2.0 * h * (k[1].1[i] + k[2].1[i]) + k[3].1[i]);
        }
        Ok(())
    }

    /// Frames at `t = 0, interval, 2·interval, …` starting from the physical
    /// field `omega0`.
    pub fn simulate(&self, omega0: &[f64], frames: usize, dt: f64, steps_per_frame: usize) -> Result<Vec<Vec<f64>>> {
        let (mut re, mut im) = self.forward(omega0);
        let mut out = Vec::with_capacity(frames);
        out.push(omega0.to_vec());
        let mut step = 0;
        for _ in 1..frames {
            for _ in 0..steps_per_frame {
                self.step(&mut re, &mut im, dt, step)?;
                step += 1;
            }
            let omega = self.to_physical(&re, &im);
            if let Some(v) = omega.iter().find(|v| !(v.abs() <= BLOW_UP_THRESHOLD)) {
                return Err(Error::Diverged(format!("navier_stokes vorticity reached {v:e} at step {step}")));
            }
            out.push(omega);
        }
        Ok(out)
    }
}

/// Gaussian random field with covariance `σ²(−Δ + τ²)^(−α)`, α = 2.5, τ = 7,
/// and zero mean.
pub fn gaussian_random_field(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let (alpha, tau) = (2.5f64, 7.0f64);
    let sigma = tau.powf(0.5 * (2.0 * alpha - 2.0));
    let plan = Fft2Plan::new(n, n);
    let mut re: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut im = vec![0.0; n * n];
    plan.process(&mut re, &mut im, Direction::Forward);
    for u in 0..n {
        for v in 0..n {
            let i = u * n + v;
            let k2 = signed(u, n).powi(2) + signed(v, n).powi(2);
            let c = if i == 0 {
                0.0
            } else {
                n as f64 * 2f64.sqrt() * sigma * (4.0 * PI * PI * k2 + tau * tau).powf(-alpha / 2.0)
            };
            re[i] *= c;
            im[i] *= c;
        }
    }
    plan.process(&mut re, &mut im, Direction::Inverse);
    let nn = (n * n) as f64;
    re.iter().map(|v| v / nn).collect()
}

pub struct NavierStokesSource {
    pub config: NavierStokesConfig,
    pub seed: u64,
    solver: VorticitySolver,
}

impl NavierStokesSource {
    pub fn new(config: NavierStokesConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(NavierStokesSource {
            solver: VorticitySolver::new(config.n, config.nu, config.forcing),
            config,
            seed,
        })
    }
}

impl SequenceSource for NavierStokesSource {
    fn len(&self) -> usize {
        self.config.n_seq
    }

    fn frames(&self) -> usize {
        self.config.frames
    }

    fn frame_shape(&self) -> [usize; 3] {
        [1, self.config.n, self.config.n]
    }

    fn metadata(&self) -> Metadata {
        let c = &self.config;
        Metadata::new("navier_stokes", self.seed)
            .with("n_seq", c.n_seq)
            .with("frames", c.frames)
            .with("n", c.n)
            .with("nu", c.nu)
            .with("dt", c.dt)
            .with("frame_interval", c.frame_interval)
            .with("forcing", c.forcing)
    }

    fn sequence(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("sequence index {index} out of range for {}", self.len())));
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(self.seed, index as u64));
        let w0 = gaussian_random_field(c.n, &mut rng);
        let frames = self.solver.simulate(&w0, c.frames, c.dt, c.steps_per_frame())?;
        Tensor::new(&[c.frames, 1, c.n, c.n], frames.concat())
    }
}

pub fn gen_navier_stokes(config: NavierStokesConfig, t_in: usize, seed: u64) -> Result<SequenceBatch> {
    super::materialize(&NavierStokesSource::new(config, seed)?, t_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn zero_stays_zero_without_forcing() {
        let s = VorticitySolver::new(16, 1e-3, 0.0);
        let frames = s.simulate(&vec![0.0; 256], 5, 0.05, 4).unwrap();
        assert!(frames.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_mode_decays_at_the_viscous_rate() {
        let (nu, k, dt, steps) = (1e-2, 2.0, 1e-2, 50);
        for n in [32usize, 64] {
            let s = VorticitySolver::new(n, nu, 0.0);
            let x = |i: usize| (i / n) as f64 / n as f64;
            let y = |i: usize| (i % n) as f64 / n as f64;
            let shear: Vec<f64> = (0..n * n).map(|i| (TAU * k * x(i)).cos()).collect();
            // Both terms of u·∇ω are nonzero here but cancel, since ψ ∝ ω.
            let cellular: Vec<f64> = (0..n * n).map(|i| (TAU * k * x(i)).cos() + (TAU * k * y(i)).sin()).collect();
            for w0 in [shear, cellular] {
                let frames = s.simulate(&w0, 6, dt, steps).unwrap();
                for (f, frame) in frames.iter().enumerate() {
                    let t = f as f64 * dt * steps as f64;
                    let amp = (-nu * (TAU * k).powi(2) * t).exp();
                    let max_err = frame.iter().zip(&w0).map(|(a, b)| (a - amp * b).abs()).fold(0.0, f64::max);
                    assert!(max_err <= 0.01 * amp, "n={n} frame {f}: {max_err} vs amplitude {amp}");
                }
            }
        }
    }

    #[test]
    fn forced_turbulence_keeps_zero_mean() {
        let cfg = NavierStokesConfig { n_seq: 1, frames: 4, n: 32, frame_interval: 0.5, ..Default::default() };
        let src = NavierStokesSource::new(cfg, 3).unwrap();
        let seq = src.sequence(0).unwrap();
        assert!(seq.all_finite());
        for t in 0..cfg.frames {
            assert!(mean(seq.index_axis0(t).data()).abs() <= 1e-10);
        }
        // The field actually evolves.
        assert!(seq.index_axis0(3).max_abs_diff(&seq.index_axis0(0)) > 1e-3);
    }

    #[test]
    fn blow_up_names_the_step() {
        let n = 16;
        let s = VorticitySolver::new(n, 1e-9, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0: Vec<f64> = gaussian_random_field(n, &mut rng).iter().map(|v| v * 1e4).collect();
        match s.simulate(&w0, 50, 1.0, 1) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected divergence, got {:?}", other.map(|f| f.len())),
        }
    }

    #[test]
    fn random_field_has_zero_mean_and_decaying_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = gaussian_random_field(32, &mut rng);
        assert!(mean(&w).abs() < 1e-12);
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!(std > 0.05 && std < 20.0, "{std}");
    }

    #[test]
    fn configuration_is_validated() {
        let bad_n = NavierStokesConfig { n: 24, ..Default::default() };
        assert!(NavierStokesSource::new(bad_n, 0).is_err());
        let bad_nu = NavierStokesConfig { nu: 0.0, ..Default::default() };
        assert!(NavierStokesSource::new(bad_nu, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = NavierStokesConfig { n_seq: 2, frames: 3, n: 16, frame_interval: 0.2, ..Default::default() };
        let a = gen_navier_stokes(cfg, 2, 5).unwrap();
        let b = gen_navier_stokes(cfg, 2, 5).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.targets.data(), b.targets.data());
        assert_eq!(a.metadata.get("nu"), Some("0.001"));
    }
}
