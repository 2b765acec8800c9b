//! Training losses.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::params::ParamStore;
use crate::physics::{moment_loss, DerivativeBank};
use crate::spectral::fft2_var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub h1: f64,
    pub moment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { h1: 0.05, moment: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.h1", self.h1), ("loss.moment", self.moment)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub h1: f64,
    pub moment: f64,
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(shape_mismatch(op, &sa, &sb));
    }
    Ok(())
}

pub fn mse_loss<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    same_shape("mse_loss", &pred, &target)?;
    Ok(pred.sub(&target)?.square().mean())
}

/// Signed frequency of DFT bin `u` on an axis of length `n`, in cycles per
/// sample.
pub fn signed_frequency(u: usize, n: usize) -> f64 {
    let s = if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
    s / n as f64
}

/// `1 + 4π²|ξ|²` on an `h×w` grid of bins.
pub fn h1_weights(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        let (a, b) = (signed_frequency(i[0], h), signed_frequency(i[1], w));
        1.0 + 4.0 * PI * PI * (a * a + b * b)
    })
}

/// `Σ_ξ (1 + 4π²|ξ|²) |FFT(pred - target)_ξ|² / (b·C·H·W)` over the last two
/// axes.
pub fn h1_loss<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    same_shape("h1_loss", &pred, &target)?;
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(shape_mismatch("h1_loss", &shape, &[0, 0]));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let z = fft2_var(pred.sub(&target)?)?;
    let plane = h1_weights(h, w);
    let weights = Tensor::from_fn(&z.shape(), |i| plane.at(&[i[i.len() - 2], i[i.len() - 1]]));
    let n = pred.value().len() as f64;
    Ok(z.square().mul(&pred.graph().constant(weights))?.sum().mul_scalar(1.0 / n))
}

/// `mse + λ_H·h1 + λ_m·moment`, with the value of each term.
pub fn total_loss<'g>(
    g: &'g Graph,
    store: &ParamStore,
    pred: Var<'g>,
    target: Var<'g>,
    bank: &DerivativeBank,
    weights: &LossWeights,
) -> Result<(Var<'g>, LossBreakdown)> {
    let mse = mse_loss(pred, target)?;
    let h1 = h1_loss(pred, target)?;
    let moment = moment_loss(g, store, bank)?;
    let total = mse.add(&h1.mul_scalar(weights.h1))?.add(&moment.mul_scalar(weights.moment))?;
    let breakdown = LossBreakdown {
        total: total.item(),
        mse: mse.item(),
        h1: h1.item(),
        moment: moment.item(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn h1_value(a: &Tensor, b: &Tensor) -> f64 {
        let g = Graph::new();
        h1_loss(g.constant(a.clone()), g.constant(b.clone())).unwrap().item()
    }

    #[test]
    fn mse_examples() {
        let g = Graph::new();
        let t = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(1));
        let tv = g.constant(t.clone());
        assert_eq!(mse_loss(tv, tv).unwrap().item(), 0.0);
        assert_eq!(mse_loss(g.constant(t.map(|v| v + 1.0)), tv).unwrap().item(), 1.0);
        assert!(mse_loss(tv, g.constant(Tensor::zeros(&[2, 4, 3]))).is_err());
    }

    #[test]
    fn frequency_convention() {
        let f: Vec<f64> = (0..4).map(|u| signed_frequency(u, 4)).collect();
        assert_eq!(f, [0.0, 0.25, 0.5, -0.25]);
        let f: Vec<f64> = (0..5).map(|u| signed_frequency(u, 5)).collect();
        assert_eq!(f, [0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn h1_of_identical_fields_is_zero() {
        let t = Tensor::randn(&[1, 2, 6, 5], 1.0, &mut rng(2));
        assert_eq!(h1_value(&t, &t), 0.0);
    }

    #[test]
    fn h1_of_constant_offset_is_dc_energy() {
        let (b, c, h, w) = (2, 1, 8, 6);
        let t = Tensor::randn(&[b, c, h, w], 1.0, &mut rng(3));
        let delta = 0.3;
        let got = h1_value(&t.map(|v| v + delta), &t);
        let expect = ((h * w) as f64 * delta).powi(2) * (b * c) as f64 / (b * c * h * w) as f64;
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn nyquist_row_mode_is_weighted_by_one_plus_pi_squared() {
        let (h, w) = (8, 8);
        let target = Tensor::zeros(&[1, 1, h, w]);
        let nyq = Tensor::from_fn(&[1, 1, h, w], |i| (PI * i[2] as f64).cos());
        let dc = Tensor::full(&[1, 1, h, w], 1.0);
        let ratio = h1_value(&nyq, &target) / h1_value(&dc, &target);
        assert!((ratio - (1.0 + PI * PI)).abs() <= 1e-9 * ratio);
    }

    #[test]
    fn h1_dominates_unweighted_spectral_error_and_parseval_holds() {
        let a = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut rng(4));
        let b = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut rng(5));
        let grids = crate::spectral::fft2(&a.zip_map(&b, |x, y| x - y).unwrap()).unwrap();
        let n = a.len() as f64;
        let spectral: f64 = grids.iter().map(|g| g.energy()).sum::<f64>() / n;
        let spatial_sum: f64 = a.zip_map(&b, |x, y| (x - y).powi(2)).unwrap().sum();
        assert!((spectral - 30.0 * spatial_sum / n).abs() <= 1e-9 * spectral);
        assert!(h1_value(&a, &b) >= spectral);
    }

    #[test]
    fn h1_gradient() {
        let t = Tensor::randn(&[1, 1, 4, 6], 1.0, &mut rng(6));
        let x = Tensor::randn(&[1, 1, 4, 6], 1.0, &mut rng(7));
        let r = check_gradient(|g, v| h1_loss(v, g.constant(t.clone())), &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r}");
        let r = check_gradient(|g, v| mse_loss(v, g.constant(t.clone())), &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn total_loss_composition() {
        let mut store = ParamStore::new();
        let bank = DerivativeBank::new(&mut store, "f", 1, 3, &mut rng(8)).unwrap();
        let p = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng(9));
        let t = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng(10));
        let g = Graph::new();
        let (pv, tv) = (g.constant(p), g.constant(t.clone()));
        let w = LossWeights { h1: 0.3, moment: 0.7 };
        let (total, br) = total_loss(&g, &store, pv, tv, &bank, &w).unwrap();
        assert_eq!(total.item(), br.total);
        assert!((br.mse + w.h1 * br.h1 + w.moment * br.moment - br.total).abs() < 1e-12);
        let (pure, br0) = total_loss(&g, &store, pv, tv, &bank, &LossWeights { h1: 0.0, moment: 0.0 }).unwrap();
        assert_eq!(pure.item(), br0.mse);
        bank.set_exact_stencils(&mut store).unwrap();
        let g = Graph::new();
        let tv = g.constant(t);
        let (perfect, _) = total_loss(&g, &store, tv, tv, &bank, &LossWeights::default()).unwrap();
        assert!(perfect.item() < 1e-20);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { h1: -1.0, moment: 1.0 }.validate().is_err());
        assert!(LossWeights { h1: 0.0, moment: f64::NAN }.validate().is_err());
    }
}
