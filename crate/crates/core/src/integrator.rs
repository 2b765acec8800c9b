//! Two-stage Runge–Kutta updates driven by a shared derivative bank.
//!
//! Conventional: `h1 = F(h)`, `h2 = F(h + h1)`, `H = h + ½(h1 + h2)`.
//! Adaptive: the fixed ½ weights become a learned gate
//! `g = σ(W_g * [h1, h2] + b_g)` and `H = h + g⊙h1 + (1 - g)⊙h2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Graph, Padding, Var};
use crate::error::{invalid_shape, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::physics::{derivative_bank_apply, DerivativeBank};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RkMode {
    Conventional,
    Adaptive,
}

impl std::str::FromStr for RkMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(RkMode::Conventional),
            "adaptive" => Ok(RkMode::Adaptive),
            _ => Err(Error::Config(format!("unknown rk mode {s:?} (conventional|adaptive)"))),
        }
    }
}

impl std::fmt::Display for RkMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RkMode::Conventional => "conventional",
            RkMode::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RkConfig {
    pub mode: RkMode,
    /// Nominal stage spacing. Not applied inside `F`; the combiner weights
    /// absorb the scale.
    pub dt: f64,
}

impl Default for RkConfig {
    fn default() -> Self {
        RkConfig {
            mode: RkMode::Adaptive,
            dt: 1.0 / 3.0,
        }
    }
}

impl RkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("rk dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// One gate value per channel and pixel.
    PerElement,
    /// A single learned coefficient shared by every element.
    Scalar,
}

#[derive(Clone, Debug)]
pub struct GateParams {
    pub kind: GateKind,
    pub channels: usize,
    /// `[c, 2c, 1, 1]`; absent for the scalar gate.
    pub weight: Option<ParamId>,
    /// `[c]`, or `[1]` for the scalar gate.
    pub bias: ParamId,
}

impl GateParams {
    /// Zero weights and bias, so `g = ½` until trained.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: GateKind) -> Self {
        match kind {
            GateKind::PerElement => GateParams {
                kind,
                channels,
                weight: Some(store.add(format!("{name}.weight"), Tensor::zeros(&[channels, 2 * channels, 1, 1]))),
                bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            },
            GateKind::Scalar => GateParams {
                kind,
                channels,
                weight: None,
                bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1])),
            },
        }
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            GateKind::PerElement => 2 * self.channels * self.channels + self.channels,
            GateKind::Scalar => 1,
        }
    }
}

fn finite_stage<'g>(v: Var<'g>, stage: &str) -> Result<Var<'g>> {
    if v.value().all_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("non-finite value in RK stage {stage}")))
    }
}

fn stages<'g>(g: &'g Graph, store: &ParamStore, f: &DerivativeBank, h: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let h1 = finite_stage(derivative_bank_apply(g, store, f, h)?, "h1")?;
    let h2 = finite_stage(derivative_bank_apply(g, store, f, h.add(&h1)?)?, "h2")?;
    Ok((h1, h2))
}

pub fn rk2_step<'g>(g: &'g Graph, store: &ParamStore, f: &DerivativeBank, h: Var<'g>) -> Result<Var<'g>> {
    let (h1, h2) = stages(g, store, f, h)?;
    h.add(&h1.add(&h2)?.mul_scalar(0.5))
}

/// Returns `(H, g)`; `g` has the shape of `h` for the per-element gate and a
/// single element for the scalar gate.
pub fn adaptive_rk2_step<'g>(
    g: &'g Graph,
    store: &ParamStore,
    f: &DerivativeBank,
    gate: &GateParams,
    h: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let shape = h.shape();
    if shape.len() != 4 || shape[1] != gate.channels {
        return Err(invalid_shape(
            "adaptive_rk2_step",
            &shape,
            format!("gate expects {} channels", gate.channels),
        ));
    }
    let (h1, h2) = stages(g, store, f, h)?;
    let bias = g.param(store, gate.bias);
    let (mix, gv) = match gate.weight {
        Some(w) => {
            let gv = concat(&[h1, h2], 1)?
                .conv2d(&g.param(store, w), Some(&bias), 1, Padding::Same)?
                .sigmoid();
            let one_minus = gv.neg().add_scalar(1.0);
            (gv.mul(&h1)?.add(&one_minus.mul(&h2)?)?, gv)
        }
        None => {
            let gv = bias.sigmoid();
            let one_minus = gv.neg().add_scalar(1.0);
            (h1.scale_by(&gv)?.add(&h2.scale_by(&one_minus)?)?, gv)
        }
    };
    Ok((h.add(&mix)?, gv))
}

/// Settings for [`gradient_norm_probe`].
#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub channels: usize,
    pub size: usize,
    pub k: usize,
    /// Standard deviation of the random combiner weights; with a zero
    /// combiner every layer is the identity and both modes coincide.
    pub combiner_std: f64,
    /// Standard deviation of the random gate weights (adaptive mode).
    pub gate_std: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            channels: 2,
            size: 8,
            k: 3,
            combiner_std: 0.1,
            gate_std: 0.1,
        }
    }
}

/// Per-layer gradient norms from one probe run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeNorms {
    /// Norm over all of a layer's parameters (bank, plus gate when adaptive).
    pub layer: Vec<f64>,
    /// Norm over the layer's derivative-bank parameters only.
    pub bank: Vec<f64>,
}

/// Stacks `depth` integrator steps, each with its own bank, and reports the
/// gradient norm of `mean(H²)` at every layer. The banks and input depend only
/// on `seed`, so both modes see identical `F` initialization.
pub fn gradient_norm_probe_with(depth: usize, mode: RkMode, seed: u64, cfg: &ProbeConfig) -> Result<ProbeNorms> {
    if depth == 0 {
        return Err(Error::InvalidArgument("gradient_norm_probe: depth must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gate_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let bank = DerivativeBank::new(&mut store, &format!("layer{l}.f"), cfg.channels, cfg.k, &mut rng)?;
        bank.randomize_combiner(&mut store, cfg.combiner_std, &mut rng)?;
        let gate = match mode {
            RkMode::Adaptive => {
                let gate = GateParams::new(&mut store, &format!("layer{l}.gate"), cfg.channels, GateKind::PerElement);
                randomize_gate(&mut store, &gate, cfg.gate_std, &mut gate_rng)?;
                Some(gate)
            }
            RkMode::Conventional => None,
        };
        layers.push((bank, gate));
    }
    let x = Tensor::randn(&[1, cfg.channels, cfg.size, cfg.size], 1.0, &mut rng);
    let g = Graph::new();
    let mut h = g.constant(x);
    for (bank, gate) in &layers {
        h = match gate {
            Some(gate) => adaptive_rk2_step(&g, &store, bank, gate, h)?.0,
            None => rk2_step(&g, &store, bank, h)?,
        };
    }
    let loss = h.square().mean();
    g.backward_into(loss, &mut store)?;
    let layer = (0..depth).map(|l| store.grad_norm_prefix(&format!("layer{l}."))).collect();
    let bank = (0..depth).map(|l| store.grad_norm_prefix(&format!("layer{l}.f."))).collect();
    Ok(ProbeNorms { layer, bank })
}

pub fn gradient_norm_probe(depth: usize, mode: RkMode, seed: u64) -> Result<Vec<f64>> {
    Ok(gradient_norm_probe_with(depth, mode, seed, &ProbeConfig::default())?.layer)
}

/// Random gate weights for experiments that should not start at `g = ½`.
pub fn randomize_gate(store: &mut ParamStore, gate: &GateParams, std: f64, rng: &mut impl Rng) -> Result<()> {
    if let Some(w) = gate.weight {
        let shape = store.value(w).shape().to_vec();
        store.set(w, Tensor::randn(&shape, std, rng))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Bank realizing `F(h) = λh`.
    fn scalar_bank(store: &mut ParamStore, c: usize, lambda: f64) -> DerivativeBank {
        let bank = DerivativeBank::new(store, "f", c, 3, &mut rng(0)).unwrap();
        bank.set_exact_stencils(store).unwrap();
        let mut coeffs = vec![0.0; 9];
        coeffs[0] = lambda;
        bank.set_channelwise_combiner(store, &coeffs).unwrap();
        bank
    }

    #[test]
    fn zero_rhs_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let bank = DerivativeBank::new(&mut store, "f", 2, 3, &mut rng(1)).unwrap();
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng(2));
        let g = Graph::new();
        let out = rk2_step(&g, &store, &bank, g.constant(x.clone())).unwrap();
        assert_eq!(out.value().as_ref(), &x);
    }

    #[test]
    fn linear_decay_factor() {
        let mut store = ParamStore::new();
        let bank = scalar_bank(&mut store, 1, -0.1);
        let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng(3));
        let g = Graph::new();
        let out = rk2_step(&g, &store, &bank, g.constant(x.clone())).unwrap();
        let expect = x.map(|v| 0.905 * v);
        assert!(out.value().max_abs_diff(&expect) < 1e-14);
    }

    fn heun_error(n: usize) -> f64 {
        let mut store = ParamStore::new();
        let bank = scalar_bank(&mut store, 1, -1.0 / n as f64);
        let mut h = Tensor::ones(&[1, 1, 3, 3]);
        for _ in 0..n {
            let g = Graph::new();
            h = rk2_step(&g, &store, &bank, g.constant(h)).unwrap().value().as_ref().clone();
        }
        (h.at(&[0, 0, 1, 1]) - (-1.0f64).exp()).abs()
    }

    #[test]
    fn second_order_convergence() {
        let ns = [4usize, 8, 16, 32];
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = ns.iter().map(|&n| heun_error(n).ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((-slope - 2.0).abs() < 0.2, "order {}", -slope);
    }

    #[test]
    fn zero_gate_reduces_to_conventional() {
        let mut store = ParamStore::new();
        let bank = DerivativeBank::new(&mut store, "f", 2, 3, &mut rng(4)).unwrap();
        bank.randomize_combiner(&mut store, 0.3, &mut rng(5)).unwrap();
        let gate = GateParams::new(&mut store, "gate", 2, GateKind::PerElement);
        let scalar = GateParams::new(&mut store, "sgate", 2, GateKind::Scalar);
        for trial in 0..5 {
            let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng(100 + trial));
            let g = Graph::new();
            let h = g.constant(x);
            let conv = rk2_step(&g, &store, &bank, h).unwrap().value();
            let (ad, gv) = adaptive_rk2_step(&g, &store, &bank, &gate, h).unwrap();
            assert!(gv.value().data().iter().all(|&v| v == 0.5));
            assert!(ad.value().max_abs_diff(&conv) <= 1e-15);
            let (sc, _) = adaptive_rk2_step(&g, &store, &bank, &scalar, h).unwrap();
            assert!(sc.value().max_abs_diff(&conv) <= 1e-15);
        }
    }

    #[test]
    fn saturated_gate_is_forward_euler() {
        let mut store = ParamStore::new();
        let bank = DerivativeBank::new(&mut store, "f", 2, 3, &mut rng(6)).unwrap();
        bank.randomize_combiner(&mut store, 0.3, &mut rng(7)).unwrap();
        let gate = GateParams::new(&mut store, "gate", 2, GateKind::PerElement);
        store.set(gate.bias, Tensor::full(&[2], 30.0)).unwrap();
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng(8));
        let g = Graph::new();
        let h = g.constant(x);
        let (out, gv) = adaptive_rk2_step(&g, &store, &bank, &gate, h).unwrap();
        let euler = h.add(&derivative_bank_apply(&g, &store, &bank, h).unwrap()).unwrap();
        assert!(out.value().max_abs_diff(&euler.value()) < 1e-9);
        assert!(gv.value().data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn gate_stays_strictly_inside_unit_interval() {
        let mut store = ParamStore::new();
        let bank = DerivativeBank::new(&mut store, "f", 2, 3, &mut rng(9)).unwrap();
        bank.randomize_combiner(&mut store, 1.0, &mut rng(10)).unwrap();
        let gate = GateParams::new(&mut store, "gate", 2, GateKind::PerElement);
        randomize_gate(&mut store, &gate, 2.0, &mut rng(11)).unwrap();
        let g = Graph::new();
        let h = g.constant(Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng(12)));
        let (_, gv) = adaptive_rk2_step(&g, &store, &bank, &gate, h).unwrap();
        assert!(gv.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn adaptive_step_gradients() {
        for kind in [GateKind::PerElement, GateKind::Scalar] {
            let mut store = ParamStore::new();
            let bank = DerivativeBank::new(&mut store, "f", 2, 3, &mut rng(13)).unwrap();
            bank.randomize_combiner(&mut store, 0.3, &mut rng(14)).unwrap();
            store.set(bank.bias, Tensor::randn(&[2], 0.1, &mut rng(15))).unwrap();
            let gate = GateParams::new(&mut store, "gate", 2, kind);
            randomize_gate(&mut store, &gate, 0.5, &mut rng(16)).unwrap();
            let bshape = store.value(gate.bias).shape().to_vec();
            store.set(gate.bias, Tensor::randn(&bshape, 0.5, &mut rng(17))).unwrap();
            let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng(18));
            let r = check_param_gradients(
                &store,
                |g, s| {
                    let (out, _) = adaptive_rk2_step(g, s, &bank, &gate, g.constant(x.clone()))?;
                    Ok(out.square().mean())
                },
                |_| true,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{kind:?}: {r}");
        }
    }

    #[test]
    fn both_stages_share_bank_parameters() {
        let mut store = ParamStore::new();
        let bank = DerivativeBank::new(&mut store, "f", 1, 3, &mut rng(19)).unwrap();
        let before = store.num_elements();
        let g = Graph::new();
        let h = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let n0 = g.len();
        rk2_step(&g, &store, &bank, h).unwrap();
        assert!(g.len() > n0);
        assert_eq!(store.num_elements(), before);
    }

    #[test]
    fn non_finite_stage_is_reported() {
        let mut store = ParamStore::new();
        let bank = scalar_bank(&mut store, 1, 1e300);
        let g = Graph::new();
        let err = rk2_step(&g, &store, &bank, g.constant(Tensor::full(&[1, 1, 3, 3], 1e300))).unwrap_err();
        assert!(err.to_string().contains("h1"), "{err}");
    }

    #[test]
    fn probe_basics() {
        let one = gradient_norm_probe(1, RkMode::Adaptive, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0] > 0.0);
        for mode in [RkMode::Conventional, RkMode::Adaptive] {
            assert_eq!(gradient_norm_probe(4, mode, 5).unwrap(), gradient_norm_probe(4, mode, 5).unwrap());
        }
        assert!(gradient_norm_probe(0, RkMode::Adaptive, 0).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("adaptive".parse::<RkMode>().unwrap(), RkMode::Adaptive);
        assert_eq!(RkMode::Conventional.to_string().parse::<RkMode>().unwrap(), RkMode::Conventional);
        assert!("heun".parse::<RkMode>().is_err());
    }
}
