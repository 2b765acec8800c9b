//! Moment-constrained derivative filters.
//!
//! For an odd order `k` with centre `c = (k-1)/2`, the moment matrix of a
//! `k×k` filter is
//!
//! ```text
//! M(a, b) = 1/(a! b!) · Σ_{u,v} w[u, v] · (u - c)^a · (v - c)^b
//! ```
//!
//! with `u` the row index. Applied by cross-correlation to a smooth field, a
//! filter whose moment matrix is the one-hot `e_{ij}` returns
//! `∂^{i+j} f / ∂x^i ∂y^j` to order `k - i - j`, where `x` runs down the rows
//! and `y` along the columns.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{invalid_shape, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the initial filter noise.
pub const FILTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentMatrix {
    pub k: usize,
    /// `[k, k]`, indexed `(a, b)`.
    pub entries: Tensor,
}

impl MomentMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries.at(&[a, b])
    }
}

fn check_order(op: &'static str, k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("{op}: order must be odd, got {k}")));
    }
    Ok(())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// The linear moment map as a `[k², k²]` matrix `P` with
/// `P[u·k + v, a·k + b] = (u-c)^a (v-c)^b / (a! b!)`, so that the flattened
/// moment matrix is `w_flat · P`.
pub fn moment_map(k: usize) -> Result<Tensor> {
    check_order("moment_map", k)?;
    let c = (k / 2) as f64;
    let n = k * k;
    Ok(Tensor::from_fn(&[n, n], |i| {
        let (u, v) = ((i[0] / k) as f64 - c, (i[0] % k) as f64 - c);
        let (a, b) = (i[1] / k, i[1] % k);
        u.powi(a as i32) * v.powi(b as i32) / (factorial(a) * factorial(b))
    }))
}

pub fn moment_of(filter: &Tensor) -> Result<MomentMatrix> {
    let shape = filter.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(invalid_shape("moment_of", shape, "filter must be square [k, k]"));
    }
    let k = shape[0];
    let p = moment_map(k)?;
    let n = k * k;
    let mut m = vec![0.0; n];
    for (i, &w) in filter.data().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (j, mj) in m.iter_mut().enumerate() {
            *mj += w * p.data()[i * n + j];
        }
    }
    Ok(MomentMatrix {
        k,
        entries: Tensor::new(&[k, k], m)?,
    })
}

pub fn target_moment(k: usize, i: usize, j: usize) -> Result<MomentMatrix> {
    check_order("target_moment", k)?;
    if i >= k || j >= k {
        return Err(Error::InvalidArgument(format!(
            "target_moment: index ({i}, {j}) out of range for k = {k}"
        )));
    }
    let mut entries = Tensor::zeros(&[k, k]);
    entries.set(&[i, j], 1.0);
    Ok(MomentMatrix { k, entries })
}

/// Moment matrices of a stack of filters `[n, k, k]`, as a graph op.
pub fn moments_var<'g>(filters: Var<'g>) -> Result<Var<'g>> {
    let shape = filters.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(invalid_shape("moments_var", &shape, "expected [n, k, k]"));
    }
    let (n, k) = (shape[0], shape[1]);
    let p = filters.graph().constant(moment_map(k)?);
    filters.reshape(&[n, k * k])?.matmul(&p)?.reshape(&[n, k, k])
}

/// The exact filter for every target `(i, j)`, ordered `i·k + j`. These are
/// the rows of `P⁻¹`.
pub fn solve_exact_stencils(k: usize) -> Result<Vec<Tensor>> {
    let p = moment_map(k)?;
    let n = k * k;
    let inv = DMatrix::from_row_slice(n, n, p.data())
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument(format!("moment system for k = {k} is singular")))?;
    (0..n)
        .map(|r| Tensor::new(&[k, k], inv.row(r).iter().copied().collect()))
        .collect()
}

/// `k²` depthwise derivative filters followed by a 1×1 combiner; the
/// right-hand side `F` of the integrator.
#[derive(Clone, Debug)]
pub struct DerivativeBank {
    pub k: usize,
    pub channels: usize,
    /// `[k², k, k]`; filter `i·k + j` targets moment `(i, j)`.
    pub filters: ParamId,
    /// `[c, k²·c, 1, 1]`, input channel `ch·k² + m`.
    pub combiner: ParamId,
    pub bias: ParamId,
}

impl DerivativeBank {
    /// Filters from `N(0, FILTER_INIT_STD²)`, combiner and bias zero.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        check_order("DerivativeBank", k)?;
        if channels == 0 {
            return Err(Error::InvalidArgument("DerivativeBank: zero channels".into()));
        }
        let n = k * k;
        Ok(DerivativeBank {
            k,
            channels,
            filters: store.add(format!("{name}.filters"), Tensor::randn(&[n, k, k], FILTER_INIT_STD, rng)),
            combiner: store.add(format!("{name}.combiner"), Tensor::zeros(&[channels, n * channels, 1, 1])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        })
    }

    pub fn num_filters(&self) -> usize {
        self.k * self.k
    }

    pub fn num_params(&self) -> usize {
        let n = self.num_filters();
        n * self.k * self.k + self.channels * n * self.channels + self.channels
    }

    /// Overwrites the filters with the exact stencils.
    pub fn set_exact_stencils(&self, store: &mut ParamStore) -> Result<()> {
        let stencils = solve_exact_stencils(self.k)?;
        let flat: Vec<f64> = stencils.iter().flat_map(|s| s.data().iter().copied()).collect();
        store.set(self.filters, Tensor::new(&[self.num_filters(), self.k, self.k], flat)?)
    }

    /// Combiner that maps every channel to `Σ_m coeffs[m] · d_m(channel)`.
    pub fn set_channelwise_combiner(&self, store: &mut ParamStore, coeffs: &[f64]) -> Result<()> {
        let n = self.num_filters();
        if coeffs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "set_channelwise_combiner: {} coefficients for {n} filters",
                coeffs.len()
            )));
        }
        let c = self.channels;
        let mut w = Tensor::zeros(&[c, n * c, 1, 1]);
        for ch in 0..c {
            for (m, &coef) in coeffs.iter().enumerate() {
                w.set(&[ch, ch * n + m, 0, 0], coef);
            }
        }
        store.set(self.combiner, w)
    }

    /// Combiner weights drawn from `N(0, std²)`.
    pub fn randomize_combiner(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        let n = self.num_filters();
        let c = self.channels;
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let w = Tensor::from_fn(&[c, n * c, 1, 1], |_| normal.sample(rng));
        store.set(self.combiner, w)
    }
}

/// `Σ_{i,j} ‖M(w_{ij}) - e_{ij}‖²` over the bank's filters.
pub fn moment_loss<'g>(g: &'g Graph, store: &ParamStore, bank: &DerivativeBank) -> Result<Var<'g>> {
    let m = moments_var(g.param(store, bank.filters))?;
    let n = bank.num_filters();
    let target = g.constant(Tensor::identity(n).reshape(&[n, bank.k, bank.k])?);
    Ok(m.sub(&target)?.square().sum())
}

/// `F(h)`: depthwise derivative channels then the 1×1 combiner.
pub fn derivative_bank_apply<'g>(g: &'g Graph, store: &ParamStore, bank: &DerivativeBank, h: Var<'g>) -> Result<Var<'g>> {
    let shape = h.shape();
    if shape.len() != 4 || shape[1] != bank.channels {
        return Err(invalid_shape(
            "derivative_bank_apply",
            &shape,
            format!("expected [b, {}, H, W]", bank.channels),
        ));
    }
    if shape[2] < bank.k || shape[3] < bank.k {
        return Err(invalid_shape(
            "derivative_bank_apply",
            &shape,
            format!("field smaller than the {0}×{0} kernel", bank.k),
        ));
    }
    let d = h.depthwise_bank(&g.param(store, bank.filters))?;
    d.conv2d(&g.param(store, bank.combiner), Some(&g.param(store, bank.bias)), 1, Padding::Same)
}
