//! Central-difference verification of reverse-mode gradients.
//!
//! The per-element discrepancy is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)` where `floor = SCALE_FLOOR * max|analytic|` over every
//! checked element. The floor keeps elements whose true gradient is many
//! orders below the rest of the vector (or structurally zero) from being
//! judged on rounding noise alone.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const SCALE_FLOOR: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter or input name, flat index)` of the worst element.
    pub worst: (String, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} elements, max rel {:.3e} (abs {:.3e}) at {}[{}], tol {:.1e}: {}",
            self.checked,
            self.max_rel_error,
            self.max_abs_error,
            self.worst.0,
            self.worst.1,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// `(name, analytic, numeric)` per checked tensor.
type Pairs = Vec<(String, Vec<f64>, Vec<f64>)>;

fn compare(pairs: &Pairs, tol: f64) -> GradCheckReport {
    let scale = pairs
        .iter()
        .flat_map(|(_, a, _)| a.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (SCALE_FLOOR * scale).max(ABS_FLOOR);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (pairs.first().map(|p| p.0.clone()).unwrap_or_default(), 0),
        checked: pairs.iter().map(|p| p.1.len()).sum(),
        tol,
    };
    for (name, analytic, numeric) in pairs {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
        }
    }
    report
}

fn eval_scalar(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.len() != 1 {
        return Err(Error::InvalidShape {
            op: "check_gradient",
            shape: t.shape().to_vec(),
            reason: "objective must be scalar".into(),
        });
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("gradient-check objective".into()));
    }
    Ok(y)
}

/// Compares the gradient of `f` at `x` with central differences of step `step`.
pub fn check_gradient<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&g, leaf)?;
    eval_scalar(out)?;
    let analytic = g
        .backward(out)?
        .wrt(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = {
            let g = Graph::new();
            let v = g.constant(probe.clone());
            eval_scalar(f(&g, v)?)?
        };
        probe.data_mut()[i] = orig - step;
        let fm = {
            let g = Graph::new();
            let v = g.constant(probe.clone());
            eval_scalar(f(&g, v)?)?
        };
        probe.data_mut()[i] = orig;
        *n = (fp - fm) / (2.0 * step);
    }
    Ok(compare(&vec![("x".to_string(), analytic.into_data(), numeric)], tol))
}

/// Gradient check over every element of every parameter in `store` accepted by
/// `select`. `f` must build its objective from `store` values only.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    select: impl Fn(&str) -> bool,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut work = store.clone();
    work.zero_grad();
    {
        let g = Graph::new();
        let out = f(&g, &work)?;
        eval_scalar(out)?;
        g.backward_into(out, &mut work)?;
    }
    let mut pairs = Pairs::new();
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        let name = work.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let analytic = work.grad(id).clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let fp = {
                let g = Graph::new();
                eval_scalar(f(&g, &work)?)?
            };
            work.value_mut(id).data_mut()[i] = orig - step;
            let fm = {
                let g = Graph::new();
                eval_scalar(f(&g, &work)?)?
            };
            work.value_mut(id).data_mut()[i] = orig;
            *n = (fp - fm) / (2.0 * step);
        }
        pairs.push((name, analytic.into_data(), numeric));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no parameters selected for gradient check".into()));
    }
    Ok(compare(&pairs, tol))
}
