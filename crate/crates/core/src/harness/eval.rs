//! Forecast evaluation and reports.

use std::fmt::Write as _;

use crate::data::{persistence_baseline, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::{nmse, per_lead, LeadMetrics};
use crate::network::Model;
use crate::tensor::Tensor;

use super::config::EvalConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub leads: Vec<LeadMetrics>,
    /// Mean over lead times of each metric.
    pub aggregate: LeadMetrics,
    pub sequences: usize,
    pub data_range: f64,
}

/// SSIM data range: the configured one, or the target's value span.
pub fn data_range(cfg: &EvalConfig, target: &Tensor) -> f64 {
    if cfg.ssim_range > 0.0 {
        return cfg.ssim_range;
    }
    let lo = target.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = target.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

fn mean_option(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let all: Option<Vec<f64>> = v.collect();
    all.filter(|a| !a.is_empty()).map(|a| a.iter().sum::<f64>() / a.len() as f64)
}

/// Scores `[b, T, C, H, W]` forecasts. N-MSE is kept only when
/// `with_nmse` is set.
pub fn score(pred: &Tensor, target: &Tensor, cfg: &EvalConfig, with_nmse: bool) -> Result<EvalReport> {
    let range = data_range(cfg, target);
    let mut leads = per_lead(pred, target, cfg.reduction, range)?;
    if with_nmse {
        for (t, l) in leads.iter_mut().enumerate() {
            l.nmse = Some(nmse(&pred.index_axis1(t), &target.index_axis1(t))?);
        }
    } else {
        for l in leads.iter_mut() {
            l.nmse = None;
        }
    }
    let n = leads.len() as f64;
    let aggregate = LeadMetrics {
        mse: leads.iter().map(|l| l.mse).sum::<f64>() / n,
        mae: leads.iter().map(|l| l.mae).sum::<f64>() / n,
        ssim: mean_option(leads.iter().map(|l| l.ssim)),
        nmse: mean_option(leads.iter().map(|l| l.nmse)),
    };
    Ok(EvalReport {
        leads,
        aggregate,
        sequences: pred.shape()[0],
        data_range: range,
    })
}

/// Model forecasts for every sequence of `inputs`, `batch` at a time.
pub fn predict_all(model: &Model, inputs: &Tensor, t_out: usize, batch: usize) -> Result<Tensor> {
    if batch == 0 {
        return Err(Error::Config("eval.batch_size must be ≥ 1".into()));
    }
    let n = inputs.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let chunk = Tensor::stack(&idx.iter().map(|&i| inputs.index_axis0(i)).collect::<Vec<_>>())?;
        let p = model.predict(&chunk, t_out)?;
        shape = p.shape().to_vec();
        data.extend_from_slice(p.data());
    }
    shape[0] = n;
    Tensor::new(&shape, data)
}

pub fn evaluate_model(model: &Model, eval: &SequenceBatch, cfg: &EvalConfig, with_nmse: bool) -> Result<EvalReport> {
    let pred = predict_all(model, &eval.inputs, eval.t_out(), cfg.batch_size)?;
    score(&pred, &eval.targets, cfg, with_nmse)
}

pub fn evaluate_persistence(eval: &SequenceBatch, cfg: &EvalConfig, with_nmse: bool) -> Result<EvalReport> {
    let pred = persistence_baseline(&eval.inputs, eval.t_out())?;
    score(&pred, &eval.targets, cfg, with_nmse)
}

fn metric_fields(prefix: &str, m: &LeadMetrics) -> String {
    let mut s = format!("{prefix}mse={} {prefix}mae={}", m.mse, m.mae);
    if let Some(v) = m.ssim {
        write!(s, " {prefix}ssim={v}").expect("string write");
    }
    if let Some(v) = m.nmse {
        write!(s, " {prefix}nmse={v}").expect("string write");
    }
    s
}

/// Machine-readable lines `lead=<t> mse=… mae=… [ssim=…] [nmse=…]`, 1-based
/// leads, then `lead=all` for the aggregate. A baseline adds its metrics
/// under `persistence_` keys on the same lines.
pub fn key_value_lines(model: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let mut out = String::new();
    let rows = model.leads.iter().enumerate().map(|(t, m)| ((t + 1).to_string(), m, baseline.map(|b| &b.leads[t])));
    let agg = std::iter::once(("all".to_string(), &model.aggregate, baseline.map(|b| &b.aggregate)));
    for (lead, m, b) in rows.chain(agg) {
        let mut line = format!("lead={lead} {}", metric_fields("", m));
        if let Some(b) = b {
            write!(line, " {}", metric_fields("persistence_", b)).expect("string write");
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// Human-readable per-lead table.
pub fn table(model: &EvalReport, baseline: Option<&EvalReport>) -> String {
    let mut cols = vec!["mse", "mae", "ssim"];
    if model.aggregate.nmse.is_some() {
        cols.push("nmse");
    }
    let values = |m: &LeadMetrics| -> Vec<String> {
        let mut v = vec![cell(Some(m.mse)), cell(Some(m.mae)), cell(m.ssim)];
        if model.aggregate.nmse.is_some() {
            v.push(cell(m.nmse));
        }
        v
    };
    let mut header = format!("{:>5}", "lead");
    for c in &cols {
        write!(header, " {c:>12}").expect("string write");
    }
    if baseline.is_some() {
        for c in &cols {
            write!(header, " {:>12}", format!("pers_{c}")).expect("string write");
        }
    }
    let mut out = header.clone();
    out.push('\n');
    out.push_str(&"-".repeat(header.len()));
    out.push('\n');
    let rows = model.leads.iter().enumerate().map(|(t, m)| ((t + 1).to_string(), m, baseline.map(|b| &b.leads[t])));
    let agg = std::iter::once(("mean".to_string(), &model.aggregate, baseline.map(|b| &b.aggregate)));
    for (lead, m, b) in rows.chain(agg) {
        let mut line = format!("{lead:>5}");
        for v in values(m) {
            write!(line, " {v:>12}").expect("string write");
        }
        if let Some(b) = b {
            for v in values(b) {
                write!(line, " {v:>12}").expect("string write");
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}
