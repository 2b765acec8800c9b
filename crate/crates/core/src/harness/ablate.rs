//! Patch-size, upsampler and H1 sweeps.

use std::fmt::Write as _;

use crate::error::Result;
use crate::network::{Model, Upsampler};
use crate::objectives::LossWeights;

use super::config::{Generator, RunConfig};
use super::dataset::{build_dataset, Dataset};
use super::eval::{evaluate_model, evaluate_persistence, EvalReport};
use super::train::train_loop;

pub const PATCH_SIZES: [usize; 3] = [2, 4, 8];
pub const UPSAMPLERS: [Upsampler; 2] = [Upsampler::TransposedConv, Upsampler::Bilinear];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub patch_size: usize,
    pub upsampler: Upsampler,
    pub h1: f64,
    pub final_loss: f64,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("p={} up={} h1={}", self.patch_size, self.upsampler, self.h1)
    }
}

/// Every configuration of the sweep, in table order.
pub fn ablation_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for p in PATCH_SIZES {
        for up in UPSAMPLERS {
            for h1 in [0.0, LossWeights::default().h1] {
                let mut cfg = base.clone();
                cfg.model.patch_size = p;
                cfg.model.upsampler = up;
                cfg.loss.h1 = h1;
                out.push(cfg);
            }
        }
    }
    out
}

/// Trains and evaluates every grid point on one shared dataset.
pub fn run_ablation(base: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<(Vec<AblationRow>, EvalReport)> {
    let grid = ablation_grid(base);
    for cfg in &grid {
        cfg.validate()?;
    }
    let data: Dataset = build_dataset(base)?;
    let with_nmse = base.data.generator == Generator::NavierStokes;
    let baseline = evaluate_persistence(&data.eval, &base.eval, with_nmse)?;
    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut model = Model::new(cfg.model_config(data.frame), cfg.seed)?;
        let history = train_loop(&mut model, &cfg, Some(&data), &mut |_, _| Ok(()))?;
        let report = evaluate_model(&model, &data.eval, &cfg.eval, with_nmse)?;
        let row = AblationRow {
            patch_size: cfg.model.patch_size,
            upsampler: cfg.model.upsampler,
            h1: cfg.loss.h1,
            final_loss: history.last().map_or(f64::NAN, |b| b.total),
            report,
        };
        progress(&format!("{} mse={}", row.label(), row.report.aggregate.mse));
        rows.push(row);
    }
    Ok((rows, baseline))
}

/// Row labels from best to worst aggregate MSE, joined by `<` where the
/// ordering is strict and `=` on ties.
pub fn ordering(rows: &[AblationRow]) -> String {
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.report.aggregate.mse.total_cmp(&b.report.aggregate.mse));
    let mut out = String::new();
    for (i, r) in sorted.iter().enumerate() {
        if i > 0 {
            let tie = r.report.aggregate.mse == sorted[i - 1].report.aggregate.mse;
            out.push_str(if tie { " = " } else { " < " });
        }
        write!(out, "[{}]", r.label()).expect("string write");
    }
    out
}

pub fn is_strict(rows: &[AblationRow]) -> bool {
    let mut m: Vec<f64> = rows.iter().map(|r| r.report.aggregate.mse).collect();
    m.sort_by(f64::total_cmp);
    m.windows(2).all(|w| w[0] < w[1])
}

/// Table of aggregate metrics per configuration, then the MSE ordering.
pub fn ablation_table(rows: &[AblationRow], baseline: &EvalReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    let mut out = format!(
        "{:>5} {:>15} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
        "patch", "upsampler", "h1", "mse", "mae", "ssim", "train_loss"
    );
    for r in rows {
        let a = &r.report.aggregate;
        writeln!(
            out,
            "{:>5} {:>15} {:>6} {:>12} {:>12} {:>12} {:>12}",
            r.patch_size,
            r.upsampler.to_string(),
            r.h1,
            fmt(Some(a.mse)),
            fmt(Some(a.mae)),
            fmt(a.ssim),
            fmt(Some(r.final_loss))
        )
        .expect("string write");
    }
    let b = &baseline.aggregate;
    writeln!(
        out,
        "{:>5} {:>15} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "-",
        "persistence",
        "-",
        fmt(Some(b.mse)),
        fmt(Some(b.mae)),
        fmt(b.ssim),
        "-"
    )
    .expect("string write");
    writeln!(out, "ordering by mse: {}", ordering(rows)).expect("string write");
    writeln!(out, "strict: {}", is_strict(rows)).expect("string write");
    out
}

/// `patch=… upsampler=… h1=… mse=… …` lines, one per configuration.
pub fn ablation_key_values(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let a = &r.report.aggregate;
        write!(out, "patch={} upsampler={} h1={} mse={} mae={}", r.patch_size, r.upsampler, r.h1, a.mse, a.mae)
            .expect("string write");
        if let Some(s) = a.ssim {
            write!(out, " ssim={s}").expect("string write");
        }
        if let Some(s) = a.nmse {
            write!(out, " nmse={s}").expect("string write");
        }
        out.push('\n');
    }
    out
}
