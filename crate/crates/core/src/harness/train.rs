//! Training loop and run directories.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::splitmix64;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::objectives::{total_loss, LossBreakdown};
use crate::optim::{clip_grad_norm, Adam};
use crate::physics::moment_loss;

use super::checkpoint;
use super::config::{RunConfig, TrainMode};
use super::dataset::{build_dataset, Dataset};

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.stck";
pub const CONFIG_FILE: &str = "config.txt";

const BATCH_SALT: u64 = 0xba7c_4e55_0000_0002;

/// One metrics log record.
pub fn log_line(step: usize, b: &LossBreakdown) -> String {
    format!("step={step} total={} mse={} h1={} moment={}", b.total, b.mse, b.h1, b.moment)
}

/// Parses a metrics log back into `(step, breakdown)` records.
pub fn parse_log(text: &str) -> Result<Vec<(usize, LossBreakdown)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Config(format!("metrics log line {}: {line:?}", n + 1));
            let mut step = None;
            let mut b = LossBreakdown::default();
            for field in line.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(bad)?;
                match k {
                    "step" => step = Some(v.parse().map_err(|_| bad())?),
                    "total" => b.total = v.parse().map_err(|_| bad())?,
                    "mse" => b.mse = v.parse().map_err(|_| bad())?,
                    "h1" => b.h1 = v.parse().map_err(|_| bad())?,
                    "moment" => b.moment = v.parse().map_err(|_| bad())?,
                    _ => return Err(bad()),
                }
            }
            Ok((step.ok_or_else(bad)?, b))
        })
        .collect()
}

/// Runs `cfg.train.steps` optimizer steps on `model`. `data` is required in
/// data mode and ignored in moment-only mode. `on_step` sees the loss of each
/// step before its update.
pub fn train_loop(
    model: &mut Model,
    cfg: &RunConfig,
    data: Option<&Dataset>,
    on_step: &mut dyn FnMut(usize, &LossBreakdown) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    let t = &cfg.train;
    let (t_in, t_out) = (cfg.data.t_in, cfg.data.t_out);
    let data = match t.mode {
        TrainMode::Data => Some(data.ok_or_else(|| Error::Config("data mode needs a dataset".into()))?),
        TrainMode::MomentOnly => None,
    };
    if let Some(d) = data {
        if d.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
    }
    let mut adam = Adam::new(&model.store, t.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ BATCH_SALT));
    let mut history = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        adam.config.lr = t.lr_at(step);
        model.store.zero_grad();
        let g = Graph::new();
        let (loss, breakdown) = match data {
            Some(d) => {
                let indices: Vec<usize> = (0..t.batch_size).map(|_| rng.random_range(0..d.train.len())).collect();
                let batch = d.train_batch(&indices, t_in)?;
                let pred = model
                    .rollout(&g, &model.store, g.constant(batch.inputs), t_out)
                    .map_err(|e| at_step(step, e))?;
                let target = g.constant(batch.targets);
                total_loss(&g, &model.store, pred, target, model.bank(), &cfg.loss)
                    .map_err(|e| at_step(step, e))?
            }
            None => {
                let m = moment_loss(&g, &model.store, model.bank())?;
                let loss = m.mul_scalar(cfg.loss.moment);
                let b = LossBreakdown {
                    total: loss.item(),
                    mse: 0.0,
                    h1: 0.0,
                    moment: m.item(),
                };
                if !b.total.is_finite() {
                    return Err(at_step(step, Error::NonFinite(format!("loss {b:?}"))));
                }
                (loss, b)
            }
        };
        g.backward_into(loss, &mut model.store)?;
        drop(g);
        clip_grad_norm(&mut model.store, t.clip_norm);
        adam.step(&mut model.store);
        on_step(step, &breakdown)?;
        history.push(breakdown);
    }
    Ok(history)
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("at step {step}: {m}")),
        Error::Diverged(m) => Error::Diverged(format!("at step {step}: {m}")),
        other => other,
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub dataset: Option<Dataset>,
    pub history: Vec<LossBreakdown>,
    pub out_dir: PathBuf,
}

/// Builds the model for `cfg`, plus the dataset in data mode.
pub fn prepare(cfg: &RunConfig) -> Result<(Model, Option<Dataset>)> {
    cfg.validate()?;
    let (frame, dataset) = match cfg.train.mode {
        TrainMode::Data => {
            let d = build_dataset(cfg)?;
            (d.frame, Some(d))
        }
        TrainMode::MomentOnly => ([1, cfg.data.height, cfg.data.width], None),
    };
    let model = Model::new(cfg.model_config(frame), cfg.seed)?;
    Ok((model, dataset))
}

/// Trains per `cfg` and writes the metrics log, checkpoint and resolved
/// config into `cfg.out_dir`. `progress` receives every log line.
pub fn run_training(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let (mut model, dataset) = prepare(cfg)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut log = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let history = train_loop(&mut model, cfg, dataset.as_ref(), &mut |step, b| {
        let line = log_line(step, b);
        writeln!(log, "{line}")?;
        progress(&line);
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &model.store)?;
    Ok(TrainOutcome {
        model,
        dataset,
        history,
        out_dir: out,
    })
}

/// Rebuilds a trained model from a run directory's config and checkpoint.
pub fn load_run(dir: &Path, frame: [usize; 3]) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model = Model::new(cfg.model_config(frame), cfg.seed)?;
    checkpoint::load_into(&dir.join(CHECKPOINT_FILE), &mut model.store)?;
    Ok((cfg, model))
}
