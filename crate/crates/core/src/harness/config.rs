//! Run configuration: `key = value` lines, `#` comments, dotted sections.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::integrator::{GateKind, RkMode};
use crate::metrics::Reduction;
use crate::network::{ModelConfig, Upsampler};
use crate::objectives::LossWeights;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Blobs,
    AdvectionDiffusion,
    NavierStokes,
    /// Pre-generated `train`/`test` splits in `data.dir`.
    Directory,
}

impl FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Generator::Blobs),
            "advection_diffusion" => Ok(Generator::AdvectionDiffusion),
            "navier_stokes" => Ok(Generator::NavierStokes),
            "dir" => Ok(Generator::Directory),
            _ => Err(Error::Config(format!(
                "unknown generator {s:?} (blobs|advection_diffusion|navier_stokes|dir)"
            ))),
        }
    }
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Generator::Blobs => "blobs",
            Generator::AdvectionDiffusion => "advection_diffusion",
            Generator::NavierStokes => "navier_stokes",
            Generator::Directory => "dir",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Forecast loss on sequences plus the moment penalty.
    Data,
    /// `λ_m · moment_loss` alone; no data is touched.
    MomentOnly,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(TrainMode::Data),
            "moment_only" => Ok(TrainMode::MomentOnly),
            _ => Err(Error::Config(format!("unknown mode {s:?} (data|moment_only)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Data => "data",
            TrainMode::MomentOnly => "moment_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub generator: Generator,
    pub dir: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub n_blobs: usize,
    pub vx: f64,
    pub vy: f64,
    /// Advection–diffusion ν.
    pub diffusivity: f64,
    pub substeps: usize,
    pub cutoff: f64,
    /// Navier–Stokes ν.
    pub viscosity: f64,
    pub ns_dt: f64,
    pub forcing: f64,
    /// Simulated time between frames for the PDE generators.
    pub frame_dt: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: Generator::Blobs,
            dir: None,
            height: 64,
            width: 64,
            t_in: 10,
            t_out: 10,
            train_sequences: 2000,
            eval_sequences: 64,
            n_blobs: 2,
            vx: 0.5,
            vy: 0.25,
            diffusivity: 0.02,
            substeps: 4,
            cutoff: 4.0,
            viscosity: 1e-3,
            ns_dt: 1e-2,
            forcing: 0.1,
            frame_dt: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `≤ 0` disables clipping.
    pub clip_norm: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by
    /// `lr_decay_factor`; `≥ 1` never decays.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Data,
            steps: 3000,
            batch_size: 4,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.lr_decay_at * self.steps as f64 {
            self.adam.lr * self.lr_decay_factor
        } else {
            self.adam.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub reduction: Reduction,
    /// SSIM dynamic range; `0` uses the target range of the evaluation set.
    pub ssim_range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 8,
            reduction: Reduction::Mean,
            ssim_range: 0.0,
        }
    }
}

/// Everything a run needs. Frame shape comes from `data`, so the model
/// section only holds architecture choices.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "mode",
    "steps",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "lr_decay_at",
    "lr_decay_factor",
    "model.patch_size",
    "model.embed_dim",
    "model.transformer_blocks",
    "model.fourier_blocks",
    "model.window_size",
    "model.rk_mode",
    "model.gate",
    "model.k",
    "model.upsampler",
    "loss.h1",
    "loss.moment",
    "data.generator",
    "data.dir",
    "data.height",
    "data.width",
    "data.t_in",
    "data.t_out",
    "data.train_sequences",
    "data.eval_sequences",
    "data.n_blobs",
    "data.vx",
    "data.vy",
    "data.diffusivity",
    "data.substeps",
    "data.cutoff",
    "data.viscosity",
    "data.ns_dt",
    "data.forcing",
    "data.frame_dt",
    "eval.batch_size",
    "eval.reduction",
    "eval.ssim_range",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::SumPerFrame => "sum_per_frame",
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "mode" => self.train.mode = v.parse()?,
            "steps" => self.train.steps = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.adam.lr = parse(key, v)?,
            "beta1" => self.train.adam.beta1 = parse(key, v)?,
            "beta2" => self.train.adam.beta2 = parse(key, v)?,
            "eps" => self.train.adam.eps = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "lr_decay_at" => self.train.lr_decay_at = parse(key, v)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse(key, v)?,
            "model.patch_size" => self.model.patch_size = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.transformer_blocks" => self.model.transformer_blocks = parse(key, v)?,
            "model.fourier_blocks" => self.model.fourier_blocks = parse(key, v)?,
            "model.window_size" => self.model.window_size = parse(key, v)?,
            "model.rk_mode" => self.model.rk.mode = v.parse::<RkMode>()?,
            "model.gate" => self.model.gate = v.parse::<GateKind>()?,
            "model.k" => self.model.k = parse(key, v)?,
            "model.upsampler" => self.model.upsampler = v.parse::<Upsampler>()?,
            "loss.h1" => self.loss.h1 = parse(key, v)?,
            "loss.moment" => self.loss.moment = parse(key, v)?,
            "data.generator" => self.data.generator = v.parse()?,
            "data.dir" => self.data.dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.t_in" => self.data.t_in = parse(key, v)?,
            "data.t_out" => self.data.t_out = parse(key, v)?,
            "data.train_sequences" => self.data.train_sequences = parse(key, v)?,
            "data.eval_sequences" => self.data.eval_sequences = parse(key, v)?,
            "data.n_blobs" => self.data.n_blobs = parse(key, v)?,
            "data.vx" => self.data.vx = parse(key, v)?,
            "data.vy" => self.data.vy = parse(key, v)?,
            "data.diffusivity" => self.data.diffusivity = parse(key, v)?,
            "data.substeps" => self.data.substeps = parse(key, v)?,
            "data.cutoff" => self.data.cutoff = parse(key, v)?,
            "data.viscosity" => self.data.viscosity = parse(key, v)?,
            "data.ns_dt" => self.data.ns_dt = parse(key, v)?,
            "data.forcing" => self.data.forcing = parse(key, v)?,
            "data.frame_dt" => self.data.frame_dt = parse(key, v)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, v)?,
            "eval.reduction" => self.eval.reduction = v.parse()?,
            "eval.ssim_range" => self.eval.ssim_range = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with the lines of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn value_of(&self, key: &str) -> String {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        match key {
            "seed" => s(self.seed),
            "out_dir" => s(self.out_dir.display()),
            "mode" => s(self.train.mode),
            "steps" => s(self.train.steps),
            "batch_size" => s(self.train.batch_size),
            "lr" => s(self.train.adam.lr),
            "beta1" => s(self.train.adam.beta1),
            "beta2" => s(self.train.adam.beta2),
            "eps" => s(self.train.adam.eps),
            "clip_norm" => s(self.train.clip_norm),
            "lr_decay_at" => s(self.train.lr_decay_at),
            "lr_decay_factor" => s(self.train.lr_decay_factor),
            "model.patch_size" => s(self.model.patch_size),
            "model.embed_dim" => s(self.model.embed_dim),
            "model.transformer_blocks" => s(self.model.transformer_blocks),
            "model.fourier_blocks" => s(self.model.fourier_blocks),
            "model.window_size" => s(self.model.window_size),
            "model.rk_mode" => s(self.model.rk.mode),
            "model.gate" => s(self.model.gate),
            "model.k" => s(self.model.k),
            "model.upsampler" => s(self.model.upsampler),
            "loss.h1" => s(self.loss.h1),
            "loss.moment" => s(self.loss.moment),
            "data.generator" => s(self.data.generator),
            "data.dir" => self.data.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default(),
            "data.height" => s(self.data.height),
            "data.width" => s(self.data.width),
            "data.t_in" => s(self.data.t_in),
            "data.t_out" => s(self.data.t_out),
            "data.train_sequences" => s(self.data.train_sequences),
            "data.eval_sequences" => s(self.data.eval_sequences),
            "data.n_blobs" => s(self.data.n_blobs),
            "data.vx" => s(self.data.vx),
            "data.vy" => s(self.data.vy),
            "data.diffusivity" => s(self.data.diffusivity),
            "data.substeps" => s(self.data.substeps),
            "data.cutoff" => s(self.data.cutoff),
            "data.viscosity" => s(self.data.viscosity),
            "data.ns_dt" => s(self.data.ns_dt),
            "data.forcing" => s(self.data.forcing),
            "data.frame_dt" => s(self.data.frame_dt),
            "eval.batch_size" => s(self.eval.batch_size),
            "eval.reduction" => s(reduction_name(self.eval.reduction)),
            "eval.ssim_range" => s(self.eval.ssim_range),
            _ => unreachable!("KEYS and value_of out of sync: {key}"),
        }
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    /// Model configuration for frames of shape `[C, H, W]`.
    pub fn model_config(&self, frame: [usize; 3]) -> ModelConfig {
        ModelConfig {
            channels: frame[0],
            height: frame[1],
            width: frame[2],
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        if !(t.adam.lr >= 0.0 && t.adam.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", t.adam.lr)));
        }
        if !(t.lr_decay_factor >= 0.0 && t.lr_decay_at.is_finite()) {
            return Err(Error::Config("lr_decay_factor must be ≥ 0 and lr_decay_at finite".into()));
        }
        if self.data.t_in == 0 || self.data.t_out == 0 {
            return Err(Error::Config("data.t_in and data.t_out must be ≥ 1".into()));
        }
        if self.data.generator == Generator::Directory && self.data.dir.is_none() {
            return Err(Error::Config("data.generator = dir needs data.dir".into()));
        }
        self.loss.validate()?;
        self.model_config([1, self.data.height, self.data.width]).validate()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn every_key_is_settable_and_round_trips() {
        
        let text = "
            # comment line
            seed = 7
            steps = 5   # trailing comment
            lr = 0.01
            model.patch_size = 2
            model.rk_mode = conventional
            model.gate = scalar
            model.upsampler = bilinear
            loss.h1 = 0
            data.generator = navier_stokes
            data.height = 32
            data.width = 32
            data.dir = /tmp/x
            eval.reduction = sum_per_frame
        ";
        let cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.model.patch_size, 2);
        assert_eq!(cfg.model.rk.mode, RkMode::Conventional);
        assert_eq!(cfg.model.upsampler, Upsampler::Bilinear);
        assert_eq!(cfg.data.generator, Generator::NavierStokes);
        assert_eq!(cfg.eval.reduction, Reduction::SumPerFrame);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        for key in KEYS {
            let mut c = cfg.clone();
            let v = cfg.value_of(key);
            c.set(key, &v).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = RunConfig::from_text("model.patch = 4\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("model.patch"), "{err}");
        assert!(RunConfig::from_text("steps = many\n").is_err());
        assert!(RunConfig::from_text("just words\n").is_err());
        assert!(RunConfig::from_text("model.upsampler = nearest\n").is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["steps=5", "steps=9", "data.generator = advection_diffusion"]).unwrap();
        assert_eq!(cfg.train.steps, 9);
        assert_eq!(cfg.data.generator, Generator::AdvectionDiffusion);
        assert!(cfg.apply_overrides(&["steps"]).is_err());
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn lr_schedule() {
        let t = TrainConfig { steps: 10, lr_decay_at: 0.8, lr_decay_factor: 0.1, ..Default::default() };
        assert_eq!(t.lr_at(7), t.adam.lr);
        assert_eq!(t.lr_at(8), t.adam.lr * 0.1);
        let never = TrainConfig { lr_decay_at: 1.0, ..t };
        assert_eq!(never.lr_at(9), never.adam.lr);
    }

    #[test]
    fn validation_catches_inconsistent_runs() {
        let mut cfg = RunConfig::default();
        cfg.set("data.height", "30").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("data.generator", "dir").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("loss.h1", "-1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
