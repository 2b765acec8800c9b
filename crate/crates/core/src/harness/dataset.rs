//! Training and evaluation data for a run.

use crate::data::{
    batch_from_source, materialize, read_split, splitmix64, write_metadata, write_split, AdvectionConfig,
    AdvectionSource, BlobConfig, BlobSource, InMemorySource, Metadata, NavierStokesConfig, NavierStokesSource,
    SequenceBatch, SequenceSource,
};
use crate::error::{Error, Result};

use super::config::{Generator, RunConfig};

const EVAL_SALT: u64 = 0x7e57_5e75_0000_0001;

/// Seed of the held-out split, derived from the run seed.
pub fn eval_seed(seed: u64) -> u64 {
    splitmix64(seed ^ EVAL_SALT)
}

pub struct Dataset {
    pub train: Box<dyn SequenceSource>,
    pub eval: SequenceBatch,
    /// `[C, H, W]`.
    pub frame: [usize; 3],
}

impl Dataset {
    pub fn train_batch(&self, indices: &[usize], t_in: usize) -> Result<SequenceBatch> {
        batch_from_source(self.train.as_ref(), indices, t_in)
    }
}

/// Generator-backed source of `n_seq` sequences. Cheap generators stay lazy;
/// Navier–Stokes sequences are simulated once up front.
pub fn generator_source(cfg: &RunConfig, n_seq: usize, seed: u64) -> Result<Box<dyn SequenceSource>> {
    let d = &cfg.data;
    let frames = d.t_in + d.t_out;
    Ok(match d.generator {
        Generator::Blobs => Box::new(BlobSource::new(
            BlobConfig {
                n_seq,
                frames,
                height: d.height,
                width: d.width,
                n_blobs: d.n_blobs,
            },
            seed,
        )?),
        Generator::AdvectionDiffusion => Box::new(AdvectionSource::new(
            AdvectionConfig {
                n_seq,
                frames,
                height: d.height,
                width: d.width,
                velocity: (d.vx, d.vy),
                nu: d.diffusivity,
                frame_dt: d.frame_dt,
                substeps: d.substeps,
                cutoff: d.cutoff,
            },
            seed,
        )?),
        Generator::NavierStokes => {
            if d.height != d.width {
                return Err(Error::Config(format!(
                    "navier_stokes needs a square grid, got {}×{}",
                    d.height, d.width
                )));
            }
            let src = NavierStokesSource::new(
                NavierStokesConfig {
                    n_seq,
                    frames,
                    n: d.height,
                    nu: d.viscosity,
                    dt: d.ns_dt,
                    frame_interval: d.frame_dt,
                    forcing: d.forcing,
                },
                seed,
            )?;
            Box::new(InMemorySource::from_batch(&materialize(&src, d.t_in)?)?)
        }
        Generator::Directory => {
            return Err(Error::Config("directory datasets are read, not generated".into()));
        }
    })
}

fn check_split(cfg: &RunConfig, split: &str, b: &SequenceBatch) -> Result<()> {
    if b.t_in() != cfg.data.t_in || b.t_out() != cfg.data.t_out {
        return Err(Error::Config(format!(
            "{split} split has {}-in/{}-out frames but the config asks for {}-in/{}-out",
            b.t_in(),
            b.t_out(),
            cfg.data.t_in,
            cfg.data.t_out
        )));
    }
    Ok(())
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.generator == Generator::Directory {
        let dir = cfg.data.dir.as_ref().ok_or_else(|| Error::Config("data.dir is not set".into()))?;
        let train = read_split(dir, "train")?;
        let eval = read_split(dir, "test")?;
        check_split(cfg, "train", &train)?;
        check_split(cfg, "test", &eval)?;
        let s = train.inputs.shape();
        let frame = [s[2], s[3], s[4]];
        if eval.inputs.shape()[2..] != frame {
            return Err(Error::Config("train and test frames differ in shape".into()));
        }
        return Ok(Dataset {
            train: Box::new(InMemorySource::from_batch(&train)?),
            eval,
            frame,
        });
    }
    let train = generator_source(cfg, cfg.data.train_sequences, cfg.seed)?;
    let eval_src = generator_source(cfg, cfg.data.eval_sequences, eval_seed(cfg.seed))?;
    let eval = materialize(eval_src.as_ref(), cfg.data.t_in)?;
    let frame = train.frame_shape();
    Ok(Dataset { train, eval, frame })
}

/// Generates the `train` and `test` splits into `dir`.
pub fn generate_to_dir(cfg: &RunConfig, dir: &std::path::Path) -> Result<Metadata> {
    let train_src = generator_source(cfg, cfg.data.train_sequences, cfg.seed)?;
    let test_src = generator_source(cfg, cfg.data.eval_sequences, eval_seed(cfg.seed))?;
    let train = materialize(train_src.as_ref(), cfg.data.t_in)?;
    let test = materialize(test_src.as_ref(), cfg.data.t_in)?;
    write_split(dir, "train", &train)?;
    write_split(dir, "test", &test)?;
    let meta = train
        .metadata
        .with("train_sequences", cfg.data.train_sequences)
        .with("test_sequences", cfg.data.eval_sequences)
        .with("test_seed", eval_seed(cfg.seed));
    write_metadata(dir, &meta)?;
    Ok(meta)
}
