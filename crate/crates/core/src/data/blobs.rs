//! Gaussian blobs moving at constant velocity and bouncing off the walls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sequence_seed, Metadata, SequenceBatch, SequenceSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIGMA_RANGE: (f64, f64) = (1.5, 3.0);
/// Speed in pixels per frame.
pub const SPEED_RANGE: (f64, f64) = (1.0, 3.0);

/// Position and velocity in pixels (`y` is the row, `x` the column).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub y: f64,
    pub x: f64,
    pub vy: f64,
    pub vx: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Specular reflection of `p` into `[0, hi]`.
fn reflect(mut p: f64, mut v: f64, hi: f64) -> (f64, f64) {
    if hi <= 0.0 {
        return (0.0, v);
    }
    while p < 0.0 || p > hi {
        if p < 0.0 {
            p = -p;
        } else {
            p = 2.0 * hi - p;
        }
        v = -v;
    }
    (p, v)
}

impl Blob {
    fn advance(&mut self, h: usize, w: usize) {
        (self.y, self.vy) = reflect(self.y + self.vy, self.vy, (h - 1) as f64);
        (self.x, self.vx) = reflect(self.x + self.vx, self.vx, (w - 1) as f64);
    }

    fn sample(rng: &mut impl Rng, h: usize, w: usize) -> Blob {
        let sigma = rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
        let speed = rng.random_range(SPEED_RANGE.0..=SPEED_RANGE.1);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Blob {
            y: rng.random_range(0.0..=(h - 1) as f64),
            x: rng.random_range(0.0..=(w - 1) as f64),
            vy: speed * angle.sin(),
            vx: speed * angle.cos(),
            sigma,
            amplitude: 1.0,
        }
    }
}

/// `[frames, 1, h, w]`: frame `t` shows every blob after `t` moves, summed
/// and clamped to `[0, 1]`.
pub fn render_blobs(blobs: &[Blob], frames: usize, h: usize, w: usize) -> Tensor {
    let mut blobs = blobs.to_vec();
    let mut data = vec![0.0; frames * h * w];
    for frame in data.chunks_exact_mut(h * w) {
        for b in &blobs {
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for (i, row) in frame.chunks_exact_mut(w).enumerate() {
                let dy2 = (i as f64 - b.y).powi(2);
                for (j, px) in row.iter_mut().enumerate() {
                    *px += b.amplitude * (-(dy2 + (j as f64 - b.x).powi(2)) * inv).exp();
                }
            }
        }
        for px in frame.iter_mut() {
            *px = px.clamp(0.0, 1.0);
        }
        for b in &mut blobs {
            b.advance(h, w);
        }
    }
    Tensor::new(&[frames, 1, h, w], data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobConfig {
    pub n_seq: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_blobs: usize,
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "blob frames must be at least 16×16, got {}×{}",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("blob sequences need at least one frame".into()));
        }
        Ok(())
    }
}

pub struct BlobSource {
    pub config: BlobConfig,
    pub seed: u64,
}

impl BlobSource {
    pub fn new(config: BlobConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(BlobSource { config, seed })
    }

    pub fn blobs(&self, index: usize) -> Vec<Blob> {
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(self.seed, index as u64));
        let c = &self.config;
        (0..c.n_blobs).map(|_| Blob::sample(&mut rng, c.height, c.width)).collect()
    }
}

impl SequenceSource for BlobSource {
    fn len(&self) -> usize {
        self.config.n_seq
    }

    fn frames(&self) -> usize {
        self.config.frames
    }

    fn frame_shape(&self) -> [usize; 3] {
        [1, self.config.height, self.config.width]
    }

    fn metadata(&self) -> Metadata {
        let c = &self.config;
        Metadata::new("blobs", self.seed)
            .with("n_seq", c.n_seq)
            .with("frames", c.frames)
            .with("height", c.height)
            .with("width", c.width)
            .with("n_blobs", c.n_blobs)
    }

    fn sequence(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("sequence index {index} out of range for {}", self.len())));
        }
        let c = &self.config;
        Ok(render_blobs(&self.blobs(index), c.frames, c.height, c.width))
    }
}

/// `n_seq` sequences of `t_in + t_out` frames, split into inputs and targets.
pub fn gen_bouncing_blobs(
    n_seq: usize,
    t_in: usize,
    t_out: usize,
    height: usize,
    width: usize,
    n_blobs: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    let src = BlobSource::new(
        BlobConfig {
            n_seq,
            frames: t_in + t_out,
            height,
            width,
            n_blobs,
        },
        seed,
    )?;
    super::materialize(&src, t_in)
}
