//! Synthetic sequence generators, the persistence baseline and dataset files.
//!
//! Every generator is a [`SequenceSource`]: a pure function from a sequence
//! index to a `[T, C, H, W]` tensor, seeded per index so sequences can be
//! produced lazily, in any order, and independently of each other.

mod advection;
mod blobs;
pub mod io;
mod navier_stokes;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub use advection::{gen_advection_diffusion, low_pass_noise, AdvectionConfig, AdvectionSource};
pub use blobs::{gen_bouncing_blobs, render_blobs, Blob, BlobConfig, BlobSource};
pub use io::{read_tensor_file, write_tensor_file};
pub use navier_stokes::{
    gaussian_random_field, gen_navier_stokes, NavierStokesConfig, NavierStokesSource, VorticitySolver,
    BLOW_UP_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sequence `index` of a dataset seeded with `seed`.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

/// Generator name, seed and physical parameters of a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metadata {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(generator: &str, seed: u64) -> Self {
        Metadata {
            generator: generator.to_string(),
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("generator = {}\nseed = {}\n", self.generator, self.seed);
        for (k, v) in &self.params {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = Metadata::default();
        let mut seen_generator = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("metadata line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "generator" => {
                    meta.generator = v.to_string();
                    seen_generator = true;
                }
                "seed" => {
                    meta.seed = v
                        .parse()
                        .map_err(|_| Error::Config(format!("metadata line {}: bad seed {v:?}", n + 1)))?;
                }
                _ => {
                    meta.params.insert(k.to_string(), v.to_string());
                }
            }
        }
        if !seen_generator {
            return Err(Error::Config("metadata has no generator".into()));
        }
        Ok(meta)
    }
}

/// Inputs `[b, T_in, C, H, W]` and targets `[b, T_out, C, H, W]`.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub metadata: Metadata,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_in(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn t_out(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Sub-batch of the given sequence indices.
    pub fn select(&self, indices: &[usize]) -> Result<SequenceBatch> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("sequence index {bad} out of range for {n}")));
        }
        let pick = |t: &Tensor| Tensor::stack(&indices.iter().map(|&i| t.index_axis0(i)).collect::<Vec<_>>());
        Ok(SequenceBatch {
            inputs: pick(&self.inputs)?,
            targets: pick(&self.targets)?,
            metadata: self.metadata.clone(),
        })
    }
}

/// A dataset whose sequences are produced on demand.
pub trait SequenceSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames per sequence.
    fn frames(&self) -> usize;

    /// `[C, H, W]` of one frame.
    fn frame_shape(&self) -> [usize; 3];

    fn metadata(&self) -> Metadata;

    /// Sequence `index` as `[T, C, H, W]`.
    fn sequence(&self, index: usize) -> Result<Tensor>;
}

/// Splits the chosen sequences into the first `t_in` frames and the rest.
pub fn batch_from_source(source: &dyn SequenceSource, indices: &[usize], t_in: usize) -> Result<SequenceBatch> {
    let t = source.frames();
    if t_in == 0 || t_in >= t {
        return Err(Error::InvalidArgument(format!("t_in = {t_in} must be in 1..{t}")));
    }
    let [c, h, w] = source.frame_shape();
    let frame = c * h * w;
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for &i in indices {
        if i >= source.len() {
            return Err(Error::InvalidArgument(format!("sequence index {i} out of range for {}", source.len())));
        }
        let seq = source.sequence(i)?;
        let (a, b) = seq.data().split_at(t_in * frame);
        inputs.extend_from_slice(a);
        targets.extend_from_slice(b);
    }
    let b = indices.len();
    Ok(SequenceBatch {
        inputs: Tensor::new(&[b, t_in, c, h, w], inputs)?,
        targets: Tensor::new(&[b, t - t_in, c, h, w], targets)?,
        metadata: source.metadata().with("t_in", t_in).with("t_out", t - t_in),
    })
}

/// Every sequence of `source`.
pub fn materialize(source: &dyn SequenceSource, t_in: usize) -> Result<SequenceBatch> {
    let all: Vec<usize> = (0..source.len()).collect();
    batch_from_source(source, &all, t_in)
}

/// Repeats the last input frame `t_out` times: `[b, T_in, ...]` to
/// `[b, t_out, ...]`.
pub fn persistence_baseline(inputs: &Tensor, t_out: usize) -> Result<Tensor> {
    let s = inputs.shape();
    if s.len() < 2 || s[1] == 0 {
        return Err(Error::InvalidShape {
            op: "persistence_baseline",
            shape: s.to_vec(),
            reason: "expected [b, T_in ≥ 1, ...]".into(),
        });
    }
    let (b, t_in) = (s[0], s[1]);
    let frame: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * t_out * frame);
    for bi in 0..b {
        let last = &inputs.data()[(bi * t_in + t_in - 1) * frame..][..frame];
        for _ in 0..t_out {
            out.extend_from_slice(last);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = t_out;
    Tensor::new(&shape, out)
}

pub const METADATA_FILE: &str = "metadata.txt";

pub fn split_paths(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("{split}_inputs.stpt")), dir.join(format!("{split}_targets.stpt")))
}

/// Writes the inputs and targets of one split.
pub fn write_split(dir: &Path, split: &str, batch: &SequenceBatch) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (ip, tp) = split_paths(dir, split);
    write_tensor_file(ip, &batch.inputs)?;
    write_tensor_file(tp, &batch.targets)?;
    Ok(())
}

/// Writes the metadata file shared by every split of a directory.
pub fn write_metadata(dir: &Path, metadata: &Metadata) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(METADATA_FILE), metadata.to_text())?;
    Ok(())
}

pub fn read_split(dir: &Path, split: &str) -> Result<SequenceBatch> {
    let (ip, tp) = split_paths(dir, split);
    let inputs = read_tensor_file(ip)?;
    let targets = read_tensor_file(tp)?;
    if inputs.rank() != 5 || targets.rank() != 5 || inputs.shape()[0] != targets.shape()[0] || inputs.shape()[2..] != targets.shape()[2..] {
        return Err(Error::InvalidShape {
            op: "read_split",
            shape: inputs.shape().to_vec(),
            reason: format!("inputs and targets {:?} do not form a [b, T, C, H, W] pair", targets.shape()),
        });
    }
    let metadata = Metadata::parse(&std::fs::read_to_string(dir.join(METADATA_FILE))?)?;
    Ok(SequenceBatch { inputs, targets, metadata })
}

/// An already materialized set of sequences.
pub struct InMemorySource {
    sequences: Tensor,
    metadata: Metadata,
}

impl InMemorySource {
    /// Joins inputs and targets back into full sequences.
    pub fn from_batch(batch: &SequenceBatch) -> Result<Self> {
        let (b, ti, to) = (batch.len(), batch.t_in(), batch.t_out());
        let frame: usize = batch.inputs.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(b * (ti + to) * frame);
        for i in 0..b {
            data.extend_from_slice(&batch.inputs.data()[i * ti * frame..][..ti * frame]);
            data.extend_from_slice(&batch.targets.data()[i * to * frame..][..to * frame]);
        }
        let mut shape = batch.inputs.shape().to_vec();
        shape[1] = ti + to;
        Ok(InMemorySource {
            sequences: Tensor::new(&shape, data)?,
            metadata: batch.metadata.clone(),
        })
    }
}

impl SequenceSource for InMemorySource {
    fn len(&self) -> usize {
        self.sequences.shape()[0]
    }

    fn frames(&self) -> usize {
        self.sequences.shape()[1]
    }

    fn frame_shape(&self) -> [usize; 3] {
        let s = self.sequences.shape();
        [s[2], s[3], s[4]]
    }

    fn metadata(&self) -> Metadata {
        self.metadata.clone()
    }

    fn sequence(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("sequence index {index} out of range for {}", self.len())));
        }
        Ok(self.sequences.index_axis0(index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference splitmix64 generator seeded with 0.
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
        assert_ne!(sequence_seed(1, 0), sequence_seed(1, 1));
        assert_ne!(sequence_seed(1, 0), sequence_seed(2, 0));
    }

    #[test]
    fn metadata_round_trip() {
        let m = Metadata::new("blobs", 42).with("height", 64).with("nu", 0.001);
        let back = Metadata::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(Metadata::parse("seed = 1\n").is_err());
        assert!(Metadata::parse("generator = x\nseed = nope\n").is_err());
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let inputs = Tensor::from_fn(&[2, 3, 1, 2, 2], |i| (i[0] * 100 + i[1] * 10 + i[3] * 2 + i[4]) as f64);
        let p = persistence_baseline(&inputs, 4).unwrap();
        assert_eq!(p.shape(), &[2, 4, 1, 2, 2]);
        for b in 0..2 {
            for t in 0..4 {
                for y in 0..2 {
                    for x in 0..2 {
                        assert_eq!(p.at(&[b, t, 0, y, x]), inputs.at(&[b, 2, 0, y, x]));
                    }
                }
            }
        }
        assert!(persistence_baseline(&Tensor::zeros(&[4]), 3).is_err());
    }

    #[test]
    fn split_files_round_trip() {
        let batch = gen_bouncing_blobs(3, 4, 2, 16, 16, 1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), "train", &batch).unwrap();
        write_metadata(dir.path(), &batch.metadata).unwrap();
        assert!(dir.path().join("train_inputs.stpt").exists());
        let back = read_split(dir.path(), "train").unwrap();
        assert_eq!(back.inputs.data(), batch.inputs.data());
        assert_eq!(back.targets.data(), batch.targets.data());
        assert_eq!(back.metadata, batch.metadata);
        let sub = back.select(&[2, 0]).unwrap();
        assert_eq!(sub.inputs.index_axis0(0).data(), batch.inputs.index_axis0(2).data());
        assert!(back.select(&[3]).is_err());
    }

    #[test]
    fn in_memory_source_reassembles_sequences() {
        let src = BlobSource::new(BlobConfig { n_seq: 2, frames: 6, height: 16, width: 16, n_blobs: 2 }, 4).unwrap();
        let batch = materialize(&src, 2).unwrap();
        let mem = InMemorySource::from_batch(&batch).unwrap();
        assert_eq!(mem.frames(), 6);
        for i in 0..2 {
            assert_eq!(mem.sequence(i).unwrap().data(), src.sequence(i).unwrap().data());
        }
        assert!(batch_from_source(&src, &[0], 6).is_err());
        assert!(batch_from_source(&src, &[0], 0).is_err());
    }
}
