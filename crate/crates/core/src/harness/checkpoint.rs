//! Parameter checkpoints.
//!
//! ```text
//! "STCK" | version u32 LE | manifest length u64 LE | manifest | records
//! ```
//!
//! The manifest is UTF-8 text with one line per tensor,
//! `name offset d0xd1x…` (`-` for rank 0), where `offset` is relative to the
//! first record. Each record is a complete tensor file.

use std::path::Path;

use crate::data::io::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STCK";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    let mut manifest = String::new();
    for (_, p) in store.iter() {
        if p.name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("parameter name {:?} contains whitespace", p.name)));
        }
        let dims = if p.value.rank() == 0 {
            "-".to_string()
        } else {
            p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        };
        manifest.push_str(&format!("{} {} {}\n", p.name, records.len(), dims));
        encode_tensor(&p.value, &mut records)?;
    }
    let mut out = Vec::with_capacity(HEADER + manifest.len() + records.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&records);
    Ok(out)
}

/// Named tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < HEADER {
        return Err(format_err(bytes.len() as u64, "truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"STCK\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = HEADER
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(8, "manifest runs past end of file"))?;
    let manifest =
        std::str::from_utf8(&bytes[HEADER..body]).map_err(|_| format_err(HEADER as u64, "manifest is not UTF-8"))?;
    let records = &bytes[body..];
    let mut out = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || format_err(HEADER as u64, format!("manifest line {}: {line:?}", n + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let offset: usize = parts[1].parse().map_err(|_| bad())?;
        let dims: Vec<usize> = if parts[2] == "-" {
            Vec::new()
        } else {
            parts[2].split('x').map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?
        };
        if offset > records.len() {
            return Err(format_err((body + offset) as u64, format!("record for {} past end of file", parts[0])));
        }
        let t = decode_tensor(&mut &records[offset..], (body + offset) as u64)?;
        if t.shape() != dims.as_slice() {
            return Err(format_err(
                (body + offset) as u64,
                format!("record for {} has shape {:?}, manifest says {dims:?}", parts[0], t.shape()),
            ));
        }
        out.push((parts[0].to_string(), t));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

/// Loads every tensor of the checkpoint into `store`. The checkpoint must
/// hold exactly the store's parameters with matching shapes; errors name the
/// offending tensor.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = decode(&std::fs::read(path)?)?;
    restore(store, tensors)
}

pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor {name} does not exist in the model")))?;
        let expect = store.value(id).shape().to_vec();
        if t.shape() != expect.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name} has shape {:?} but the model expects {expect:?}",
                t.shape()
            )));
        }
        store.set(id, t)?;
        seen.insert(name);
    }
    if let Some((_, missing)) = store.iter().find(|(_, p)| !seen.contains(&p.name)) {
        return Err(Error::Config(format!("checkpoint has no tensor {}", missing.name)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::randn(&[3, 2], 1.0, &mut rng));
        s.add("a.bias", Tensor::randn(&[3], 1.0, &mut rng));
        s.add("gain", Tensor::scalar(0.25));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s).unwrap();
        let mut other = store();
        for id in other.ids().collect::<Vec<_>>() {
            let shape = other.value(id).shape().to_vec();
            other.set(id, Tensor::zeros(&shape)).unwrap();
        }
        restore(&mut other, decode(&bytes).unwrap()).unwrap();
        for ((_, p), (_, q)) in s.iter().zip(other.iter()) {
            assert_eq!(p.name, q.name);
            assert!(p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(encode(&other).unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let bytes = encode(&store()).unwrap();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[2, 3]));
        other.add("a.bias", Tensor::zeros(&[3]));
        other.add("gain", Tensor::scalar(0.0));
        let err = restore(&mut other, decode(&bytes).unwrap()).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");

        let mut extra = store();
        extra.add("b.weight", Tensor::zeros(&[1]));
        let err = restore(&mut extra, decode(&bytes).unwrap()).unwrap_err().to_string();
        assert!(err.contains("b.weight"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&store()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..10]).is_err());
    }
}
