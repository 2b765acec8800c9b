//! Binary tensor files.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "STPT"
//! 4       4         version (u32 LE) = 1
//! 8       4         rank r (u32 LE)
//! 12      8·r       dims (u64 LE each)
//! 12+8r   8·Πdims   payload, row-major f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"STPT";
pub const VERSION: u32 = 1;

/// Sanity bound on the rank field, to reject garbage before allocating.
const MAX_RANK: u32 = 16;

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

/// Header length for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    12 + 8 * rank
}

pub fn encode_tensor(t: &Tensor, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_to_vec(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(header_len(t.rank()) + 8 * t.len());
    encode_tensor(t, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Reads one tensor record; `base` is the stream offset of the record, used
/// only for error positions.
pub fn decode_tensor(input: &mut impl Read, base: u64) -> Result<Tensor> {
    let mut pos = base;
    let mut read = |buf: &mut [u8], what: &str, pos: &mut u64| -> Result<()> {
        input.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => format_err(*pos, format!("truncated {what}")),
            _ => Error::Io(e),
        })?;
        *pos += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    read(&mut magic, "magic", &mut pos)?;
    if &magic != MAGIC {
        return Err(format_err(base, format!("bad magic {magic:?}, expected \"STPT\"")));
    }
    let mut word = [0u8; 4];
    read(&mut word, "version", &mut pos)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(format_err(base + 4, format!("unsupported version {version}")));
    }
    read(&mut word, "rank", &mut pos)?;
    let rank = u32::from_le_bytes(word);
    if rank > MAX_RANK {
        return Err(format_err(base + 8, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut long = [0u8; 8];
    for _ in 0..rank {
        let at = pos;
        read(&mut long, "dims", &mut pos)?;
        let d = u64::from_le_bytes(long);
        if d == 0 || d > u32::MAX as u64 {
            return Err(format_err(at, format!("invalid extent {d}")));
        }
        dims.push(d as usize);
    }
    let n = numel(&dims);
    let mut payload = vec![0u8; 8 * n];
    read(&mut payload, "payload", &mut pos)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&dims, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a file holding exactly one tensor.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = decode_tensor(&mut r, 0)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        let at = (header_len(t.rank()) + 8 * t.len()) as u64;
        return Err(format_err(at, "trailing bytes after payload"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::randn(&[3, 4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.stpt");
        write_tensor_file(&p, &t).unwrap();
        let back = read_tensor_file(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scalar_layout() {
        let bytes = encode_to_vec(&Tensor::scalar(2.5));
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"STPT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(&bytes[12..], &2.5f64.to_le_bytes());
        assert_eq!(decode_tensor(&mut &bytes[..], 0).unwrap().item(), 2.5);
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let good = encode_to_vec(&Tensor::ones(&[2, 3]));
        let mut bad = good.clone();
        bad[0] = b'X';
        match decode_tensor(&mut &bad[..], 0) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bad = good.clone();
        bad[4] = 9;
        match decode_tensor(&mut &bad[..], 0) {
            Err(Error::Format { offset: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        let truncated = &good[..good.len() - 3];
        match decode_tensor(&mut &truncated[..], 0) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, header_len(2) as u64);
                assert!(reason.contains("payload"));
            }
            other => panic!("{other:?}"),
        }
        let mut bad = good;
        bad[12..20].copy_from_slice(&0u64.to_le_bytes());
        match decode_tensor(&mut &bad[..], 0) {
            Err(Error::Format { offset: 12, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.stpt");
        let mut bytes = encode_to_vec(&Tensor::ones(&[2]));
        bytes.push(0);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tensor_file(&p), Err(Error::Format { offset: 36, .. })));
    }
}
