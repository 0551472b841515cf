//! Binary tensor container and UTF-8 key=value metadata sidecar.
//!
//! Layout: magic bytes `MLMA`, u32 version (=1), u32 tensor count; then per
//! tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//! u8 rank, rank x u64 extents, raw little-endian values. All integers are
//! little-endian. Round-trips are byte-exact.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Dtype, Scalar, Tensor};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MLMA";
const VERSION: u32 = 1;

pub fn encode<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(T::DTYPE as u8);
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated container: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = Dtype::from_u8(cur.u8()?)?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * T::BYTES)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn write_params<T: Scalar>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    let tensors: Vec<(String, &Tensor<T>)> =
        params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    std::fs::write(path, encode(&tensors))?;
    Ok(())
}

/// Load a container into an already-constructed parameter set. Every
/// checkpoint tensor must match an existing parameter by name and shape,
/// and every parameter must be covered.
pub fn read_params<T: Scalar>(path: &Path, params: &mut ParamSet<T>) -> Result<()> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let tensors = decode::<T>(&bytes)?;
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {} parameters",
            tensors.len(),
            params.len()
        )));
    }
    for (name, t) in tensors {
        params.load_value(&name, t)?;
    }
    Ok(())
}

/// Peek at the dtype of the first tensor without decoding values, so the
/// CLI can dispatch on precision.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let _version = cur.u32()?;
    let count = cur.u32()?;
    if count == 0 {
        return Err(Error::Checkpoint("empty container".into()));
    }
    let name_len = cur.u16()? as usize;
    cur.take(name_len)?;
    Dtype::from_u8(cur.u8()?)
}

// -- metadata sidecar -------------------------------------------------------

/// Write a `key=value` sidecar next to a checkpoint. Keys are emitted in
/// sorted order so the file is deterministic.
pub fn write_sidecar(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        assert!(!k.contains('=') && !v.contains('\n'), "sidecar entry unencodable");
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("sidecar line has no '=': {line:?}"),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Sidecar path convention: `<checkpoint>.meta`.
pub fn sidecar_path(ckpt: &Path) -> std::path::PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".meta");
    std::path::PathBuf::from(os)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let a = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-30, 7.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[4], vec![9.0, 8.0, 7.0, 6.5]).unwrap();
        let bytes = encode(&[("alpha".to_string(), &a), ("beta".to_string(), &b)]);
        let decoded = decode::<f32>(&bytes).unwrap();
        let rebytes = encode(
            &decoded.iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>(),
        );
        assert_eq!(bytes, rebytes);
        assert_eq!(decoded[0].0, "alpha");
        assert_eq!(decoded[0].1, a);
        assert_eq!(decoded[1].1, b);
    }

    #[test]
    fn header_fields_are_exact() {
        let t = Tensor::<f64>::scalar(1.0);
        let bytes = encode(&[("x".to_string(), &t)]);
        assert_eq!(&bytes[0..4], b"MLMA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // name length 1, name "x", dtype 1 (f64), rank 1, extent 1
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes[15], 1);
        assert_eq!(bytes[16], 1);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 1);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = Tensor::<f32>::scalar(1.0);
        let bytes = encode(&[("x".to_string(), &t)]);
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&[("x".to_string(), &t)]);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.meta");
        let mut entries = BTreeMap::new();
        entries.insert("languages".to_string(), "en,es".to_string());
        entries.insert("precision".to_string(), "f32".to_string());
        write_sidecar(&p, &entries).unwrap();
        let back = read_sidecar(&p).unwrap();
        assert_eq!(back, entries);
    }
}
