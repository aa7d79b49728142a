//! Binary checkpoints: a named tensor table.
//!
//! ```text
//! "EAGL"  u32 version (=1)  u32 tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32, 1 = f64), u8 rank, rank × u32 dims
//!   little-endian scalars
//! ```
//!
//! Optimizer state uses names under `opt.` and sampler/rng state names
//! under `rng.`; everything else is a model parameter. Tensors are written
//! in name order, always as f64.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EAGL";
pub const VERSION: u32 = 1;

pub const OPT_PREFIX: &str = "opt.";
pub const RNG_PREFIX: &str = "rng.";

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(1);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank of `{name}` too large")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension of `{name}` too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset,
            msg: msg.into(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic, not a checkpoint");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(4, format!("unsupported version {version} (expected {VERSION})"));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: at + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            0 => r
                .take(n * 4, "f32 data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            1 => r
                .take(n * 8, "f64 data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return r.fail(dtype_at, format!("unknown dtype {other} for `{name}`")),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
            offset: dtype_at,
            msg: format!("`{name}`: {e}"),
        })?;
        if out.insert(name.clone(), t).is_some() {
            return r.fail(at, format!("duplicate tensor `{name}`"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, "trailing bytes after the last tensor");
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// A `u64` as two exactly representable halves `[hi, lo]`.
pub fn u64_tensor(v: u64) -> Tensor {
    Tensor::from_parts(vec![2], vec![(v >> 32) as f64, (v & 0xFFFF_FFFF) as f64])
}

pub fn tensor_u64(t: &Tensor) -> Result<u64> {
    match t.data() {
        [hi, lo] if *hi >= 0.0 && *lo >= 0.0 && *hi < 4294967296.0 && *lo < 4294967296.0 => {
            Ok(((*hi as u64) << 32) | *lo as u64)
        }
        _ => Err(Error::InvalidArgument(format!("not an encoded u64: {:?}", t.data()))),
    }
}

/// Splits a table into model parameters, `opt.` and `rng.` entries.
pub fn partition(
    tensors: BTreeMap<String, Tensor>,
) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut model = BTreeMap::new();
    let mut opt = BTreeMap::new();
    let mut rng = BTreeMap::new();
    for (k, v) in tensors {
        if k.starts_with(OPT_PREFIX) {
            opt.insert(k, v);
        } else if k.starts_with(RNG_PREFIX) {
            rng.insert(k, v);
        } else {
            model.insert(k, v);
        }
    }
    (model, opt, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a.weight".into(), Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-300, f64::MAX, 0.0]).unwrap());
        m.insert("opt.step".into(), Tensor::scalar(7.0));
        m.insert("rng.seed".into(), u64_tensor(u64::MAX - 5));
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&table()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, table());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_an_offset() {
        let bytes = encode(&table()).unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn magic_and_version_are_checked() {
        let mut bytes = encode(&table()).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&table()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint { offset: 4, .. })));
    }

    #[test]
    fn reads_f32_tensors() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&[0, 1]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        assert_eq!(decode(&bytes).unwrap()["x"].data(), &[1.5, -0.25]);
    }

    #[test]
    fn u64_halves() {
        for v in [0, 1, 4096, u64::MAX, 1 << 53] {
            assert_eq!(tensor_u64(&u64_tensor(v)).unwrap(), v);
        }
    }
}
