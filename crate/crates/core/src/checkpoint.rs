//! Binary tensor container used for checkpoints and exported features.
//!
//! Layout (little-endian): magic `CMD1`, `u32` version, `u64` step,
//! `u64` total steps, `u32` tensor count, then per tensor a `u16` name
//! length, the name bytes, a `u8` rank, `u64` dims and the `f32` payload in
//! row-major order.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::ByteReader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMD1";
pub const VERSION: u32 = 1;

/// Named tensors plus the two step counters of the header.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorFile {
    pub step: u64,
    pub total_steps: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::StateCorruption(format!("tensor {name} missing from file")))
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    /// Fails if any value changes when stored as `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.total_steps.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::usage(format!("tensor {name} cannot be stored")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                let f = v as f32;
                if f as f64 != v && !(v.is_nan() && f.is_nan()) {
                    return Err(Error::usage(format!(
                        "tensor {name} holds {v}, not representable as f32"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes, "checkpoint");
        if rd.take(4)? != MAGIC {
            return Err(rd.error(0, "bad magic, not a checkpoint"));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let step = rd.u64()?;
        let total_steps = rd.u64()?;
        let count = rd.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let len = rd.u16()? as usize;
            let at = rd.offset();
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| rd.error(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = rd.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = rd.offset();
                let d = usize::try_from(rd.u64()?).map_err(|_| rd.error(at, "dimension overflow"))?;
                shape.push(d);
            }
            let at = rd.offset();
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| rd.error(at, "element count overflow"))?;
            let data = rd.f32s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| rd.error(at, &format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if rd.offset() != bytes.len() {
            return Err(rd.error(rd.offset(), "trailing bytes after last tensor"));
        }
        Ok(TensorFile {
            step,
            total_steps,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// A `u64` as four 16-bit chunks, each exact in `f32`.
pub fn u64_to_tensor(v: u64) -> Tensor {
    Tensor::vector(&[0, 1, 2, 3].map(|i| ((v >> (16 * i)) & 0xffff) as f64))
}

pub fn tensor_to_u64(t: &Tensor) -> Result<u64> {
    let ok = t.shape() == [4]
        && t.data()
            .iter()
            .all(|&c| c.fract() == 0.0 && (0.0..65536.0).contains(&c));
    if !ok {
        return Err(Error::StateCorruption(format!("not a packed u64: {t:?}")));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i))))
}
