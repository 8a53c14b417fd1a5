//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMRF" | u32 version | u64 len | config JSON | u64 record count
//! per record: u32 len | name | u8 dtype | u32 rank | u64 dims[rank]
//!             | u64 payload bytes | payload
//! u64 CRC-64/ECMA-182 of everything above
//! ```

use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMRF";
pub const VERSION: u32 = 1;
const FORMAT: &str = "checkpoint";
const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub fn encode_checkpoint<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&((t.numel() * T::DTYPE.size_of()) as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let sum = CRC.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&end| end <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                format: FORMAT,
                offset: self.pos,
                reason: format!("unexpected end of data reading {what}"),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format {
            format: FORMAT,
            offset: at,
            reason: format!("{what} does not fit in memory"),
        })
    }
}

/// Decodes a checkpoint, converting stored values to `T` when the stored
/// element type differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, ParamSet<T>)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Format {
            format: FORMAT,
            offset: 0,
            reason: "bad magic (expected EMRF)".into(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Format {
            format: FORMAT,
            offset: bytes.len(),
            reason: "missing checksum".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = CRC.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let json_len = r.len("config length")?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(json_len, "config")?)?;
    let count = r.len("record count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                format: FORMAT,
                offset: name_at,
                reason: "record name is not UTF-8".into(),
            })?
            .to_string();
        let tag_at = r.pos;
        let dtype = DType::from_tag(r.u8("dtype")?).ok_or_else(|| Error::Format {
            format: FORMAT,
            offset: tag_at,
            reason: "unknown dtype tag".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.len("dimension")?);
        }
        let payload_len = r.len("payload length")?;
        let expected = dims
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .filter(|_| dims.iter().all(|&d| d > 0));
        if expected != Some(payload_len) {
            return Err(Error::TruncatedRecord {
                name,
                reason: format!("dims {dims:?} need {expected:?} bytes, payload declares {payload_len}"),
            });
        }
        let payload = r.take(payload_len, "payload").map_err(|_| Error::TruncatedRecord {
            name: name.clone(),
            reason: "payload runs past the end of the file".into(),
        })?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => payload.chunks_exact(d.size_of()).map(T::read_le).collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        params.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            format: FORMAT,
            offset: r.pos,
            reason: "trailing bytes after the last record".into(),
        });
    }
    Ok((cfg, params))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, cfg: &ModelConfig, params: &ParamSet<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ParamSet<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
