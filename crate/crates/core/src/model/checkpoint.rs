//! Named-tensor archives: magic, JSON header, then `(name, dtype, trainable, shape, data)` records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulators::ModulationPool;
use crate::numerics::{DType, ParameterStore, Real, Tensor};

use super::{Mddt, MddtConfig};

pub const MAGIC: &[u8; 5] = b"MDDT1";

/// Header + tensors exactly as stored on disk.
#[derive(Debug, Clone)]
pub struct Archive<T> {
    pub header: serde_json::Value,
    pub params: ParameterStore<T>,
    pub dtype: DType,
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::invalid("archive field exceeds u32"))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

pub fn encode_archive<T: Real>(header: &serde_json::Value, params: &ParameterStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let h = serde_json::to_vec(header)?;
    put_len(&mut out, h.len())?;
    out.extend_from_slice(&h);
    put_len(&mut out, params.len())?;
    for (name, p) in params.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(p.trainable as u8);
        put_len(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len().saturating_sub(self.at) < n {
            return Err(Error::Truncated {
                expected: (self.at + n) as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Decodes an archive, converting stored values to `T` when the dtypes differ.
pub fn decode_archive<T: Real>(buf: &[u8]) -> Result<Archive<T>> {
    let magic = &buf[..buf.len().min(MAGIC.len())];
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "MDDT1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut r = Reader { buf, at: MAGIC.len() };
    let hlen = r.u32()?;
    let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()?;
    let mut params = ParameterStore::new();
    let mut dtype = T::DTYPE;
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let tag = r.u8()?;
        dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown dtype tag {tag} for `{name}`")))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        params.insert(name, Tensor::new(shape, data)?, trainable)?;
    }
    if r.at != buf.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", buf.len() - r.at)));
    }
    Ok(Archive { header, params, dtype })
}

pub fn write_archive<T: Real>(path: &Path, header: &serde_json::Value, params: &ParameterStore<T>) -> Result<()> {
    fs::write(path, encode_archive(header, params)?)?;
    Ok(())
}

pub fn read_archive<T: Real>(path: &Path) -> Result<Archive<T>> {
    decode_archive(&fs::read(path)?)
}

/// A model plus whatever modulator state was trained with it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Mddt<T>,
    /// `base` for a bare model, otherwise the modulator kind tag.
    pub kind: String,
    pub pool: Option<ModulationPool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MddtConfig,
    kind: String,
    pool: Option<ModulationPool>,
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let header = serde_json::to_value(Header {
        config: ckpt.model.config.clone(),
        kind: ckpt.kind.clone(),
        pool: ckpt.pool.clone(),
    })?;
    write_archive(path, &header, &ckpt.model.params)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let archive = read_archive::<T>(path)?;
    let header: Header = serde_json::from_value(archive.header)?;
    header.config.validate()?;
    let model = Mddt {
        config: header.config,
        params: archive.params,
    };
    for name in ["embed.state.w", "head.w"] {
        if !model.params.contains(name) {
            return Err(Error::Malformed(format!("checkpoint lacks `{name}`")));
        }
    }
    Ok(Checkpoint {
        model,
        kind: header.kind,
        pool: header.pool,
    })
}
