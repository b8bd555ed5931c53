use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTRJ";
pub const CHECKPOINT_VERSION: u32 = 1;

const FINGERPRINT_LEN: usize = 32;

/// Little-endian layout: magic, version, entry count, entries (name, dtype,
/// rank, dims, values), then the config fingerprint.
pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for e in model.store.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {}", e.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(F::DTYPE.code());
        buf.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut buf);
        }
    }
    buf.extend_from_slice(&model.config.fingerprint());
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Batch-norm running statistics are the only untrained entries.
pub(crate) fn is_buffer(name: &str) -> bool {
    name.contains(".bn.running_")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_value<F: Scalar>(dtype: DType, b: &[u8]) -> F {
    match dtype {
        DType::F32 => F::of(f32::read_le(b) as f64),
        DType::F64 => F::of(f64::read_le(b)),
    }
}

/// Parses a checkpoint into a store plus its fingerprint, without checking
/// the fingerprint. Values stored at another precision are converted.
pub fn load_store<F: Scalar>(path: &Path) -> Result<(ParamStore<F>, [u8; 32])> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not an HTRJ checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u64("entry count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i} has a non-UTF-8 name")))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} has unknown dtype code {code}")))?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_len = numel
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} has an absurd shape {shape:?}")))?;
        let raw = r.take(bytes_len, "values")?;
        let data = raw.chunks_exact(dtype.size()).map(|b| read_value(dtype, b)).collect();
        let trainable = !is_buffer(&name);
        store.push(name, Tensor::new(shape, data)?, trainable)?;
    }
    let fp: [u8; FINGERPRINT_LEN] = r.take(FINGERPRINT_LEN, "fingerprint")?.try_into().unwrap();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the fingerprint",
            bytes.len() - r.pos
        )));
    }
    Ok((store, fp))
}

/// Loads a checkpoint written for `config`; any other config is rejected.
pub fn load<F: Scalar>(path: &Path, config: &ModelConfig) -> Result<Model<F>> {
    let (store, fp) = load_store(path)?;
    if fp != config.fingerprint() {
        return Err(Error::Fingerprint);
    }
    Model::from_store(config.clone(), store)
}
