//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SCOUTCKPT" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf8 | ndim: u32 | dims: u64 x ndim | f64 x prod(dims) )
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"SCOUTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_records<W: Write>(
    mut w: W,
    records: &BTreeMap<String, Tensor>,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(records: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Corrupt("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Corrupt("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_records<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Corrupt("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("identifier is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("record `{name}`: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate record `{name}`")));
        }
    }
    Ok(out)
}
