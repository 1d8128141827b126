//! Flat binary container: `NFIV1`, a precision flag byte, then one record per
//! tensor: name length (u32), UTF-8 name, rank (u32), extents (u64 each) and
//! little-endian values. Records run to end of file.

use super::{ParamSet, Precision, Real};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

const MAGIC: &[u8; 5] = b"NFIV1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint precision {found:?} does not match requested {expected:?}")]
    Precision { found: Option<Precision>, expected: Precision },
    #[error("truncated checkpoint record")]
    Truncated,
    #[error("invalid tensor name: {0}")]
    Name(#[from] std::string::FromUtf8Error),
}

pub(crate) fn encode<R: Real>(params: &ParamSet<R>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + params.num_scalars() * std::mem::size_of::<R>());
    out.extend_from_slice(MAGIC);
    out.push(R::PRECISION.flag());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode<R: Real>(bytes: &[u8]) -> Result<ParamSet<R>, CheckpointError> {
    if bytes.len() < 6 || &bytes[..5] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let found = Precision::from_flag(bytes[5]);
    if found != Some(R::PRECISION) {
        return Err(CheckpointError::Precision {
            found,
            expected: R::PRECISION,
        });
    }
    let width = std::mem::size_of::<R>();
    let mut rd = Reader { bytes, pos: 6 };
    let mut params = ParamSet::new();
    while rd.pos < bytes.len() {
        let name_len = rd.u32()? as usize;
        let name = String::from_utf8(rd.take(name_len)?.to_vec())?;
        let rank = rd.u32()? as usize;
        let shape = (0..rank).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = rd.take(count.checked_mul(width).ok_or(CheckpointError::Truncated)?)?;
        let values = raw.chunks_exact(width).map(R::read_le).collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|_| CheckpointError::Truncated)?;
        params.push(name, tensor);
    }
    Ok(params)
}

pub fn write_checkpoint<R: Real>(path: &Path, params: &ParamSet<R>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn read_checkpoint<R: Real>(path: &Path) -> Result<ParamSet<R>, CheckpointError> {
    decode(&std::fs::read(path)?)
}
