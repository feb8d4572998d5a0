//! `CKWT` weight container.
//!
//! Little-endian layout: the magic bytes `CKWT`, a `u32` version, then
//! records until end of file. Each record is a `u32` name length, the UTF-8
//! name, a `u32` rank, `rank` `u32` extents and the `f64` payload in
//! row-major order.

use std::io::{self, Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CKWT_MAGIC: &[u8; 4] = b"CKWT";
pub const CKWT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 1 << 16;
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 32;

pub fn write_ckwt<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(CKWT_MAGIC)?;
    w.write_all(&CKWT_VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn truncated(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format(format!("CKWT file truncated while reading {what}"))
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated(e, what))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads the next record's name length, or `None` at a clean end of file.
fn read_record_start<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format("CKWT file truncated inside a record header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

pub fn read_ckwt<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(e, "magic"))?;
    if &magic != CKWT_MAGIC {
        return Err(Error::Format(format!("bad CKWT magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CKWT_VERSION {
        return Err(Error::Format(format!("unsupported CKWT version {version}")));
    }
    let mut records = Vec::new();
    while let Some(name_len) = read_record_start(&mut r)? {
        let name_len = name_len as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("CKWT record name length {name_len} out of range")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| truncated(e, "record name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("CKWT record name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("CKWT record `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = read_u32(&mut r, "extent")? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel == 0 || numel > MAX_ELEMENTS {
            return Err(Error::Format(format!("CKWT record `{name}` has invalid shape {shape:?}")));
        }
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(|e| truncated(e, "payload"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}
