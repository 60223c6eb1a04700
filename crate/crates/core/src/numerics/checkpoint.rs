//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "TLDA0001"
//! repeated: name_len, name (UTF-8), rank, dims[rank], data (f32 LE)
//! optional: 0 (empty name marks the end of tensors), then UTF-8 trailer to EOF
//! ```

use std::io::{Read, Write};

use super::network::ParamStore;
use super::tensor::Tensor;
use crate::error::{bail, Result};

pub const MAGIC: &[u8; 8] = b"TLDA0001";

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &ParamStore, trailer: Option<&str>) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors.iter() {
        if name.is_empty() {
            bail!(InvalidArgument, "tensor names must be non-empty");
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    if let Some(text) = trailer {
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        bail!(Format, "checkpoint truncated at byte {}", *pos);
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let b = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses a checkpoint, returning its tensors and the optional trailer text.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, Option<String>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        bail!(Format, "missing TLDA0001 magic");
    }
    let mut pos = MAGIC.len();
    let mut store = ParamStore::new();
    while pos < bytes.len() {
        let name_len = take_u32(&bytes, &mut pos)? as usize;
        if name_len == 0 {
            let text = std::str::from_utf8(&bytes[pos..])
                .map_err(|_| crate::error::Error::Format("trailer is not UTF-8".into()))?;
            return Ok((store, Some(text.to_string())));
        }
        let name = std::str::from_utf8(take(&bytes, &mut pos, name_len)?)
            .map_err(|_| crate::error::Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take_u32(&bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&bytes, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&bytes, &mut pos, n.checked_mul(4).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.get(&name).is_some() {
            bail!(Format, "duplicate tensor '{name}'");
        }
        store.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok((store, None))
}
