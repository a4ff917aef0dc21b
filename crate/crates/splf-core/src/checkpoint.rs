//! Flat binary weight files. Layout: the magic `SPLF`, a u32 format
//! version, a u32 entry count, then per entry a u16 name length, the UTF-8
//! name, a u8 rank, the dims as u32s, and the raw f32 payload. All integers
//! and floats are little-endian. Saving the same parameters twice yields
//! byte-identical files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Param;

const MAGIC: &[u8; 4] = b"SPLF";
const VERSION: u32 = 1;

pub fn save(path: &Path, params: &[Param]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name().as_bytes();
        assert!(name.len() <= u16::MAX as usize, "parameter name too long");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.shape();
        assert!(shape.len() <= u8::MAX as usize);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Loads weights into an existing parameter set. The file must cover every
/// parameter exactly once with matching shapes, and may not contain names
/// the model does not have; either direction of mismatch is an error, so a
/// checkpoint can never silently half-load.
pub fn load(path: &Path, params: &[Param]) -> Result<()> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a weight file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;

    let by_name: HashMap<&str, &Param> = params.iter().map(|p| (p.name(), p)).collect();
    assert_eq!(by_name.len(), params.len(), "duplicate parameter names");
    let mut seen: HashMap<String, ()> = HashMap::new();

    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".to_string()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(4 * numel)?;
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name}")));
        }
        let p = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if p.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file has {:?}, model has {:?}",
                shape,
                p.shape()
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.set_value(&values);
    }

    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for p in params {
        if !seen.contains_key(p.name()) {
            return Err(Error::Checkpoint(format!("missing parameter {}", p.name())));
        }
    }
    Ok(())
}
