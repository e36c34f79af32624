//! Versioned binary checkpoints: configuration text, step counter,
//! both parameter stores, and full optimizer moments, with bit-exact
//! round trips.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic    4 bytes  "AMGC"
//! version  u16      currently 1
//! config   u32 length + UTF-8 bytes
//! step     u64      completed training steps
//! section  generator:   adam_t u64, entry count u32, entries
//! section  discriminator: same shape
//! ```
//!
//! Each entry: name (u16 length + UTF-8), rank (u8), dims (u32 each),
//! value count (u64), then three f64 arrays of that count — values,
//! first moments, second moments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMGC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One serialized parameter section: values plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub store: ParamStore,
    pub adam_t: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

/// Complete training state as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config_text: String,
    pub step: u64,
    pub gen: Section,
    pub disc: Section,
}

// ── Writing ──────────────────────────────────────────────────────────

fn push_f64s(buf: &mut Vec<u8>, values: &[Real]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_section(buf: &mut Vec<u8>, s: &Section) -> Result<()> {
    if s.m.len() != s.store.len() || s.v.len() != s.store.len() {
        return Err(Error::Shape {
            op: "checkpoint",
            detail: format!(
                "{} first / {} second moments vs {} parameters",
                s.m.len(),
                s.v.len(),
                s.store.len()
            ),
        });
    }
    buf.extend_from_slice(&s.adam_t.to_le_bytes());
    buf.extend_from_slice(&(s.store.len() as u32).to_le_bytes());
    for (i, e) in s.store.entries().iter().enumerate() {
        if s.m[i].len() != e.data.len() || s.v[i].len() != e.data.len() {
            return Err(Error::Shape {
                op: "checkpoint",
                detail: format!("moment size mismatch at '{}'", e.name),
            });
        }
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
        push_f64s(buf, &e.data);
        push_f64s(buf, &s.m[i]);
        push_f64s(buf, &s.v[i]);
    }
    Ok(())
}

/// Serialize and write a checkpoint.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    let cfg = ckpt.config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    push_section(&mut buf, &ckpt.gen)?;
    push_section(&mut buf, &ckpt.disc)?;
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Reading ──────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<Real>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Config(format!(
            "{}: checkpoint contains invalid UTF-8 text",
            self.path
        )))
    }
}

fn read_section(r: &mut Reader) -> Result<Section> {
    let adam_t = r.u64()?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = r.u64()? as usize;
        let data = r.f64s(n)?;
        store.push(&name, shape, data)?;
        m.push(r.f64s(n)?);
        v.push(r.f64s(n)?);
    }
    Ok(Section {
        store,
        adam_t,
        m,
        v,
    })
}

/// Read and validate a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path_str.clone(),
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path_str,
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path_str,
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let cfg_len = r.u32()? as usize;
    let config_text = r.utf8(cfg_len)?;
    let step = r.u64()?;
    let gen = read_section(&mut r)?;
    let disc = read_section(&mut r)?;
    Ok(Checkpoint {
        version,
        config_text,
        step,
        gen,
        disc,
    })
}
