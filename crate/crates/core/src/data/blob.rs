//! `SFHB` sample blobs.
//!
//! Little-endian layout:
//!
//! ```text
//! "SFHB" | u32 version | u8 kind | u32 ndims | u32 extent × ndims | payload | u32 crc32(payload)
//! ```
//!
//! Skeleton payloads are `f32` metres, frame payloads `u8` RGB.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::numel;

pub const MAGIC: &[u8; 4] = b"SFHB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Skeleton(Vec<f32>),
    Frames(Vec<u8>),
}

impl Payload {
    pub fn kind(&self) -> u8 {
        match self {
            Payload::Skeleton(_) => 0,
            Payload::Frames(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::Skeleton(v) => v.len(),
            Payload::Frames(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub extents: Vec<usize>,
    pub payload: Payload,
}

impl Blob {
    pub fn new(extents: Vec<usize>, payload: Payload) -> Result<Self> {
        if numel(&extents) != payload.len() {
            return Err(Error::invalid(
                "blob",
                format!("extents {extents:?} do not match payload length {}", payload.len()),
            ));
        }
        Ok(Blob { extents, payload })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.extents.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.payload.kind());
        out.extend_from_slice(&(self.extents.len() as u32).to_le_bytes());
        for &e in &self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        let start = out.len();
        match &self.payload {
            Payload::Skeleton(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Frames(v) => out.extend_from_slice(v),
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let kind = cur.take(1).ok_or_else(|| bad("truncated header"))?[0];
        let ndims = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        if ndims > 16 {
            return Err(bad(&format!("implausible rank {ndims}")));
        }
        let extents = (0..ndims)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated extents"))?;
        let count = numel(&extents);
        let width = match kind {
            0 => 4,
            1 => 1,
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        let body = cur.take(count * width).ok_or_else(|| bad("payload shorter than extents"))?;
        let stored = cur.u32().ok_or_else(|| bad("missing checksum"))?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after checksum"));
        }
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let payload = if kind == 0 {
            Payload::Skeleton(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            Payload::Frames(body.to_vec())
        };
        Ok(Blob { extents, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
