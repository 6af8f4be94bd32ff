//! Encoder + head bank container.
//!
//! Layout: `DAMECKPT`, `u32` entry count, then per entry an 8-byte tag and
//! `u64` offset and length (offsets from the start of the file), then the
//! blobs. Tags are the blob magics `DAMEENC1` and `DAMEHEAD`.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use crate::binio::{self, DecodeError};
use crate::encoder::{EncoderParams, ENCODER_MAGIC};
use crate::error::{DameError, Result};
use crate::margin_head::{HeadBank, HEAD_MAGIC};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAMECKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub heads: HeadBank,
}

impl Checkpoint {
    pub fn new(encoder: EncoderParams, heads: HeadBank) -> Result<Self> {
        if heads.spec().full_dim() != encoder.embed_dim() {
            return Err(DameError::ShapeMismatch(format!(
                "heads cover {} dims, encoder emits {}",
                heads.spec().full_dim(),
                encoder.embed_dim()
            )));
        }
        Ok(Checkpoint { encoder, heads })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs: [(&[u8; 8], Vec<u8>); 2] =
            [(ENCODER_MAGIC, self.encoder.to_bytes()), (HEAD_MAGIC, self.heads.to_bytes())];
        let header = 8 + 4 + blobs.len() * (8 + 8 + 8);
        let mut out = Vec::with_capacity(header + blobs.iter().map(|b| b.1.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        let mut offset = header as u64;
        for (tag, blob) in &blobs {
            out.extend_from_slice(*tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for (_, blob) in blobs {
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor::new(bytes);
        let fmt = |e: DecodeError| e.to_string();
        binio::expect_magic(&mut r, CHECKPOINT_MAGIC).map_err(fmt)?;
        let n = binio::read_u32(&mut r).map_err(fmt)?;
        if n > 16 {
            return Err(format!("implausible entry count {n}"));
        }
        let mut encoder = None;
        let mut heads = None;
        for _ in 0..n {
            let mut tag = [0u8; 8];
            std::io::Read::read_exact(&mut r, &mut tag).map_err(|_| "truncated table of contents".to_string())?;
            let off = binio::read_u64(&mut r).map_err(fmt)? as usize;
            let len = binio::read_u64(&mut r).map_err(fmt)? as usize;
            let blob = off
                .checked_add(len)
                .and_then(|end| bytes.get(off..end))
                .ok_or_else(|| format!("entry {} lies outside the file", String::from_utf8_lossy(&tag)))?;
            match &tag {
                t if t == ENCODER_MAGIC => encoder = Some(EncoderParams::from_bytes(blob)?),
                t if t == HEAD_MAGIC => heads = Some(HeadBank::from_bytes(blob)?),
                t => return Err(format!("unknown entry {}", String::from_utf8_lossy(t))),
            }
        }
        let encoder = encoder.ok_or("missing encoder entry")?;
        let heads = heads.ok_or("missing head entry")?;
        Checkpoint::new(encoder, heads).map_err(|e| e.to_string())
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            DameError::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DameError::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|reason| DameError::CheckpointCorrupt { path: path.to_path_buf(), reason })
    }
}
