//! "AIRD" paired-sequence datasets and "AIRM" mask files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{FrameMask, TokenId, TokenSequence};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"AIRD";
pub const DATASET_VERSION: u32 = 1;
pub const MASK_MAGIC: &[u8; 4] = b"AIRM";

/// Target/condition pairs of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub codebooks: usize,
    pub vocab: usize,
    pub records: Vec<(TokenSequence, TokenSequence)>,
}

impl Dataset {
    pub fn new(frames: usize, codebooks: usize, vocab: usize) -> Self {
        Self {
            frames,
            codebooks,
            vocab,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, x: TokenSequence, c: TokenSequence) -> Result<()> {
        for s in [&x, &c] {
            if s.frames() != self.frames || s.codebooks() != self.codebooks {
                return Err(Error::Shape(format!(
                    "record {}x{} in a {}x{} dataset",
                    s.frames(),
                    s.codebooks(),
                    self.frames,
                    self.codebooks
                )));
            }
            s.check_vocab(self.vocab)?;
        }
        self.records.push((x, c));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = self.frames * self.codebooks;
        let mut out = Vec::with_capacity(24 + self.records.len() * per * 4);
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.records.len() as u32,
            self.frames as u32,
            self.codebooks as u32,
            self.vocab as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (x, c) in &self.records {
            for &id in x.ids().iter().chain(c.ids()) {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("dataset shorter than its header".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not an AIRD dataset".into()));
        }
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            *h = read_u32(&mut r)?;
        }
        let [version, count, frames, codebooks, vocab] = header.map(|v| v as usize);
        if version != DATASET_VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        if codebooks == 0 || vocab == 0 || vocab > (TokenId::MAX as usize) + 1 {
            return Err(Error::Format(format!("invalid dataset header n={codebooks} V={vocab}")));
        }
        let per = frames * codebooks;
        let expected = count
            .checked_mul(per * 4)
            .ok_or_else(|| Error::Format("dataset size overflows".into()))?;
        if r.len() != expected {
            return Err(Error::Format(format!(
                "dataset body has {} bytes, header implies {expected}",
                r.len()
            )));
        }
        let mut ds = Dataset::new(frames, codebooks, vocab);
        let ids: Vec<TokenId> = r.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        for rec in ids.chunks_exact(2 * per.max(1)).take(count) {
            let x = TokenSequence::new(frames, codebooks, rec[..per].to_vec())?;
            let c = TokenSequence::new(frames, codebooks, rec[per..].to_vec())?;
            ds.push(x, c).map_err(|e| Error::Format(format!("bad record: {e}")))?;
        }
        if per == 0 {
            let empty = TokenSequence::new(0, codebooks, Vec::new())?;
            for _ in 0..count {
                ds.records.push((empty.clone(), empty.clone()));
            }
        }
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_mask<W: Write>(mask: &FrameMask, mut w: W) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    w.write_all(&(mask.len() as u32).to_le_bytes())?;
    let body: Vec<u8> = mask.flags().iter().map(|&f| f as u8).collect();
    w.write_all(&body)?;
    Ok(())
}

pub fn read_mask(bytes: &[u8]) -> Result<FrameMask> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("mask file too short".into()))?;
    if &magic != MASK_MAGIC {
        return Err(Error::Format("not an AIRM mask".into()));
    }
    let len = read_u32(&mut r)? as usize;
    if r.len() != len {
        return Err(Error::Format(format!("mask body has {} bytes, header says {len}", r.len())));
    }
    let flags = r
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameMask::new(flags))
}
