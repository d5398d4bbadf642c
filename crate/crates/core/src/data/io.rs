//! Binary dataset files.
//!
//! Layout (little-endian): magic `MPGM`, version u16, sample count u64,
//! image size u16; per sample the 16 panels as `S * S` bytes each, target
//! u8, triple count u8 and three code bytes per triple; a trailing CRC32 of
//! everything before it.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::triple::StructureTriple;
use super::{SampleRecord, PANELS};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MPGM";
pub const DATASET_VERSION: u16 = 1;

/// Serialises samples to bytes. All samples must share one image size.
pub fn encode_dataset(samples: &[SampleRecord]) -> Result<Vec<u8>> {
    let size = samples.first().map_or(0, |s| s.image_size);
    if samples.iter().any(|s| s.image_size != size) {
        return Err(Error::Format("samples with mixed image sizes".into()));
    }
    let per = PANELS * size * size + 2;
    let mut out = Vec::with_capacity(16 + samples.len() * (per + 3) + 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(size as u16).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.panels);
        out.push(s.target as u8);
        out.push(s.triples.len() as u8);
        for t in &s.triples {
            out.extend_from_slice(&t.codes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses bytes produced by [`encode_dataset`].
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SampleRecord>> {
    if bytes.len() < 20 {
        return Err(Error::Format("dataset file truncated".into()));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("dataset checksum mismatch".into()));
    }
    let count = u64::from_le_bytes(body[6..14].try_into().expect("8 bytes"));
    let size = u16::from_le_bytes([body[14], body[15]]) as usize;
    let panel_bytes = PANELS * size * size;
    let mut pos = 16;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > body.len() {
            return Err(Error::Format("dataset file truncated".into()));
        }
        let s = &body[pos..end];
        pos = end;
        Ok(s)
    };
    let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let panels = take(panel_bytes)?.to_vec();
        let head = take(2)?;
        let (target, n) = (head[0] as usize, head[1] as usize);
        let mut triples = Vec::with_capacity(n);
        for _ in 0..n {
            let c = take(3)?;
            triples.push(StructureTriple::from_codes([c[0], c[1], c[2]])?);
        }
        samples.push(
            SampleRecord::new(size, panels, target, triples)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    if pos != body.len() {
        return Err(Error::Format("trailing bytes after last sample".into()));
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(samples)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
