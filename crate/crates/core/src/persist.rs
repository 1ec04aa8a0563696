//! Versioned binary artifacts with integrity checks.
//!
//! Every artifact file is a 32-byte header followed by the payload:
//!
//! ```text
//! offset  size  field
//!      0     4  magic tag (per artifact kind)
//!      4     4  format version, u32 LE
//!      8     8  payload length in bytes, u64 LE
//!     16     8  FNV-1a 64 of the payload, u64 LE
//!     24     8  upstream-config hash, u64 LE
//!     32     -  payload
//! ```
//!
//! All multi-byte integers inside our own formats are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

pub fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    MnistCache,
    Dataset,
    Checkpoint,
    Embeddings,
    Clusters,
    Environments,
}

impl ArtifactKind {
    pub fn magic(self) -> [u8; 4] {
        match self {
            ArtifactKind::MnistCache => *b"MNST",
            ArtifactKind::Dataset => *b"CMDS",
            ArtifactKind::Checkpoint => *b"CKPT",
            ArtifactKind::Embeddings => *b"EMBD",
            ArtifactKind::Clusters => *b"CLST",
            ArtifactKind::Environments => *b"ENVS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub payload_len: u64,
    pub content_hash: u64,
    pub upstream_hash: u64,
}

impl ArtifactHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.magic);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..16].copy_from_slice(&self.payload_len.to_le_bytes());
        out[16..24].copy_from_slice(&self.content_hash.to_le_bytes());
        out[24..32].copy_from_slice(&self.upstream_hash.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptPayload(format!(
                "artifact shorter than its {HEADER_LEN}-byte header"
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        Ok(Self {
            magic: bytes[0..4].try_into().unwrap(),
            version: u32_at(4),
            payload_len: u64_at(8),
            content_hash: u64_at(16),
            upstream_hash: u64_at(24),
        })
    }
}

/// Encode header + payload into the exact on-disk bytes.
pub fn encode_artifact(kind: ArtifactKind, payload: &[u8], upstream_hash: u64) -> Vec<u8> {
    let header = ArtifactHeader {
        magic: kind.magic(),
        version: FORMAT_VERSION,
        payload_len: payload.len() as u64,
        content_hash: fnv1a64(payload),
        upstream_hash,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(payload);
    out
}

/// Verify and strip the header; returns the header and payload slice.
pub fn decode_artifact(kind: ArtifactKind, bytes: &[u8]) -> Result<(ArtifactHeader, &[u8])> {
    let header = ArtifactHeader::decode(bytes)?;
    if header.magic != kind.magic() {
        return Err(Error::WrongKind {
            expected: kind.magic(),
            found: header.magic,
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(header.version));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != header.payload_len {
        return Err(Error::CorruptPayload(format!(
            "payload length {} but header says {}",
            payload.len(),
            header.payload_len
        )));
    }
    let hash = fnv1a64(payload);
    if hash != header.content_hash {
        return Err(Error::CorruptPayload(format!(
            "content hash {hash:#018x} does not match header {:#018x}",
            header.content_hash
        )));
    }
    Ok((header, payload))
}

/// Write `bytes` to `path` atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let unique = format!(
        ".{name}.tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    )
    .replace(['(', ')'], "");
    path.with_file_name(unique)
}

pub fn save_artifact(kind: ArtifactKind, payload: &[u8], upstream_hash: u64, path: &Path) -> Result<()> {
    write_atomic(path, &encode_artifact(kind, payload, upstream_hash))
}

/// Load and verify an artifact. Returns `(upstream_hash, payload)`.
pub fn load_artifact(kind: ArtifactKind, path: &Path) -> Result<(u64, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let (header, payload) = decode_artifact(kind, &bytes)?;
    Ok((header.upstream_hash, payload.to_vec()))
}

/// Little-endian payload builder.
#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }
    pub fn len(&self) -> usize {
        self.buf.len()
    }
    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian payload reader; every read is bounds-checked.
#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::CorruptPayload(format!(
                "payload ends at {} bytes, needed {} more at offset {}",
                self.buf.len(),
                n,
                self.pos
            ))),
        }
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub fn finish(self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(Error::CorruptPayload(format!(
                "{} unexpected trailing bytes",
                self.remaining()
            )))
        }
    }
}
