//! MNIST IDX ingest.
//!
//! IDX files are big-endian: a 4-byte magic (`0x00000803` for images,
//! `0x00000801` for labels), the dimension sizes as `u32`, then raw bytes.
//! Pixels are normalized to `[0, 1]` here and nowhere else.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::persist::{self, ArtifactKind, ByteReader, ByteWriter};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_stems(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Grayscale digits with their labels. `images` is `N x rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub images: Array3<f64>,
    pub digit_labels: Vec<u8>,
    pub split: Split,
}

impl RawDataset {
    pub fn new(images: Array3<f64>, digit_labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.shape()[0] != digit_labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: digit_labels.len(),
            });
        }
        if let Some((index, &value)) = digit_labels.iter().enumerate().find(|(_, &d)| d > 9) {
            return Err(Error::LabelOutOfRange { index, value });
        }
        Ok(Self {
            images,
            digit_labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.digit_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digit_labels.is_empty()
    }

    /// Instances at the given positions, in that order.
    pub fn select(&self, indices: &[usize]) -> RawDataset {
        RawDataset {
            images: self.images.select(ndarray::Axis(0), indices),
            digit_labels: indices.iter().map(|&i| self.digit_labels[i]).collect(),
            split: self.split,
        }
    }

    /// Cache payload: 16-byte header (version, N, R, C as u32 LE), split tag,
    /// then raw pixel bytes, then label bytes.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let (n, r, c) = self.images.dim();
        let mut w = ByteWriter::new();
        w.u32(CACHE_VERSION).u32(n as u32).u32(r as u32).u32(c as u32);
        w.u8(self.split.tag());
        let pixels: Vec<u8> = self.images.iter().map(|&p| (p * 255.0).round() as u8).collect();
        w.bytes(&pixels).bytes(&self.digit_labels);
        w.finish()
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            t => return Err(Error::CorruptPayload(format!("unknown split tag {t}"))),
        };
        let pixels = r.take(n * rows * cols)?;
        let labels = r.take(n)?.to_vec();
        r.finish()?;
        let images = Array3::from_shape_vec((n, rows, cols), pixels.iter().map(|&b| b as f64 / 255.0).collect())
            .map_err(|e| Error::CorruptPayload(e.to_string()))?;
        RawDataset::new(images, labels, split)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        persist::save_artifact(ArtifactKind::MnistCache, &self.to_cache_bytes(), 0, path)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let (_, payload) = persist::load_artifact(ArtifactKind::MnistCache, path)?;
        Self::from_cache_bytes(&payload)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::TruncatedPayload {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    match bytes.len() {
        n if n < expected => Err(Error::TruncatedPayload { expected, found: n }),
        n if n > expected => Err(Error::TrailingBytes { expected, found: n }),
        _ => Ok(()),
    }
}

/// Parse an IDX3 image payload into `N x R x C` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array3<f64>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or(Error::TruncatedPayload {
            expected: usize::MAX,
            found: bytes.len(),
        })?;
    check_len(bytes, expected)?;
    let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array3::from_shape_vec((n, rows, cols), pixels).expect("length checked above"))
}

/// Parse an IDX1 label payload; every label must be a digit.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + n)?;
    let labels = bytes[8..].to_vec();
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &d)| d > 9) {
        return Err(Error::LabelOutOfRange { index, value });
    }
    Ok(labels)
}

/// Find `stem` or `stem.gz` in `dir` (also accepting the `.idx3-ubyte` spelling).
fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), dotted] {
        for candidate in [dir.join(&name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::MissingFile(dir.join(stem)))
}

/// Read a file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<RawDataset> {
    let (image_stem, label_stem) = split.file_stems();
    let image_path = locate(dir, image_stem)?;
    let label_path = locate(dir, label_stem)?;
    let images = parse_idx_images(&read_maybe_gz(&image_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(&label_path)?)?;
    RawDataset::new(images, labels, split)
}

/// `load_mnist` through an on-disk cache file; the cache is written on a miss.
pub fn load_mnist_cached(dir: &Path, split: Split, cache: &Path) -> Result<RawDataset> {
    if cache.is_file() {
        if let Ok(raw) = RawDataset::load_cache(cache) {
            return Ok(raw);
        }
    }
    let raw = load_mnist(dir, split)?;
    raw.save_cache(cache)?;
    Ok(raw)
}
