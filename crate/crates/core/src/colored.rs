//! ColoredMNIST synthesis.
//!
//! Recipe per instance `i`:
//! 1. `clean_i = 1` if the digit is 0..=4, else 0;
//! 2. `y_i` flips `clean_i` with probability `noise_level`;
//! 3. `z_i` flips `y_i` with probability `color_correlation`, and the
//!    downsampled digit is painted into the red channel (`z = 0`) or the green
//!    channel (`z = 1`).
//!
//! All draws come from the `"synthesis"` stream of the config seed: first the
//! `N` noise flips in ascending instance order, then the `N` color flips.
//! Because the draw positions do not depend on the probabilities, two configs
//! that differ only in `color_correlation` share the same label noise.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mnist::RawDataset;
use crate::persist::{self, ArtifactKind, ByteReader, ByteWriter};
use crate::rng::RngStream;

pub const CHANNELS: usize = 2;
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Probability of flipping the clean label.
    pub noise_level: f64,
    /// Probability of flipping the label to obtain the color id.
    pub color_correlation: f64,
    pub seed: u64,
    pub grayscale: bool,
    pub downsample: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            noise_level: 0.25,
            color_correlation: 0.15,
            seed: 0,
            grayscale: false,
            downsample: true,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise_level", self.noise_level),
            ("color_correlation", self.color_correlation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Two-channel images flattened channel-major: `[red | green]`, each `side x side`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredDataset {
    pub images: Array2<f64>,
    pub side: usize,
    pub labels: Vec<u8>,
    pub color_ids: Vec<u8>,
    pub clean_labels: Vec<u8>,
    pub digit_labels: Vec<u8>,
    pub source_index: Vec<u32>,
    pub config: SynthesisConfig,
}

pub fn binarize_label(digit: u8) -> u8 {
    u8::from(digit <= 4)
}

/// Returns `1 - bit` with probability `p`; always consumes exactly one draw.
pub fn flip_with_probability(bit: u8, p: f64, rng: &mut RngStream) -> u8 {
    if rng.uniform() < p {
        1 - bit
    } else {
        bit
    }
}

/// 2x2 mean pooling. Odd trailing rows/columns are dropped.
pub fn downsample(image: ArrayView2<f64>) -> Array2<f64> {
    let (rows, cols) = image.dim();
    Array2::from_shape_fn((rows / 2, cols / 2), |(r, c)| {
        let block = image.slice(s![2 * r..2 * r + 2, 2 * c..2 * c + 2]);
        block.sum() / 4.0
    })
}

/// Paint `image` into the red (`z = 0`) or green (`z = 1`) channel.
pub fn colorize(image: ArrayView2<f64>, color_id: u8) -> ndarray::Array3<f64> {
    let (rows, cols) = image.dim();
    let mut out = ndarray::Array3::zeros((CHANNELS, rows, cols));
    out.slice_mut(s![color_id as usize, .., ..]).assign(&image);
    out
}

pub fn synthesize(raw: &RawDataset, config: &SynthesisConfig) -> Result<ColoredDataset> {
    config.validate()?;
    let n = raw.len();
    let mut rng = RngStream::new(config.seed, "synthesis");

    let clean_labels: Vec<u8> = raw.digit_labels.iter().map(|&d| binarize_label(d)).collect();
    let labels: Vec<u8> = clean_labels
        .iter()
        .map(|&c| flip_with_probability(c, config.noise_level, &mut rng))
        .collect();
    let color_ids: Vec<u8> = labels
        .iter()
        .map(|&y| flip_with_probability(y, config.color_correlation, &mut rng))
        .collect();

    let (_, rows, cols) = raw.images.dim();
    let (out_rows, out_cols) = if config.downsample {
        (rows / 2, cols / 2)
    } else {
        (rows, cols)
    };
    if out_rows != out_cols {
        return Err(Error::ShapeMismatch(format!(
            "expected square images, got {out_rows}x{out_cols}"
        )));
    }
    let plane = out_rows * out_cols;
    let mut images = Array2::zeros((n, CHANNELS * plane));
    for (i, mut row) in images.outer_iter_mut().enumerate() {
        let source = raw.images.index_axis(ndarray::Axis(0), i);
        let gray = if config.downsample {
            downsample(source)
        } else {
            source.to_owned()
        };
        // Stored values are representable in f32 so the dataset cache is lossless.
        let gray = gray.mapv(|v| v as f32 as f64);
        let flat = gray.as_slice().expect("freshly built array is contiguous");
        if config.grayscale {
            row.slice_mut(s![..plane]).assign(&ndarray::aview1(flat));
            row.slice_mut(s![plane..]).assign(&ndarray::aview1(flat));
        } else {
            let colored = colorize(gray.view(), color_ids[i]);
            row.assign(&ndarray::aview1(colored.as_slice().unwrap()));
        }
    }

    Ok(ColoredDataset {
        images,
        side: out_rows,
        labels,
        color_ids,
        clean_labels,
        digit_labels: raw.digit_labels.clone(),
        source_index: (0..n as u32).collect(),
        config: *config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationStats {
    pub count: usize,
    /// `group_counts[y][z]`
    pub group_counts: [[usize; 2]; 2],
    /// Fraction of instances with `y = 1`.
    pub class_balance: f64,
    /// Fraction with `z != y`.
    pub empirical_color_flip: f64,
    /// Fraction with `y != clean label`.
    pub empirical_label_noise: f64,
}

impl ColoredDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.images.ncols()
    }

    pub fn labels_f64(&self) -> ndarray::Array1<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    /// Instances at `indices`, in that order; provenance indices are carried over.
    pub fn select(&self, indices: &[usize]) -> ColoredDataset {
        let pick = |v: &[u8]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        ColoredDataset {
            images: self.images.select(ndarray::Axis(0), indices),
            side: self.side,
            labels: pick(&self.labels),
            color_ids: pick(&self.color_ids),
            clean_labels: pick(&self.clean_labels),
            digit_labels: pick(&self.digit_labels),
            source_index: indices.iter().map(|&i| self.source_index[i]).collect(),
            config: self.config,
        }
    }

    pub fn concat(parts: &[&ColoredDataset]) -> Result<ColoredDataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        if parts.iter().any(|p| p.input_width() != first.input_width()) {
            return Err(Error::ShapeMismatch("concatenating datasets of different widths".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.images.view()).collect();
        let images = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let cat = |f: fn(&ColoredDataset) -> &Vec<u8>| parts.iter().flat_map(|p| f(p).iter().copied()).collect();
        Ok(ColoredDataset {
            images,
            side: first.side,
            labels: cat(|d| &d.labels),
            color_ids: cat(|d| &d.color_ids),
            clean_labels: cat(|d| &d.clean_labels),
            digit_labels: cat(|d| &d.digit_labels),
            source_index: parts.iter().flat_map(|p| p.source_index.iter().copied()).collect(),
            config: first.config,
        })
    }

    /// Cache payload: header (version u32, N u32, values-per-instance u32,
    /// noise f64, color f64, seed u64, grayscale u8, downsample u8, side u32),
    /// then per instance: pixels as f32 channel-major, y, z, clean, digit (u8 each),
    /// source index u32.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(CACHE_VERSION)
            .u32(self.len() as u32)
            .u32(self.input_width() as u32)
            .f64(self.config.noise_level)
            .f64(self.config.color_correlation)
            .u64(self.config.seed)
            .u8(self.config.grayscale as u8)
            .u8(self.config.downsample as u8)
            .u32(self.side as u32);
        for (i, row) in self.images.outer_iter().enumerate() {
            for &v in row {
                w.f32(v as f32);
            }
            w.u8(self.labels[i])
                .u8(self.color_ids[i])
                .u8(self.clean_labels[i])
                .u8(self.digit_labels[i])
                .u32(self.source_index[i]);
        }
        w.finish()
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let width = r.u32()? as usize;
        let config = SynthesisConfig {
            noise_level: r.f64()?,
            color_correlation: r.f64()?,
            seed: r.u64()?,
            grayscale: r.u8()? != 0,
            downsample: r.u8()? != 0,
        };
        let side = r.u32()? as usize;
        if CHANNELS * side * side != width {
            return Err(Error::CorruptPayload(format!(
                "width {width} inconsistent with side {side}"
            )));
        }
        let mut pixels = Vec::with_capacity(n * width);
        let mut ds = ColoredDataset {
            images: Array2::zeros((0, width)),
            side,
            labels: Vec::with_capacity(n),
            color_ids: Vec::with_capacity(n),
            clean_labels: Vec::with_capacity(n),
            digit_labels: Vec::with_capacity(n),
            source_index: Vec::with_capacity(n),
            config,
        };
        for _ in 0..n {
            for _ in 0..width {
                pixels.push(r.f32()? as f64);
            }
            ds.labels.push(r.u8()?);
            ds.color_ids.push(r.u8()?);
            ds.clean_labels.push(r.u8()?);
            ds.digit_labels.push(r.u8()?);
            ds.source_index.push(r.u32()?);
        }
        r.finish()?;
        ds.images = Array2::from_shape_vec((n, width), pixels).expect("sized above");
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path, upstream_hash: u64) -> Result<()> {
        persist::save_artifact(ArtifactKind::Dataset, &self.to_cache_bytes(), upstream_hash, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (_, payload) = persist::load_artifact(ArtifactKind::Dataset, path)?;
        Self::from_cache_bytes(&payload)
    }
}

pub fn correlation_stats(dataset: &ColoredDataset) -> Result<CorrelationStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut group_counts = [[0usize; 2]; 2];
    let mut noisy = 0usize;
    for i in 0..dataset.len() {
        let (y, z) = (dataset.labels[i], dataset.color_ids[i]);
        group_counts[y as usize][z as usize] += 1;
        noisy += usize::from(y != dataset.clean_labels[i]);
    }
    let n = dataset.len() as f64;
    let positives = group_counts[1][0] + group_counts[1][1];
    let flipped = group_counts[0][1] + group_counts[1][0];
    Ok(CorrelationStats {
        count: dataset.len(),
        group_counts,
        class_balance: positives as f64 / n,
        empirical_color_flip: flipped as f64 / n,
        empirical_label_noise: noisy as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::Split;
    use ndarray::{array, Array3};

    fn toy_raw(n: usize) -> RawDataset {
        let images = Array3::from_shape_fn((n, 4, 4), |(i, r, c)| ((i + r * 4 + c) % 256) as f64 / 255.0);
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        RawDataset::new(images, labels, Split::Train).unwrap()
    }

    fn tiny(labels: &[u8], colors: &[u8]) -> ColoredDataset {
        let n = labels.len();
        ColoredDataset {
            images: Array2::zeros((n, 2)),
            side: 1,
            labels: labels.to_vec(),
            color_ids: colors.to_vec(),
            clean_labels: labels.to_vec(),
            digit_labels: vec![0; n],
            source_index: (0..n as u32).collect(),
            config: SynthesisConfig::default(),
        }
    }

    #[test]
    fn binarize_boundaries() {
        assert_eq!(binarize_label(3), 1);
        assert_eq!(binarize_label(4), 1);
        assert_eq!(binarize_label(5), 0);
        assert_eq!(binarize_label(7), 0);
        assert_eq!(binarize_label(0), 1);
    }

    #[test]
    fn flip_certain_and_never() {
        let mut rng = RngStream::new(0, "flip");
        for _ in 0..1000 {
            assert_eq!(flip_with_probability(1, 0.0, &mut rng), 1);
            assert_eq!(flip_with_probability(1, 1.0, &mut rng), 0);
        }
        assert_eq!(rng.position(), 2000);
    }

    #[test]
    fn flip_rate_monte_carlo() {
        let mut rng = RngStream::new(11, "flip-rate");
        let n = 100_000;
        let flips = (0..n).filter(|_| flip_with_probability(0, 0.25, &mut rng) == 1).count();
        assert!((flips as f64 / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn downsample_means() {
        let constant = Array2::from_elem((28, 28), 0.3);
        let out = downsample(constant.view());
        assert_eq!(out.dim(), (14, 14));
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let block = array![[0.1, 0.2], [0.3, 0.4]];
        assert!((downsample(block.view())[[0, 0]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn colorize_channels() {
        let img = array![[0.1, 0.9], [0.5, 0.0]];
        let red = colorize(img.view(), 0);
        assert_eq!(red.slice(s![0, .., ..]), img);
        assert!(red.slice(s![1, .., ..]).iter().all(|&v| v == 0.0));
        let green = colorize(img.view(), 1);
        assert_eq!(green.slice(s![1, .., ..]), img);
        assert!(green.slice(s![0, .., ..]).iter().all(|&v| v == 0.0));
        for out in [red, green] {
            assert_eq!(out.sum_axis(ndarray::Axis(0)), img);
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_consistent() {
        let raw = toy_raw(200);
        let cfg = SynthesisConfig {
            seed: 9,
            ..Default::default()
        };
        let a = synthesize(&raw, &cfg).unwrap();
        let b = synthesize(&raw, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.input_width(), 2 * 2 * 2);
        for i in 0..a.len() {
            assert_eq!(a.clean_labels[i], binarize_label(raw.digit_labels[i]));
            let row = a.images.row(i);
            let (red, green) = (row.slice(s![..4]), row.slice(s![4..]));
            let off = if a.color_ids[i] == 0 { green } else { red };
            assert!(off.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn noise_shared_across_color_levels() {
        let raw = toy_raw(500);
        let base = SynthesisConfig {
            seed: 3,
            ..Default::default()
        };
        let a = synthesize(&raw, &SynthesisConfig { color_correlation: 0.1, ..base }).unwrap();
        let b = synthesize(&raw, &SynthesisConfig { color_correlation: 0.9, ..base }).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.color_ids, b.color_ids);
    }

    #[test]
    fn grayscale_keeps_both_channels() {
        let raw = toy_raw(50);
        let cfg = SynthesisConfig {
            grayscale: true,
            ..Default::default()
        };
        let ds = synthesize(&raw, &cfg).unwrap();
        for row in ds.images.outer_iter() {
            assert_eq!(row.slice(s![..4]), row.slice(s![4..]));
        }
    }

    #[test]
    fn rejects_bad_probabilities() {
        let raw = toy_raw(4);
        let cfg = SynthesisConfig {
            color_correlation: 1.5,
            ..Default::default()
        };
        assert!(matches!(synthesize(&raw, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn stats_examples() {
        let s = correlation_stats(&tiny(&[0, 1], &[0, 1])).unwrap();
        assert_eq!(s.empirical_color_flip, 0.0);
        let s = correlation_stats(&tiny(&[0, 1], &[1, 0])).unwrap();
        assert_eq!(s.empirical_color_flip, 1.0);
        assert_eq!(s.class_balance, 0.5);
        assert!(matches!(correlation_stats(&tiny(&[], &[])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn cache_round_trip() {
        let ds = synthesize(&toy_raw(30), &SynthesisConfig::default()).unwrap();
        let back = ColoredDataset::from_cache_bytes(&ds.to_cache_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn select_and_concat() {
        let ds = synthesize(&toy_raw(10), &SynthesisConfig::default()).unwrap();
        let a = ds.select(&[3, 1]);
        assert_eq!(a.source_index, vec![3, 1]);
        assert_eq!(a.images.row(0), ds.images.row(3));
        let both = ColoredDataset::concat(&[&a, &ds.select(&[7])]).unwrap();
        assert_eq!(both.source_index, vec![3, 1, 7]);
        assert_eq!(both.labels, vec![ds.labels[3], ds.labels[1], ds.labels[7]]);
    }
}
