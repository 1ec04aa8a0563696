//! Environment construction from cluster structure.
//!
//! Within a cluster the less frequent class is the minority; those instances
//! are the conflict samples. `D_m` is the union of all minorities and
//! `D_balance` adds as many dominant instances as there are minority ones overall.

use crate::cluster::ClusterAssignment;
use crate::colored::{correlation_stats, synthesize, ColoredDataset, CorrelationStats, SynthesisConfig};
use crate::error::{Error, Result};
use crate::mnist::RawDataset;
use crate::persist::{self, ArtifactKind, ByteReader, ByteWriter};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPart {
    /// `None` when both classes are equally frequent.
    pub minority_label: Option<u8>,
    pub minority: Vec<usize>,
    pub dominant: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSplit {
    pub clusters: Vec<ClusterPart>,
}

impl ClusterSplit {
    pub fn minority_count(&self) -> usize {
        self.clusters.iter().map(|c| c.minority.len()).sum()
    }
}

pub fn minority_split(assignment: &ClusterAssignment, labels: &[u8]) -> Result<ClusterSplit> {
    if labels.len() != assignment.assignment.len() {
        return Err(Error::LengthMismatch {
            expected: assignment.assignment.len(),
            found: labels.len(),
        });
    }
    let mut members: Vec<[Vec<usize>; 2]> = vec![Default::default(); assignment.k];
    for (i, (&c, &y)) in assignment.assignment.iter().zip(labels).enumerate() {
        members[c][y as usize].push(i);
    }
    let clusters = members
        .into_iter()
        .map(|[zeros, ones]| match zeros.len().cmp(&ones.len()) {
            std::cmp::Ordering::Less => ClusterPart {
                minority_label: Some(0),
                minority: zeros,
                dominant: ones,
            },
            std::cmp::Ordering::Greater => ClusterPart {
                minority_label: Some(1),
                minority: ones,
                dominant: zeros,
            },
            std::cmp::Ordering::Equal => {
                let mut all = zeros;
                all.extend(ones);
                all.sort_unstable();
                ClusterPart {
                    minority_label: None,
                    minority: Vec::new(),
                    dominant: all,
                }
            }
        })
        .collect();
    Ok(ClusterSplit { clusters })
}

/// Class balance and color-label relation of one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStats {
    pub size: usize,
    pub stats: CorrelationStats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentPair {
    /// Minority (conflict) instances, ascending.
    pub minority: Vec<usize>,
    /// Minority plus matched dominant instances, ascending.
    pub balanced: Vec<usize>,
    /// Cluster of every member of `balanced`, aligned with it.
    pub clusters: Vec<usize>,
}

/// Sample `|D_m|` dominant instances uniformly without replacement from the
/// pooled dominant lists of all clusters that have a minority, using the
/// `"envsample"` stream of `seed`.
///
/// Matching counts cluster by cluster would over-draw from clusters that the
/// embedding splits by digit shape: there the dominant class is mostly
/// label-noise instances, and `D_balance` would lose its shape signal.
pub fn build_environments(split: &ClusterSplit, seed: u64) -> Result<EnvironmentPair> {
    if split.minority_count() == 0 {
        return Err(Error::NoMinorities);
    }
    let mut minority = Vec::new();
    let mut pool = Vec::new();
    let mut tagged: Vec<(usize, usize)> = Vec::new();
    for (j, part) in split.clusters.iter().enumerate() {
        if part.minority.is_empty() {
            continue;
        }
        minority.extend_from_slice(&part.minority);
        tagged.extend(part.minority.iter().map(|&i| (i, j)));
        pool.extend(part.dominant.iter().map(|&i| (i, j)));
    }
    let mut rng = RngStream::new(seed, "envsample");
    tagged.extend(rng.sample_without_replacement(&pool, minority.len()));
    minority.sort_unstable();
    tagged.sort_unstable();
    Ok(EnvironmentPair {
        minority,
        balanced: tagged.iter().map(|t| t.0).collect(),
        clusters: tagged.iter().map(|t| t.1).collect(),
    })
}

impl EnvironmentPair {
    pub fn stats(&self, dataset: &ColoredDataset) -> Result<(EnvStats, EnvStats)> {
        let of = |idx: &[usize]| -> Result<EnvStats> {
            Ok(EnvStats {
                size: idx.len(),
                stats: correlation_stats(&dataset.select(idx))?,
            })
        };
        Ok((of(&self.minority)?, of(&self.balanced)?))
    }

    /// Export CSV: `instance_index,environment,cluster,y,z` where environment is
    /// `both` for minority instances (they belong to both sets) and `Dbalance` otherwise.
    pub fn to_csv(&self, dataset: &ColoredDataset) -> String {
        let mut out = String::from("instance_index,environment,cluster,y,z\n");
        for (&i, &c) in self.balanced.iter().zip(&self.clusters) {
            let env = if self.minority.binary_search(&i).is_ok() { "both" } else { "Dbalance" };
            out.push_str(&format!(
                "{i},{env},{c},{},{}\n",
                dataset.labels[i], dataset.color_ids[i]
            ));
        }
        out
    }

    /// Payload: |D_m| u32, indices u32, |D_balance| u32, (index u32, cluster u32) pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.minority.len() as u32);
        for &i in &self.minority {
            w.u32(i as u32);
        }
        w.u32(self.balanced.len() as u32);
        for (&i, &c) in self.balanced.iter().zip(&self.clusters) {
            w.u32(i as u32).u32(c as u32);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let m = r.u32()? as usize;
        let minority = (0..m).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let b = r.u32()? as usize;
        let mut balanced = Vec::with_capacity(b);
        let mut clusters = Vec::with_capacity(b);
        for _ in 0..b {
            balanced.push(r.u32()? as usize);
            clusters.push(r.u32()? as usize);
        }
        r.finish()?;
        Ok(Self {
            minority,
            balanced,
            clusters,
        })
    }

    pub fn save(&self, path: &std::path::Path, upstream_hash: u64) -> Result<()> {
        persist::save_artifact(ArtifactKind::Environments, &self.to_bytes(), upstream_hash, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&persist::load_artifact(ArtifactKind::Environments, path)?.1)
    }
}

/// One synthesized environment per probability, over disjoint subsets of
/// `raw` of (nearly) equal size. The subsets come from a seeded permutation
/// rather than striding: consecutive MNIST training images are not
/// exchangeable, and an index-parity split makes the environments separable
/// from the pixels alone. Environment `e` is synthesized with the key of child
/// stream `env{e}`; a single environment keeps `seed` itself.
pub fn build_handcrafted_envs(raw: &RawDataset, p_list: &[f64], noise_level: f64, seed: u64) -> Result<Vec<ColoredDataset>> {
    if p_list.is_empty() {
        return Err(Error::Config("need at least one environment probability".into()));
    }
    let m = p_list.len();
    let root = RngStream::new(seed, "handcrafted");
    let mut order: Vec<usize> = (0..raw.len()).collect();
    if m > 1 {
        root.child("split").shuffle(&mut order);
    }
    p_list
        .iter()
        .enumerate()
        .map(|(e, &p)| {
            let mut indices = order[e * raw.len() / m..(e + 1) * raw.len() / m].to_vec();
            indices.sort_unstable();
            let config = SynthesisConfig {
                noise_level,
                color_correlation: p,
                seed: if m == 1 { seed } else { root.child(&format!("env{e}")).key() },
                ..SynthesisConfig::default()
            };
            let mut ds = synthesize(&raw.select(&indices), &config)?;
            ds.source_index = indices.iter().map(|&i| i as u32).collect();
            Ok(ds)
        })
        .collect()
}
