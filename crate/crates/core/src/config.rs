//! Pipeline configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Example:
//!
//! ```toml
//! mnist_dir = "data/mnist"
//! out_dir = "runs/default"
//! seeds = [0, 1, 2]
//! methods = ["ERM-baseline", "IRM-DmDbalance"]
//!
//! [data]
//! noise_level = 0.25
//! train_color_correlation = 0.15
//!
//! [erm]
//! steps = 501
//! batch_size = 1024
//!
//! [irm]
//! penalty_weight = 1000.0
//! warmup_steps = 200
//!
//! [cluster]
//! k = 8
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::KMeansConfig;
use crate::erm::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{default_grid, Method};
use crate::irm::IrmConfig;
use crate::persist::fnv1a64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub noise_level: f64,
    pub train_color_correlation: f64,
    /// Color-flip probability of the standard test environment.
    pub test_color_correlation: f64,
    /// Test environments for the sweep.
    pub grid: Vec<f64>,
    /// Color-flip probabilities of the hand-crafted IRM environments.
    pub handcrafted: Vec<f64>,
    /// Use only the first N training / test digits (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
    /// Extra training color levels whose cluster purity is probed (first seed only).
    pub purity_probes: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            noise_level: 0.25,
            train_color_correlation: 0.15,
            test_color_correlation: 0.9,
            grid: default_grid(),
            handcrafted: vec![0.9, 0.1],
            train_limit: 0,
            test_limit: 0,
            purity_probes: vec![0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let d = KMeansConfig::default();
        Self {
            k: d.k,
            restarts: d.restarts,
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

impl ClusterSection {
    pub fn kmeans(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            seed,
            restarts: self.restarts,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mnist_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub plot: bool,
    pub jobs: usize,
    pub data: DataConfig,
    pub erm: TrainConfig,
    pub irm: IrmConfig,
    pub cluster: ClusterSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
            seeds: (0..10).collect(),
            methods: Method::ALL.to_vec(),
            plot: true,
            jobs: 1,
            data: DataConfig::default(),
            erm: TrainConfig::default(),
            irm: IrmConfig::default(),
            cluster: ClusterSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        let d = &self.data;
        for p in [d.noise_level, d.train_color_correlation, d.test_color_correlation]
            .iter()
            .chain(&d.grid)
            .chain(&d.handcrafted)
            .chain(&d.purity_probes)
        {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!("{p} is not a probability")));
            }
        }
        if d.grid.is_empty() {
            return Err(Error::Config("p_e grid is empty".into()));
        }
        if self.methods.contains(&Method::IrmHandcrafted) && d.handcrafted.len() < 2 {
            return Err(Error::Config("hand-crafted IRM needs at least two environments".into()));
        }
        if self.cluster.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.erm.validate()?;
        self.irm.validate()?;
        if !self.mnist_dir.is_dir() {
            return Err(Error::Config(format!(
                "MNIST directory {} does not exist",
                self.mnist_dir.display()
            )));
        }
        Ok(())
    }
}

/// Stable hash of a stage label and its inputs. `Debug` output of plain
/// config structs and integers is stable for a given build, which is all the
/// cache needs.
pub fn hash_of<T: std::fmt::Debug>(label: &str, value: &T) -> u64 {
    fnv1a64(format!("{label}\n{value:?}").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "seeds = [3]\nmethods = [\"Oracle\"]\n[irm]\npenalty_weight = 500.0\nsteps = 20\n[cluster]\nk = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.methods, vec![Method::Oracle]);
        assert_eq!(cfg.irm.penalty_weight, 500.0);
        assert_eq!(cfg.irm.train.steps, 20);
        assert_eq!(cfg.cluster.k, 4);
        assert_eq!(cfg.erm, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml_str("sedes = [1]").is_err());
        let mut cfg = PipelineConfig {
            mnist_dir: std::env::temp_dir(),
            ..Default::default()
        };
        cfg.validate().unwrap();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_hash_depends_on_content() {
        let a = hash_of("erm", &TrainConfig::default());
        let mut changed = TrainConfig::default();
        changed.steps += 1;
        assert_ne!(a, hash_of("erm", &changed));
        assert_ne!(a, hash_of("irm", &TrainConfig::default()));
        assert_eq!(a, hash_of("erm", &TrainConfig::default()));
    }
}
