//! End-to-end runs: per seed, synthesize the training set, train the
//! reference model, cluster its embeddings, build environments, train every
//! selected method and sweep it over the test grid.
//!
//! Every stage writes one artifact under `out_dir/seed{s}/`. The artifact's
//! upstream hash is a key over the stage's configuration and the keys of the
//! stages it reads, so a rerun with an unchanged config loads instead of
//! recomputing. `force` ignores existing artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::cluster::{extract_embeddings, kmeans, purity, ClusterAssignment, EmbeddingMatrix};
use crate::colored::{synthesize, ColoredDataset, SynthesisConfig};
use crate::config::{hash_of, PipelineConfig};
use crate::envs::{build_environments, build_handcrafted_envs, minority_split, EnvStats, EnvironmentPair};
use crate::erm::{make_spurious_free_subset, train_erm, TrainConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, results_csv, sweep, Method, RunReport};
use crate::irm::{train_irm, EnvBatchView};
use crate::mnist::{load_mnist_cached, RawDataset, Split};
use crate::nn::ModelParams;
use crate::persist::{fnv1a64, load_artifact, save_artifact, write_atomic, ArtifactKind};
use crate::report::emit_report;
use crate::rng::RngStream;

/// Seed for one purpose of one run, derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    RngStream::new(seed, label).key()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurityRow {
    pub seed: u64,
    pub p_e: f64,
    pub s_purity: f64,
    pub c_purity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvRow {
    pub seed: u64,
    pub minority: EnvStats,
    pub balanced: EnvStats,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineRun {
    /// Ordered by method, then seed.
    pub reports: Vec<RunReport>,
    pub purity: Vec<PurityRow>,
    pub environments: Vec<EnvRow>,
    pub stages_run: usize,
    pub cache_hits: usize,
}

struct Cache {
    force: bool,
    runs: AtomicUsize,
    hits: AtomicUsize,
}

impl Cache {
    fn get_or_make<T>(
        &self,
        path: &Path,
        kind: ArtifactKind,
        key: u64,
        decode: impl Fn(&[u8]) -> Result<T>,
        encode: impl Fn(&T) -> Vec<u8>,
        make: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if !self.force {
            if let Ok((stored, payload)) = load_artifact(kind, path) {
                if stored == key {
                    if let Ok(value) = decode(&payload) {
                        self.hits.fetch_add(1, Ordering::Relaxed);
                        log::debug!("cache hit {}", path.display());
                        return Ok(value);
                    }
                }
            }
        }
        let value = make()?;
        save_artifact(kind, &encode(&value), key, path)?;
        self.runs.fetch_add(1, Ordering::Relaxed);
        Ok(value)
    }
}

struct Inputs {
    raw_train: RawDataset,
    raw_test: RawDataset,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let cache = cfg.out_dir.join("cache");
    std::fs::create_dir_all(&cache)?;
    let limit = |raw: RawDataset, n: usize| {
        if n == 0 || n >= raw.len() {
            raw
        } else {
            raw.select(&(0..n).collect::<Vec<_>>())
        }
    };
    let raw_train = load_mnist_cached(&cfg.mnist_dir, Split::Train, &cache.join("mnist-train.mnst"))?;
    let raw_test = load_mnist_cached(&cfg.mnist_dir, Split::Test, &cache.join("mnist-test.mnst"))?;
    Ok(Inputs {
        raw_train: limit(raw_train, cfg.data.train_limit),
        raw_test: limit(raw_test, cfg.data.test_limit),
    })
}

struct SeedOutcome {
    reports: Vec<RunReport>,
    purity: Vec<PurityRow>,
    environments: EnvRow,
}

struct Reference {
    train: ColoredDataset,
    model: ModelParams,
    clusters: ClusterAssignment,
    key: u64,
    cluster_key: u64,
}

fn erm_config(base: &TrainConfig, seed: u64, label: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, label),
        ..base.clone()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn synth_stage(
    cache: &Cache,
    dir: &Path,
    name: &str,
    raw: &RawDataset,
    config: &SynthesisConfig,
    raw_key: u64,
) -> Result<(ColoredDataset, u64)> {
    let key = hash_of("synthesize", &(config, raw_key));
    let data = cache.get_or_make(
        &dir.join(format!("{name}.cmds")),
        ArtifactKind::Dataset,
        key,
        ColoredDataset::from_cache_bytes,
        ColoredDataset::to_cache_bytes,
        || synthesize(raw, config),
    );
    Ok((data.map_err(|e| e.in_stage("synthesize"))?, key))
}

fn model_stage(
    cache: &Cache,
    dir: &Path,
    name: &str,
    key: u64,
    irm: bool,
    train: impl FnOnce() -> Result<TrainedModel>,
) -> Result<ModelParams> {
    let stage = if irm { "train-irm" } else { "train-erm" };
    cache
        .get_or_make(
            &dir.join(format!("{name}.ckpt")),
            ArtifactKind::Checkpoint,
            key,
            ModelParams::from_checkpoint_bytes,
            ModelParams::to_checkpoint_bytes,
            || {
                let model = train()?;
                let history = if irm { model.irm_history_csv() } else { model.erm_history_csv() };
                write_text(&dir.join(format!("{name}.history.csv")), &history)?;
                Ok(model.params)
            },
        )
        .map_err(|e| e.in_stage(&format!("{stage} {name}")))
}

/// Training set at `color_correlation`, its reference model and its clusters.
fn reference_stage(
    cfg: &PipelineConfig,
    cache: &Cache,
    dir: &Path,
    raw: &RawDataset,
    raw_key: u64,
    seed: u64,
    color_correlation: f64,
) -> Result<Reference> {
    std::fs::create_dir_all(dir)?;
    let synth = SynthesisConfig {
        noise_level: cfg.data.noise_level,
        color_correlation,
        seed,
        ..SynthesisConfig::default()
    };
    let (train, data_key) = synth_stage(cache, dir, "train", raw, &synth, raw_key)?;

    let erm = erm_config(&cfg.erm, seed, "reference");
    let key = hash_of("reference", &(&erm, data_key));
    let model = model_stage(cache, dir, "reference", key, false, || train_erm(&train, &erm))?;

    let emb_key = hash_of("embeddings", &key);
    let embeddings = cache
        .get_or_make(
            &dir.join("embeddings.embd"),
            ArtifactKind::Embeddings,
            emb_key,
            EmbeddingMatrix::from_bytes,
            EmbeddingMatrix::to_bytes,
            || extract_embeddings(&model, &train),
        )
        .map_err(|e| e.in_stage("embeddings"))?;

    let km = cfg.cluster.kmeans(derive_seed(seed, "kmeans"));
    let cluster_key = hash_of("kmeans+hartigan", &(km, emb_key));
    let clusters = cache
        .get_or_make(
            &dir.join("clusters.clst"),
            ArtifactKind::Clusters,
            cluster_key,
            ClusterAssignment::from_bytes,
            ClusterAssignment::to_bytes,
            || {
                let c = kmeans(embeddings.values.view(), &km)?;
                write_text(&dir.join("clusters.csv"), &c.to_csv(&train))?;
                Ok(c)
            },
        )
        .map_err(|e| e.in_stage("cluster"))?;
    Ok(Reference {
        train,
        model,
        clusters,
        key,
        cluster_key,
    })
}

fn purity_row(seed: u64, p_e: f64, r: &Reference) -> Result<PurityRow> {
    Ok(PurityRow {
        seed,
        p_e,
        s_purity: purity(&r.clusters, &r.train.color_ids)?,
        c_purity: purity(&r.clusters, &r.train.labels)?,
    })
}

fn run_seed(cfg: &PipelineConfig, cache: &Cache, inputs: &Inputs, raw_key: u64, seed: u64, probe: bool) -> Result<SeedOutcome> {
    let dir = cfg.out_dir.join(format!("seed{seed}"));
    let d = &cfg.data;
    log::info!("seed {seed}: reference model and clusters");
    let reference = reference_stage(cfg, cache, &dir, &inputs.raw_train, raw_key, seed, d.train_color_correlation)?;
    let mut purity = vec![purity_row(seed, d.train_color_correlation, &reference)?];
    if probe {
        for &p in &d.purity_probes {
            log::info!("seed {seed}: purity probe at p_e = {p}");
            let sub = dir.join(format!("probe-{p:.2}"));
            let r = reference_stage(cfg, cache, &sub, &inputs.raw_train, raw_key, seed, p)?;
            purity.push(purity_row(seed, p, &r)?);
        }
    }

    let env_key = hash_of("environments", &(derive_seed(seed, "envsample"), reference.cluster_key));
    let train = &reference.train;
    let pair = cache
        .get_or_make(
            &dir.join("environments.envs"),
            ArtifactKind::Environments,
            env_key,
            EnvironmentPair::from_bytes,
            EnvironmentPair::to_bytes,
            || {
                let split = minority_split(&reference.clusters, &train.labels)?;
                let pair = build_environments(&split, derive_seed(seed, "envsample"))?;
                write_text(&dir.join("environments.csv"), &pair.to_csv(train))?;
                Ok(pair)
            },
        )
        .map_err(|e| e.in_stage("build-envs"))?;
    let (minority, balanced) = pair.stats(train)?;

    let test_seed = derive_seed(seed, "test");
    let mut reports = Vec::new();
    for &method in &cfg.methods {
        log::info!("seed {seed}: {method}");
        let start = Instant::now();
        let name = method.tag();
        let erm = erm_config(&cfg.erm, seed, name);
        let model = match method {
            Method::ErmBaseline => reference.model.clone(),
            Method::Oracle => {
                let gray = SynthesisConfig {
                    grayscale: true,
                    ..train.config
                };
                let (data, key) = synth_stage(cache, &dir, "train-gray", &inputs.raw_train, &gray, raw_key)?;
                let key = hash_of(name, &(&erm, key));
                model_stage(cache, &dir, name, key, false, || train_erm(&data, &erm))?
            }
            Method::ErmBalance | Method::ErmConcat => {
                let key = hash_of(name, &(&erm, env_key));
                model_stage(cache, &dir, name, key, false, || {
                    let data = if method == Method::ErmBalance {
                        train.select(&pair.balanced)
                    } else {
                        ColoredDataset::concat(&[&train.select(&pair.minority), &train.select(&pair.balanced)])?
                    };
                    train_erm(&data, &erm)
                })?
            }
            Method::ErmSpuriousFree => {
                let subset_seed = derive_seed(seed, "spurious-free");
                let key = hash_of(name, &(&erm, subset_seed, reference.key));
                model_stage(cache, &dir, name, key, false, || {
                    train_erm(&train.select(&make_spurious_free_subset(train, subset_seed)?), &erm)
                })?
            }
            Method::IrmInferred => {
                let irm = crate::irm::IrmConfig {
                    train: erm,
                    ..cfg.irm.clone()
                };
                let key = hash_of(name, &(&irm, env_key));
                model_stage(cache, &dir, name, key, true, || {
                    let envs = [
                        EnvBatchView::from_dataset(train, &pair.minority),
                        EnvBatchView::from_dataset(train, &pair.balanced),
                    ];
                    train_irm(&envs, &irm)
                })?
            }
            Method::IrmHandcrafted => {
                let irm = crate::irm::IrmConfig {
                    train: erm,
                    ..cfg.irm.clone()
                };
                let env_seed = derive_seed(seed, "handcrafted");
                let key = hash_of(name, &(&irm, &d.handcrafted, d.noise_level, env_seed, raw_key));
                model_stage(cache, &dir, name, key, true, || {
                    let sets = build_handcrafted_envs(&inputs.raw_train, &d.handcrafted, d.noise_level, env_seed)?;
                    let envs: Vec<EnvBatchView> = sets.iter().map(EnvBatchView::whole).collect();
                    train_irm(&envs, &irm)
                })?
            }
        };
        let accuracies = sweep(&model, &inputs.raw_test, &d.grid, d.noise_level, test_seed, method.is_gray())
            .map_err(|e| e.in_stage(&format!("sweep {name}")))?;
        reports.push(RunReport {
            method,
            seed,
            grid: d.grid.clone(),
            accuracies,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(SeedOutcome {
        reports,
        purity,
        environments: EnvRow {
            seed,
            minority,
            balanced,
        },
    })
}

/// Run every seed (up to `cfg.jobs` in parallel) and write the result files.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<PipelineRun> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let inputs = load_inputs(cfg).map_err(|e| e.in_stage("load-mnist"))?;
    let raw_key = fnv1a64(&inputs.raw_train.to_cache_bytes());
    let cache = Cache {
        force,
        runs: AtomicUsize::new(0),
        hits: AtomicUsize::new(0),
    };
    let first = cfg.seeds[0];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(cfg, &cache, &inputs, raw_key, s, s == first))
            .collect::<Result<_>>()
    })?;

    let mut run = PipelineRun {
        stages_run: cache.runs.load(Ordering::Relaxed),
        cache_hits: cache.hits.load(Ordering::Relaxed),
        ..Default::default()
    };
    for o in outcomes {
        run.reports.extend(o.reports);
        run.purity.extend(o.purity);
        run.environments.push(o.environments);
    }
    run.reports.sort_by_key(|r| (r.method, r.seed));
    write_outputs(cfg, &run)?;
    Ok(run)
}

pub fn purity_csv(rows: &[PurityRow]) -> String {
    let mut out = String::from("seed,p_e,s_purity,c_purity\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.2},{:.4},{:.4}", r.seed, r.p_e, r.s_purity, r.c_purity);
    }
    out
}

pub fn environments_csv(rows: &[EnvRow]) -> String {
    let mut out = String::from("seed,environment,size,class_balance,color_flip,label_noise\n");
    for r in rows {
        for (name, e) in [("Dm", &r.minority), ("Dbalance", &r.balanced)] {
            let _ = writeln!(
                out,
                "{},{name},{},{:.4},{:.4},{:.4}",
                r.seed, e.size, e.stats.class_balance, e.stats.empirical_color_flip, e.stats.empirical_label_noise
            );
        }
    }
    out
}

fn write_outputs(cfg: &PipelineConfig, run: &PipelineRun) -> Result<Vec<PathBuf>> {
    let out = &cfg.out_dir;
    let mut files = vec![
        (out.join("results.csv"), results_csv(&run.reports)),
        (out.join("purity.csv"), purity_csv(&run.purity)),
        (out.join("environments.csv"), environments_csv(&run.environments)),
        (out.join("config.toml"), cfg.to_toml_string()),
    ];
    for (path, text) in &files {
        write_text(path, text)?;
    }
    let mut written: Vec<PathBuf> = files.drain(..).map(|f| f.0).collect();
    let agg = aggregate_runs(&run.reports)?;
    written.extend(emit_report(&agg, out, cfg.data.test_color_correlation, cfg.plot)?);
    Ok(written)
}
