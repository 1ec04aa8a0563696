use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use envinfer::cluster::{extract_embeddings, kmeans, purity, ClusterAssignment};
use envinfer::colored::{correlation_stats, synthesize, ColoredDataset, SynthesisConfig};
use envinfer::config::{hash_of, PipelineConfig};
use envinfer::envs::{build_environments, build_handcrafted_envs, minority_split, EnvironmentPair};
use envinfer::erm::{make_spurious_free_subset, train_erm, TrainedModel};
use envinfer::eval::{aggregate_runs, evaluate, sweep, test_environment};
use envinfer::irm::{train_irm, EnvBatchView, IrmConfig};
use envinfer::mnist::{load_mnist, RawDataset, Split};
use envinfer::nn::ModelParams;
use envinfer::persist::write_atomic;
use envinfer::pipeline::{derive_seed, run_pipeline};
use envinfer::report::{emit_report, parse_results_csv};

#[derive(Parser)]
#[command(name = "envinfer", version, about = "Environment inference for invariant learning on ColoredMNIST")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for single-stage commands, or the only seed of a pipeline run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seed list for the pipeline: `0,1,2` or a range `0..10`.
    #[arg(long, global = true, conflicts_with = "seed")]
    seeds: Option<String>,
    /// Output directory for pipeline and report.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    /// Seeds trained in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Recompute every stage even if a cached artifact matches.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    /// The whole dataset.
    All,
    /// D_m from `--envs`.
    Minority,
    /// D_balance from `--envs`.
    Balanced,
    /// D_m followed by D_balance.
    Concat,
    /// Equal-sized (y, z) groups.
    SpuriousFree,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a ColoredMNIST set and save it as a dataset artifact.
    Synth {
        #[arg(long, default_value_t = 0.15)]
        p_e: f64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        gray: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train an ERM model on a dataset artifact or a subset of it.
    TrainErm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        #[arg(long)]
        envs: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Cluster the penultimate embeddings of a model and report purity.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build D_m and D_balance from a cluster assignment.
    BuildEnvs {
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train IRMv1 on (D_m, D_balance) or on the hand-crafted environments.
    TrainIrm {
        #[arg(long, required_unless_present = "handcrafted")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "handcrafted")]
        envs: Option<PathBuf>,
        /// Use the configured hand-crafted color probabilities instead.
        #[arg(long)]
        handcrafted: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Accuracy of a model on one test environment.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        p_e: f64,
        #[arg(long)]
        gray: bool,
    },
    /// Accuracy of a model over the configured p_e grid.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gray: bool,
    },
    /// Full multi-seed run of every configured method.
    Pipeline,
    /// Rebuild aggregate.csv, table.md and plot.svg from results.csv.
    Report,
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed `{s}`")))
        .collect()
}

fn load_config(g: &Global) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &g.seeds {
        cfg.seeds = parse_seeds(s).map_err(|e| envinfer::Error::Config(e.to_string()))?;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if let Some(dir) = &g.mnist_dir {
        cfg.mnist_dir = dir.clone();
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn seed(cfg: &PipelineConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn raw(cfg: &PipelineConfig, split: Split) -> anyhow::Result<RawDataset> {
    if !cfg.mnist_dir.is_dir() {
        let msg = format!("MNIST directory {} does not exist", cfg.mnist_dir.display());
        return Err(envinfer::Error::Config(msg).into());
    }
    Ok(load_mnist(&cfg.mnist_dir, split)?)
}

fn save_model(model: &TrainedModel, output: &Path, key: u64, irm: bool) -> anyhow::Result<()> {
    model.params.save(output, key)?;
    let history = if irm { model.irm_history_csv() } else { model.erm_history_csv() };
    write_atomic(&output.with_extension("history.csv"), history.as_bytes())?;
    if let Some(last) = model.history.last() {
        println!("step {} risk {:.4} train accuracy {:.4}", last.step, last.risk, last.train_acc);
    }
    println!("wrote {}", output.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    let s = seed(&cfg);
    let d = &cfg.data;
    match cli.command {
        Command::Synth { p_e, split, gray, output } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let config = SynthesisConfig {
                noise_level: d.noise_level,
                color_correlation: p_e,
                seed: s,
                grayscale: gray,
                downsample: true,
            };
            let data = synthesize(&raw(&cfg, split)?, &config)?;
            data.save(&output, hash_of("synthesize", &config))?;
            let st = correlation_stats(&data)?;
            println!(
                "{} instances, class balance {:.4}, color flip {:.4}, label noise {:.4}",
                st.count, st.class_balance, st.empirical_color_flip, st.empirical_label_noise
            );
        }
        Command::TrainErm { data, subset, envs, output } => {
            let ds = ColoredDataset::load(&data)?;
            let pair = || -> anyhow::Result<EnvironmentPair> {
                let path = envs.as_ref().context("--envs is required for this subset")?;
                Ok(EnvironmentPair::load(path)?)
            };
            let ds = match subset {
                Subset::All => ds,
                Subset::Minority => ds.select(&pair()?.minority),
                Subset::Balanced => ds.select(&pair()?.balanced),
                Subset::Concat => {
                    let p = pair()?;
                    ColoredDataset::concat(&[&ds.select(&p.minority), &ds.select(&p.balanced)])?
                }
                Subset::SpuriousFree => ds.select(&make_spurious_free_subset(&ds, derive_seed(s, "spurious-free"))?),
            };
            let train = envinfer::erm::TrainConfig { seed: s, ..cfg.erm.clone() };
            let model = train_erm(&ds, &train)?;
            save_model(&model, &output, hash_of("train-erm", &train), false)?;
        }
        Command::Cluster { model, data, output } => {
            let params = ModelParams::load(&model)?;
            let ds = ColoredDataset::load(&data)?;
            let emb = extract_embeddings(&params, &ds)?;
            let km = cfg.cluster.kmeans(s);
            let c = kmeans(emb.values.view(), &km)?;
            c.save(&output, hash_of("kmeans", &km))?;
            write_atomic(&output.with_extension("csv"), c.to_csv(&ds).as_bytes())?;
            println!("cluster sizes {:?}, inertia {:.4}", c.cluster_sizes(), c.inertia);
            println!(
                "S-purity {:.4}, C-purity {:.4}",
                purity(&c, &ds.color_ids)?,
                purity(&c, &ds.labels)?
            );
        }
        Command::BuildEnvs { clusters, data, output } => {
            let c = ClusterAssignment::load(&clusters)?;
            let ds = ColoredDataset::load(&data)?;
            let pair = build_environments(&minority_split(&c, &ds.labels)?, s)?;
            pair.save(&output, hash_of("environments", &s))?;
            write_atomic(&output.with_extension("csv"), pair.to_csv(&ds).as_bytes())?;
            let (m, b) = pair.stats(&ds)?;
            for (name, e) in [("D_m", m), ("D_balance", b)] {
                println!(
                    "{name}: {} instances, class balance {:.4}, color flip {:.4}",
                    e.size, e.stats.class_balance, e.stats.empirical_color_flip
                );
            }
        }
        Command::TrainIrm { data, envs, handcrafted, output } => {
            let irm = IrmConfig {
                train: envinfer::erm::TrainConfig { seed: s, ..cfg.irm.train.clone() },
                ..cfg.irm.clone()
            };
            let model = if handcrafted {
                let sets = build_handcrafted_envs(&raw(&cfg, Split::Train)?, &d.handcrafted, d.noise_level, s)?;
                let views: Vec<EnvBatchView> = sets.iter().map(EnvBatchView::whole).collect();
                train_irm(&views, &irm)?
            } else {
                let (data, envs) = (data.context("--data is required")?, envs.context("--envs is required")?);
                let ds = ColoredDataset::load(&data)?;
                let pair = EnvironmentPair::load(&envs)?;
                let views = [
                    EnvBatchView::from_dataset(&ds, &pair.minority),
                    EnvBatchView::from_dataset(&ds, &pair.balanced),
                ];
                train_irm(&views, &irm)?
            };
            save_model(&model, &output, hash_of("train-irm", &irm), true)?;
        }
        Command::Eval { model, p_e, gray } => {
            let params = ModelParams::load(&model)?;
            let test = test_environment(&raw(&cfg, Split::Test)?, p_e, d.noise_level, s, gray)?;
            println!("{:.4}", evaluate(&params, &test)?);
        }
        Command::Sweep { model, gray } => {
            let params = ModelParams::load(&model)?;
            let accs = sweep(&params, &raw(&cfg, Split::Test)?, &d.grid, d.noise_level, s, gray)?;
            println!("p_e,accuracy");
            for (p, a) in d.grid.iter().zip(accs) {
                println!("{p:.2},{a:.4}");
            }
        }
        Command::Pipeline => {
            let run = run_pipeline(&cfg, g.force)?;
            println!(
                "{} stages computed, {} loaded from cache; results in {}",
                run.stages_run,
                run.cache_hits,
                cfg.out_dir.display()
            );
            let agg = aggregate_runs(&run.reports)?;
            print!("{}", envinfer::report::table_markdown(&agg, d.test_color_correlation));
        }
        Command::Report => {
            let path = cfg.out_dir.join("results.csv");
            let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let agg = aggregate_runs(&parse_results_csv(&text)?)?;
            for f in emit_report(&agg, &cfg.out_dir, d.test_color_correlation, cfg.plot)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<envinfer::Error>().map_or(3, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
