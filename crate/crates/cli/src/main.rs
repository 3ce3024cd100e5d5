use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gramclust::nets::{load_checkpoint, save_checkpoint};
use gramclust::pipeline::{
    self, load_data, load_pseudo_labels, run_discovery, test_metrics, write_dataset, write_manifest,
    write_report, DatasetSource, GroupSource, Method, PipelineConfig,
};
use gramclust::synthdata::Splits;
use gramclust::{evalmatch, Error, Result, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "gramclust", version, about = "Pseudo-environment discovery and group-robust training")]
struct Cli {
    /// Pipeline configuration (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for the identification model, projection, k-means and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts and reports.
    #[arg(long, global = true, default_value = "gramclust-run")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out>/datasets.
    Synth,
    /// Train the identification model, cluster style features, write pseudo labels.
    Discover,
    /// Train one robust model.
    Train {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
    },
    /// Score a checkpoint on the test splits with true groups.
    Eval {
        /// Checkpoint directory (defaults to <out>/checkpoints/robust).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cluster-count sweep.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        ks: Vec<usize>,
    },
    /// Layer-choice sweep; each set is a comma-separated list, e.g. `1 2 3 1,2,3`.
    SweepLayers {
        #[arg(default_values = ["1", "2", "3", "1,2,3"])]
        sets: Vec<String>,
    },
    /// Grid search over learning rate and weight decay.
    Grid,
    /// All stages.
    Pipeline,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Erm,
    GroupDro,
    ImportanceWeighting,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Erm => Method::Erm,
            MethodArg::GroupDro => Method::GroupDro,
            MethodArg::ImportanceWeighting => Method::ImportanceWeighting,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(quiet: bool, value: &T) {
    if !quiet {
        println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
    }
}

/// Splits with pseudo labels from an earlier discovery in `out`, or from a
/// fresh discovery run.
fn pseudo_labeled(cfg: &PipelineConfig, out: &Path, splits: &Splits) -> Result<Splits> {
    if !cfg.needs_discovery() {
        return Ok(splits.clone());
    }
    if out.join("reports").join("discovery.json").exists() {
        log::info!("reusing pseudo labels in {}", out.display());
        return load_pseudo_labels(out, splits);
    }
    Ok(run_discovery(cfg, splits, Some(out))?.splits)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    let quiet = cli.quiet;
    let name = match &cli.command {
        Command::Synth => "synth",
        Command::Discover => "discover",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::SweepK { .. } => "sweep-k",
        Command::SweepLayers { .. } => "sweep-layers",
        Command::Grid => "grid",
        Command::Pipeline => "pipeline",
    };
    if let Command::Train { method: Some(m), .. } = &cli.command {
        cfg.robust.method = (*m).into();
    }
    write_manifest(out, name, &cfg)?;
    match cli.command {
        Command::Synth => {
            if matches!(cfg.dataset, DatasetSource::Dir(_)) {
                return Err(Error::Config("synth needs a synthetic dataset config".into()));
            }
            let splits = load_data(&cfg)?;
            write_dataset(out, &cfg, &splits)?;
            if !quiet {
                for s in [&splits.train, &splits.val, &splits.test_ind, &splits.test_shift] {
                    println!("{}: {} samples", s.split.name(), s.len());
                }
            }
        }
        Command::Discover => {
            let splits = load_data(&cfg)?;
            let d = run_discovery(&cfg, &splits, Some(out))?;
            print_json(quiet, &d.report);
        }
        Command::Train { lr, l2, .. } => {
            let splits = load_data(&cfg)?;
            let splits = if cfg.robust.method != Method::Erm && cfg.robust.train_groups == GroupSource::Pseudo {
                pseudo_labeled(&cfg, out, &splits)?
            } else {
                splits
            };
            let sgd = cfg.robust_sgd(l2.unwrap_or(cfg.robust.sgd.l2), lr.unwrap_or(cfg.robust.sgd.lr));
            let (net, mut report) = pipeline::run_robust(&cfg, &splits, sgd)?;
            if !report.diverged {
                let dir = out.join("checkpoints").join("robust");
                save_checkpoint(&dir, &net, sgd.seed, report.train.epochs.len())?;
                report.train.checkpoint = Some("checkpoints/robust".into());
            }
            write_report(out, "train", &report)?;
            let csv = out.join("reports").join("train_epochs.csv");
            std::fs::write(&csv, report.train.to_csv()).map_err(|e| Error::Io {
                path: csv.clone(),
                source: e,
            })?;
            print_json(quiet, &report.test);
        }
        Command::Eval { checkpoint } => {
            let dir = checkpoint.unwrap_or_else(|| out.join("checkpoints").join("robust"));
            let (net, _) = load_checkpoint(&dir)?;
            let splits = load_data(&cfg)?;
            let metrics = test_metrics(&net, &splits)?;
            let report = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "checkpoint": dir,
                "test": metrics,
            });
            write_report(out, "eval", &report)?;
            print_json(quiet, &report);
        }
        Command::SweepK { ks } => {
            let rows = evalmatch::sweep_clusters(&cfg, &ks, Some(out))?;
            print_json(quiet, &rows);
        }
        Command::SweepLayers { sets } => {
            let sets = sets
                .iter()
                .map(|s| {
                    s.split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Config(format!("layer set {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = evalmatch::sweep_layers(&cfg, &sets, Some(out))?;
            print_json(quiet, &rows);
        }
        Command::Grid => {
            let splits = load_data(&cfg)?;
            let splits = pseudo_labeled(&cfg, out, &splits)?;
            let (_, report) = pipeline::grid_search(&cfg, &splits, Some(out))?;
            print_json(quiet, report.best_cell());
        }
        Command::Pipeline => {
            let report = pipeline::run_pipeline(&cfg, Some(out))?;
            print_json(quiet, &report.selected.test);
        }
    }
    Ok(())
}
