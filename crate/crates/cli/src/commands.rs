use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use mrgr_core::eval::BaselineKind;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{self, Workspace};
use crate::stages::{self, DataSource};

#[derive(Debug, Parser)]
#[command(
    name = "mrgr",
    version,
    about = "Memory-retrieval generative recommender pipeline"
)]
pub struct Cli {
    /// Worker threads; 1 gives the serial reference execution. Defaults to
    /// the number of available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file (`key = value` or JSON). Defaults to the run
    /// directory's config.json, then to built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Run directory.
    #[arg(long, alias = "run", default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct SourceArgs {
    /// JSON-lines events file (falls back to `paths.data`).
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Generate the planted-anchor synthetic dataset.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration.
    Config {
        /// Print every setting with its value.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Ingest or generate events, filter, window and split them.
    PrepareData {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the backbone with prefix exposure.
    TrainBackbone(RunArgs),
    /// Encode every user's memory bank with the trained backbone.
    BuildMemory(RunArgs),
    /// Label each training sample's memory elements by probability delta.
    Annotate(RunArgs),
    /// Fit the retriever to the annotation labels.
    TrainRetriever(RunArgs),
    /// Score the test split under one prefix policy.
    Evaluate {
        #[arg(long)]
        variant: BaselineKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare two or more reports.
    Compare {
        /// Report files; defaults to every report in the run directory.
        reports: Vec<PathBuf>,
        /// Run directory (reports default) and output location.
        #[arg(long, alias = "run", default_value = "run")]
        out: PathBuf,
    },
    /// Check every manifest's hash chain.
    Verify {
        #[arg(long, alias = "run", default_value = "run")]
        out: PathBuf,
    },
    /// Every stage, every variant and the comparison.
    Run {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn load_config(explicit: Option<&Path>, ws: Option<&Workspace>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    if let Some(ws) = ws {
        let p = ws.config_path();
        if p.exists() {
            return RunConfig::load(&p);
        }
    }
    RunConfig::default().resolve()
}

fn source_of(s: &SourceArgs, cfg: &RunConfig) -> Result<DataSource> {
    match (&s.input, s.synthetic, &cfg.paths.data) {
        (Some(p), false, _) => Ok(DataSource::Input(p.clone())),
        (None, true, _) => Ok(DataSource::Synthetic),
        (None, false, Some(p)) => Ok(DataSource::Input(p.clone())),
        _ => Err(CliError::Usage(
            "pass exactly one of --input and --synthetic".into(),
        )),
    }
}

fn stage_setup(run: &RunArgs) -> Result<(RunConfig, Workspace)> {
    let ws = Workspace::new(&run.out);
    let cfg = load_config(run.config.as_deref(), Some(&ws))?;
    Ok((cfg, ws))
}

fn print_metrics(path: &Path) -> Result<()> {
    let r = stages::load_report(path)?;
    let cols: Vec<String> = r
        .metrics
        .iter()
        .map(|m| format!("recall@{} {:.4}  ndcg@{} {:.4}", m.k, m.recall, m.k, m.ndcg))
        .collect();
    println!(
        "{:<10} seed {:<4} n {:<6} {}",
        r.variant.name(),
        r.seed,
        r.n_samples,
        cols.join("  ")
    );
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { dump, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            if dump {
                print!("{}", cfg.dump());
            } else {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&cfg.to_json()).expect("serializes")
                );
            }
        }
        Command::PrepareData { source, run } => {
            let ws = Workspace::new(&run.out);
            let cfg = load_config(run.config.as_deref(), None)?;
            let m = stages::prepare_data(&cfg, &source_of(&source, &cfg)?, &ws)?;
            println!(
                "split written to {}: {} train / {} val / {} test samples",
                ws.root().display(),
                m.details["train"],
                m.details["val"],
                m.details["test"]
            );
        }
        Command::TrainBackbone(run) => {
            let (cfg, ws) = stage_setup(&run)?;
            let m = stages::train_backbone(&cfg, &ws)?;
            println!(
                "backbone: best epoch {} of {}, val recall@1 {}",
                m.details["best_epoch"], m.details["epochs_run"], m.details["best_val_recall1"]
            );
        }
        Command::BuildMemory(run) => {
            let (cfg, ws) = stage_setup(&run)?;
            let m = stages::build_memory(&cfg, &ws)?;
            println!("memory: {} elements encoded", m.details["encoded_elements"]);
        }
        Command::Annotate(run) => {
            let (cfg, ws) = stage_setup(&run)?;
            let m = stages::annotate(&cfg, &ws)?;
            println!(
                "annotated {} samples ({} cached), {} upper passes",
                m.details["records"],
                m.details["cache_hits"],
                m.annotation_passes.unwrap_or(0)
            );
        }
        Command::TrainRetriever(run) => {
            let (cfg, ws) = stage_setup(&run)?;
            let m = stages::train_retriever(&cfg, &ws)?;
            println!(
                "retriever: best epoch {} of {}",
                m.details["best_epoch"], m.details["epochs_run"]
            );
        }
        Command::Evaluate { variant, run } => {
            let (cfg, ws) = stage_setup(&run)?;
            stages::evaluate(&cfg, &ws, variant)?;
            print_metrics(&ws.path(crate::manifest::Artifact::Report(variant)))?;
        }
        Command::Compare { reports, out } => {
            let ws = Workspace::new(&out);
            let reports = if reports.is_empty() {
                stages::run_reports(&ws)
            } else {
                reports
            };
            let c = stages::compare_reports(&reports, &ws.compare_dir())?;
            for p in &reports {
                print_metrics(p)?;
            }
            println!(
                "comparison written to {}",
                c.json.parent().unwrap_or(Path::new(".")).display()
            );
        }
        Command::Verify { out } => {
            let (n, problems) = manifest::verify(&out)?;
            if problems.is_empty() {
                println!("{n} manifests verified, hash chain intact");
            } else {
                for p in &problems {
                    println!("{}: {}", p.stage, p.message);
                }
                return Err(CliError::Stale(format!(
                    "{} broken link(s) in the hash chain",
                    problems.len()
                )));
            }
        }
        Command::Run { source, run } => {
            let ws = Workspace::new(&run.out);
            let cfg = load_config(run.config.as_deref(), None)?;
            let out = stages::run_all(&cfg, &source_of(&source, &cfg)?, &ws)?;
            for p in stages::run_reports(&ws) {
                print_metrics(&p)?;
            }
            println!(
                "comparison written to {}",
                out.json.parent().unwrap_or(Path::new(".")).display()
            );
        }
    }
    Ok(())
}

/// Parses `args`, runs the command on a pool of the requested size and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return 2;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
