use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reprog_core::harness::{self, RunConfig, RunEvent, ReportFormat, ResultsStore, Suite};

/// Reprogramming distillation experiments on synthetic vision tasks.
#[derive(Parser)]
#[command(name = "reprog", version)]
struct Cli {
    /// Results root; overrides REPROG_RESULTS_DIR.
    #[arg(long, global = true)]
    results: Option<PathBuf>,
    /// Log every epoch to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in reference config: classification or segmentation.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path).with_context(|| format!("reading {}", path.display())),
            (None, Some(name)) => Ok(RunConfig::preset(name)?),
            (None, None) => bail!("either --config or --preset is required"),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run (cached by config hash).
    Train {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        /// components, depth, projector, boundary or pairing.
        #[arg(long)]
        suite: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Gradient diagnosis and similarity of a finished run.
    Diagnose {
        #[arg(long)]
        run: String,
    },
    /// Export finished runs.
    Report {
        /// Comma-separated run ids, or `all`.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<String>,
        /// csv, jsonl or plotdata.
        #[arg(long)]
        format: String,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print a reference config as TOML.
    Config {
        #[arg(long, default_value = "classification")]
        preset: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<()> {
    let store = cli.results.map_or_else(ResultsStore::from_env, ResultsStore::new);
    match cli.cmd {
        Cmd::Train { source, seed } => {
            let mut config = source.load()?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let id = config.run_id()?;
            let cached = store.is_complete(&id);
            let result = harness::run_with(&store, &config, &mut |e| {
                if let RunEvent::Epoch(row) = e {
                    log::info!("epoch {} loss {:.4} metric {:.1}", row.epoch, row.loss.l_train, row.metric);
                }
            })?;
            println!(
                "run {} {} seed {} {} {:.1}{}",
                result.run_id,
                result.method,
                result.seed,
                result.metric_name,
                result.final_metric,
                if cached { " (cached)" } else { "" }
            );
            println!("{}", store.run_dir(&result.run_id).display());
        }
        Cmd::Ablate { suite, seeds, source } => {
            let suite: Suite = suite.parse()?;
            let base = source.load()?;
            let table = harness::ablation_suite_with(&store, suite, &base, &seeds, &mut |arm, r| {
                log::info!("{arm} seed {} -> {:.1}", r.seed, r.final_metric);
            })?;
            print!("{}", table.render());
        }
        Cmd::Diagnose { run } => {
            let report = harness::diagnose(&store, &run)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Report { runs, format, out } => {
            let format: ReportFormat = format.parse()?;
            let ids = if runs.len() == 1 && runs[0] == "all" { store.completed_runs()? } else { runs };
            for path in harness::report(&store, &ids, format, &out)? {
                println!("{}", path.display());
            }
        }
        Cmd::Config { preset } => {
            print!("{}", RunConfig::preset(&preset)?.to_toml_string()?);
        }
    }
    Ok(())
}
