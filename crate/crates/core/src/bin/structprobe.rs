use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use structprobe::embstore::LoadedManifest;
use structprobe::metrics::FilterScope;
use structprobe::sweep::{self, SweepConfig, SweepReport};
use structprobe::synth::{self, SeriesConfig};
use structprobe::TrainConfig;

#[derive(Parser)]
#[command(
    name = "structprobe",
    version,
    about = "Structural probes across fine-tuning checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate probes for every checkpoint and seed.
    Sweep {
        #[command(subcommand)]
        command: SweepCommand,
    },
    /// Re-emit a saved sweep report.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// Synthetic checkpoint series with known tree geometry.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
}

#[derive(Subcommand)]
enum SweepCommand {
    Run(SweepArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only this task; defaults to every task in the manifest.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 128)]
    rank: usize,
    #[arg(long, default_value = "spearman-only")]
    filter_scope: FilterScope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Log and drop invalid treebank sentences instead of failing.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Subcommand)]
enum ReportCommand {
    Csv(ReportArgs),
    PlotData(ReportArgs),
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    sentences: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Run seeds; one embedding file per seed and checkpoint.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "synthetic")]
    task: String,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 7)]
    layer: u32,
    /// Condition number of the hidden linear transform.
    #[arg(long, default_value_t = 10.0)]
    condition: f64,
}

fn run_sweeps(args: SweepArgs) -> Result<()> {
    let tasks = match &args.task {
        Some(t) => vec![t.clone()],
        None => LoadedManifest::load(&args.manifest)?.manifest.tasks(),
    };
    for task in tasks {
        let mut config = SweepConfig::new(
            args.manifest.clone(),
            args.train.clone(),
            args.dev.clone(),
            args.test.clone(),
        );
        config.task = Some(task);
        config.skip_invalid = args.skip_invalid;
        config.metrics.filter_scope = args.filter_scope;
        config.probe = TrainConfig {
            rank: args.rank,
            learning_rate: args.learning_rate,
            max_epochs: args.max_epochs,
            patience: args.patience,
            seed: args.seed,
            ..TrainConfig::default()
        };
        let outcome = sweep::run_sweep_detailed(&config)?;
        sweep::write_outputs(&outcome, &args.out)?;
        println!(
            "{}: {} checkpoints written to {}",
            outcome.report.task,
            outcome.report.points.len(),
            args.out.display()
        );
    }
    Ok(())
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_report(path: &Path) -> Result<SweepReport> {
    Ok(SweepReport::from_json(&fs::read_to_string(path)?)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sweep {
            command: SweepCommand::Run(args),
        } => run_sweeps(args),
        Command::Report { command } => match command {
            ReportCommand::Csv(args) => {
                let report = load_report(&args.report)?;
                sweep::emit_csv(&report, sink(args.out.as_deref())?)?;
                Ok(())
            }
            ReportCommand::PlotData(args) => {
                let report = load_report(&args.report)?;
                let mut w = sink(args.out.as_deref())?;
                serde_json::to_writer_pretty(&mut w, &sweep::emit_plot_data(&report))?;
                writeln!(w)?;
                Ok(())
            }
        },
        Command::Synth {
            command: SynthCommand::Generate(args),
        } => {
            let config = SeriesConfig {
                task: args.task,
                sentences: args.sentences,
                alphas: args.alphas,
                run_seeds: args.seeds,
                dim: args.dim,
                seed: args.seed,
                min_len: args.min_len,
                max_len: args.max_len,
                layer: args.layer,
                condition: args.condition,
            };
            let manifest = synth::generate_series(&config, &args.out)?;
            println!(
                "wrote {} embedding files and manifest.json to {}",
                manifest.entries.len(),
                args.out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
