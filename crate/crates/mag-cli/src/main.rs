//! `mag` — one entry point for the whole pipeline: synthetic data, the three
//! training phases, streaming inference, the historical-consistency bench,
//! and reporting. Exit codes: 0 ok, 2 configuration error, 3 missing or
//! corrupt prerequisite, 4 numeric/training failure.

mod phases;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mag_core::error::MagError;

use phases::RunContext;

#[derive(Parser)]
#[command(name = "mag", about = "Memorize-and-generate streaming video pipeline", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "mag.toml")]
    config: PathBuf,
    /// Global seed; per-phase seeds derive from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, metrics and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to disk.
    Synth,
    /// Train the bidirectional teacher with flow matching.
    TrainTeacher {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 1: train the cache-compressing memory model.
    TrainMemory {
        /// Frames per block (the compression rate).
        #[arg(long)]
        b: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2: rolling score-difference training of the generator.
    TrainGenerator {
        /// Clips per long video.
        #[arg(long)]
        k: Option<usize>,
        /// Empty-condition probability for clips beyond the first.
        #[arg(long)]
        lambda: Option<f64>,
        /// Student updates per generator update.
        #[arg(long)]
        ratio: Option<usize>,
        /// Rollout/update cycles.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stream `blocks` blocks with the trained models.
    Stream {
        /// mag | full | window:W
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        blocks: Option<usize>,
        /// Stream-specific seed (defaults to the derived phase seed).
        #[arg(long)]
        stream_seed: Option<u64>,
        /// Also write an animated GIF.
        #[arg(long)]
        gif: bool,
    },
    /// Historical-consistency benchmark.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Reconstruction-fidelity evaluation of the memory model.
    Eval,
    /// Render tables and SVG charts from a run directory.
    Report,
    /// Run the configured phases in order.
    Pipeline,
}

#[derive(Subcommand)]
enum BenchAction {
    /// Write the bench cases (clips + manifest).
    Build,
    /// Evaluate the trained models on the bench.
    Run,
    /// Rank stored report files.
    Compare {
        /// bench-report.json files.
        reports: Vec<PathBuf>,
        /// Optional CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> mag_core::Result<()> {
    match cli.command {
        Command::Report => return report::render_report(&cli.out),
        Command::Bench {
            action: BenchAction::Compare { ref reports, ref csv },
        } => {
            if reports.is_empty() {
                return Err(MagError::Config("bench compare needs at least one report file".into()));
            }
            return phases::bench_compare(reports, csv.as_deref());
        }
        _ => {}
    }
    let mut ctx = RunContext::new(&cli.config, cli.seed, &cli.out)?;
    match cli.command {
        Command::Synth => ctx.phase_synth(),
        Command::TrainTeacher { steps } => {
            if let Some(s) = steps {
                ctx.cfg.train_teacher.steps = s;
            }
            ctx.phase_teacher()
        }
        Command::TrainMemory { b, steps } => ctx.phase_memory(b, steps),
        Command::TrainGenerator { k, lambda, ratio, steps } => ctx.phase_generator(k, lambda, ratio, steps),
        Command::Stream {
            mode,
            blocks,
            stream_seed,
            gif,
        } => ctx.phase_stream(mode.as_deref(), blocks, stream_seed, gif),
        Command::Bench { action } => match action {
            BenchAction::Build => ctx.phase_bench_build(),
            BenchAction::Run => ctx.phase_bench_run(),
            BenchAction::Compare { .. } => unreachable!("handled above"),
        },
        Command::Eval => ctx.phase_eval(),
        Command::Report | Command::Pipeline => match cli.command {
            Command::Pipeline => ctx.run_pipeline(),
            _ => unreachable!(),
        },
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
