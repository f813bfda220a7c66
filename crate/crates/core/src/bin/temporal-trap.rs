use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use temporal_trap::allocator::write_samples;
use temporal_trap::pipeline::{self, ExperimentKind, Overrides};
use temporal_trap::{synth, Error, Result};

/// Batch runner for the gradient-conflict experiments and frame-budget allocators.
#[derive(Debug, Parser)]
#[command(name = "temporal-trap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; overrides `jobs`.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One-step conflict check at a point.
    VerifyProp1(Common),
    /// Budget threshold where expected alignment turns non-positive.
    VerifyProp2(Common),
    /// Per-budget descent bound and its minimiser.
    VerifyProp3(Common),
    /// Multi-step training under one budget policy.
    SimulateSft(Common),
    /// Fixed-budget sweep against the hybrid policy.
    FrameSweep(Common),
    /// Assign a frame budget to every sample of a manifest.
    Allocate(Common),
    /// Write canned inputs (model document, synthetic corpus).
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Debug, Subcommand)]
enum Synth {
    /// Default eight-dimensional conflict geometry (threshold at 32 frames).
    Model {
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// JSONL corpus whose rule-based allocation matches the reported counts.
    Corpus {
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Divide every count by this factor (rounding up) for a smaller corpus.
        #[arg(long, default_value_t = 1)]
        scale_down: usize,
    },
}

impl Command {
    fn experiment(&self) -> Option<(ExperimentKind, &Common)> {
        Some(match self {
            Command::VerifyProp1(c) => (ExperimentKind::VerifyProp1, c),
            Command::VerifyProp2(c) => (ExperimentKind::VerifyProp2, c),
            Command::VerifyProp3(c) => (ExperimentKind::VerifyProp3, c),
            Command::SimulateSft(c) => (ExperimentKind::SimulateSft, c),
            Command::FrameSweep(c) => (ExperimentKind::FrameSweep, c),
            Command::Allocate(c) => (ExperimentKind::Allocate, c),
            Command::Synth(_) => return None,
        })
    }
}

fn run_experiment(kind: ExperimentKind, common: &Common) -> Result<bool> {
    let overrides = Overrides {
        output_dir: common.out.clone(),
        seed: common.seed,
        jobs: common.jobs,
    };
    let cfg = pipeline::load_config_with(&common.config, &overrides)?;
    if cfg.experiment.kind() != kind {
        return Err(Error::validation(
            "kind",
            format!(
                "config is `{}`, subcommand is `{}`",
                cfg.experiment.kind().as_str(),
                kind.as_str()
            ),
        ));
    }
    info!("running {} into {}", kind.as_str(), cfg.output_dir.display());
    let record = pipeline::run(&cfg)?;
    for path in &record.outputs {
        println!("wrote {}", path.display());
    }
    if !record.sample_errors.is_empty() {
        eprintln!("{} sample(s) failed; see run_record.json", record.sample_errors.len());
    }
    match &record.error {
        None => {
            println!("{}: ok ({:.2}s)", kind.as_str(), record.wall_clock_secs);
            Ok(true)
        }
        Some(e) => {
            eprintln!("{}: FAILED: {e}", kind.as_str());
            Ok(false)
        }
    }
}

fn run_synth(cmd: &Synth) -> Result<()> {
    match cmd {
        Synth::Model { out } => {
            let (model, theta0) = synth::trap_geometry();
            let mut bytes = serde_json::to_vec_pretty(&model)?;
            bytes.push(b'\n');
            pipeline::write_atomic(out, &bytes)?;
            println!("wrote {} (theta0 = {:?})", out.display(), theta0.as_slice());
        }
        Synth::Corpus { out, scale_down } => {
            if *scale_down == 0 {
                return Err(Error::validation("scale_down", "must be at least 1"));
            }
            let counts: Vec<_> = synth::REPORTED_ALLOCATION
                .iter()
                .map(|&(m, n)| (m, n.div_ceil(*scale_down)))
                .collect();
            let samples = synth::corpus_with_counts(&counts)?;
            let mut w = BufWriter::new(File::create(out)?);
            write_samples(&mut w, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match (&cli.command, cli.command.experiment()) {
        (_, Some((kind, common))) => run_experiment(kind, common),
        (Command::Synth(s), None) => run_synth(s).map(|()| true),
        _ => unreachable!("every subcommand is an experiment or synth"),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
