use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tctx::archive::{load_archive, save_archive};
use tctx::bbox::BBox;
use tctx::bench::bench;
use tctx::config::ModelConfig;
use tctx::eval::evaluate;
use tctx::model::ModelParams;
use tctx::pipeline::Tracker;
use tctx::run::{run_directory, write_boxes, write_trace};
use tctx::selftest::{format_table, selftest};
use tctx::synth::{read_boxes, synth_sequence, Script};

#[derive(Parser)]
#[command(version, about = "Streaming single-object tracker with temporal context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence directory.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        frames: usize,
        /// Frame size as WxH.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        /// Event script; omitted means a static target.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a sequence from an initial box.
    Run {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        /// Initial box as "x,y,w,h" (top-left convention).
        #[arg(long)]
        init: BBox,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Ablation switch such as filter=off, query=current, init=random.
        #[arg(long = "toggle")]
        toggles: Vec<String>,
        /// Record per-frame latency in the trace (breaks byte-identical replay).
        #[arg(long)]
        trace_timing: bool,
    },
    /// Measure per-frame latency on a synthetic sequence.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Write a seeded random model archive for a configuration.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's weight_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a boxes file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Optional CSV with the full curves.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    Ok((n(w)?, n(h)?))
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> tctx::Result<ExitCode> {
    match command {
        Command::Synth {
            seed,
            frames,
            size,
            script,
            out,
        } => {
            let script = match script {
                Some(p) => Script::load(&p)?,
                None => Script::default(),
            };
            let seq = synth_sequence(seed, frames, size, &script, &out)?;
            println!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::Run {
            weights,
            config,
            seq,
            init,
            out,
            trace,
            toggles,
            trace_timing,
        } => {
            let mut config = ModelConfig::load(&config)?;
            for t in &toggles {
                config.apply_toggle(t)?;
            }
            let params = load_archive(&weights, &config)?;
            let tracker = Tracker::new(params, config)?;
            let result = run_directory(&tracker, &seq, init, trace_timing)?;
            write_boxes(&out, &result.boxes)?;
            if let Some(path) = trace {
                write_trace(&path, &result.records)?;
            }
            println!("tracked {} frames -> {}", result.boxes.len(), out.display());
        }
        Command::Bench { config, frames, out } => {
            let config = ModelConfig::load(&config)?;
            let report = bench(&config, frames)?;
            std::fs::write(&out, report.to_csv())?;
            println!(
                "median {:.3} ms, p95 {:.3} ms, {:.1} FPS, peak state {} bytes",
                report.median_ms, report.p95_ms, report.fps, report.peak_state_bytes
            );
        }
        Command::Selftest => {
            let results = selftest();
            print!("{}", format_table(&results));
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::InitWeights { config, seed, out } => {
            let config = ModelConfig::load(&config)?;
            let params = ModelParams::random(&config, seed.unwrap_or(config.weight_seed))?;
            save_archive(&params, &out)?;
            println!("wrote {} parameters to {}", params.parameter_count(), out.display());
        }
        Command::Eval { pred, gt, out } => {
            let curves = evaluate(&read_boxes(&pred)?, &read_boxes(&gt)?)?;
            println!("auc {:.4}  prec@20 {:.4}", curves.auc, curves.prec_at_20);
            if let Some(path) = out {
                std::fs::write(path, curves.to_csv())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
