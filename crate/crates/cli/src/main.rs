use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use idxdiff_cli::commands::{self, Axis, VerifyArgs};
use idxdiff_cli::{exit_code, log::emit, EXIT_OK, EXIT_VALIDATION};
use idxdiff_core::diffusion::Sampler;
use serde_json::json;

#[derive(Parser)]
#[command(name = "idxdiff", version, about = "Index-conditioned diffusion image-set codec")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assign a seeded random index to every image in a directory.
    Prepare {
        image_dir: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a TOML config.
    Train { config: PathBuf },
    /// Quantize a checkpoint into an archive.
    Pack {
        checkpoint: PathBuf,
        archive: PathBuf,
        #[arg(long = "e", default_value_t = 8)]
        e_bits: u8,
        #[arg(long = "m", default_value_t = 23)]
        m_bits: u8,
    },
    /// Decode one index from an archive to a PNG.
    Decode {
        archive: PathBuf,
        #[arg(long)]
        index: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ddim")]
        sampler: Sampler,
        output: PathBuf,
    },
    /// Decode every index and compare against the dataset.
    Verify {
        archive: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ddim")]
        sampler: Sampler,
        /// Per-index results.
        #[arg(long)]
        out: Option<PathBuf>,
        /// External perceptual scorer, run as `<cmd> <decoded.png> <original>`.
        #[arg(long)]
        scorer: Option<String>,
        /// Where decoded PNGs are written for the scorer.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Description-length comparison table.
    Report {
        archives: Vec<PathBuf>,
        #[arg(long)]
        baselines: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        m_values: Vec<u64>,
        #[arg(long)]
        pixels_per_image: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one design axis with everything else held fixed.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write seeded synthetic PNGs.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Prepare { image_dir, manifest, seed } => commands::prepare(&image_dir, &manifest, seed),
        Cmd::Train { config } => commands::train(&config).map(|_| ()),
        Cmd::Pack { checkpoint, archive, e_bits, m_bits } => commands::pack(&checkpoint, &archive, e_bits, m_bits),
        Cmd::Decode { archive, index, seed, sampler, output } => commands::decode(&archive, index, seed, sampler, &output),
        Cmd::Verify { archive, manifest, seed, sampler, out, scorer, work_dir } => commands::verify(&VerifyArgs {
            archive: &archive,
            manifest: &manifest,
            seed,
            sampler,
            out_csv: out.as_deref(),
            scorer: scorer.as_deref(),
            work_dir: work_dir.as_deref(),
        })
        .map(|_| ()),
        Cmd::Report { archives, baselines, m_values, pixels_per_image, out } => {
            commands::report(&archives, &baselines, &m_values, pixels_per_image, &out)
        }
        Cmd::Ablate { config, axis, values, out_dir } => commands::ablate(&config, axis, &values, &out_dir).map(|_| ()),
        Cmd::Synth { out_dir, count, side, seed } => commands::synth(&out_dir, count, side, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            emit("idxdiff", "error", json!({ "exit_code": code, "message": format!("{e:#}") }));
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
