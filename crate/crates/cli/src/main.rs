use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use splat4d::training::Ablation;
use splat4d_cli::commands::{cmd_check_grads, cmd_eval, cmd_export, cmd_fit, cmd_generate, ExportTarget, FitArgs, CHECKPOINT_FILE, LOSS_FILE};
use splat4d_cli::exit_code;

#[derive(Parser)]
#[command(name = "splat4d", version, about = "Fit dynamic Gaussian scenes with shared SE(3) motion bases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    NoTracks,
    NoInit,
    TranslBases,
    PerGaussian,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::NoTracks => Ablation::NoTracks,
            AblateArg::NoInit => Ablation::NoInit,
            AblateArg::TranslBases => Ablation::TranslBases,
            AblateArg::PerGaussian => Ablation::PerGaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportArg {
    Ply,
    TracksCsv,
    Renders,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence bundle and its ground truth.
    Generate {
        /// Scene spec (JSON or TOML); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Bundle directory; ground truth goes to `<out>/gt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize and train a scene on a bundle.
    Fit {
        bundle: PathBuf,
        /// Fit config (JSON or TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        /// Output directory for the checkpoint and loss CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Save a checkpoint every N steps as well as at the end.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        checkpoint: PathBuf,
        bundle: PathBuf,
        /// Ground-truth directory or its truth.json.
        gt: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write PLY, tracks CSV or rendered PNGs from a checkpoint.
    Export {
        checkpoint: PathBuf,
        #[arg(value_enum)]
        what: ExportArg,
        /// Bundle supplying cameras and tracks.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Comma-separated frame indices; all frames when omitted.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run central-difference checks of every loss term.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of SE(3)-basis fixtures.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            cmd_generate(config.as_deref(), seed, &out)?;
            println!("wrote bundle to {}", out.display());
        }
        Command::Fit { bundle, config, seed, ablate, out, epochs, checkpoint_every, resume } => {
            let args = FitArgs { bundle, out: out.clone(), config, seed, ablate: ablate.map(Into::into), epochs, checkpoint_every, resume };
            let ck = cmd_fit(&args)?;
            let last = ck.history.last().map_or(f64::NAN, |r| r.total);
            println!("{} steps, final loss {last:e}; wrote {} and {}", ck.state.step, out.join(CHECKPOINT_FILE).display(), out.join(LOSS_FILE).display());
        }
        Command::Eval { checkpoint, bundle, gt, out } => {
            let report = cmd_eval(&checkpoint, &bundle, &gt)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Export { checkpoint, what, bundle, frames, out } => {
            let target = match what {
                ExportArg::Ply => ExportTarget::Ply,
                ExportArg::TracksCsv => ExportTarget::TracksCsv,
                ExportArg::Renders => ExportTarget::Renders,
            };
            for p in cmd_export(&checkpoint, target, bundle.as_deref(), frames.as_deref(), &out)? {
                println!("{}", p.display());
            }
        }
        Command::CheckGrads { seed, seeds, out } => {
            let reports = cmd_check_grads(seed, seeds)?;
            let mut ok = true;
            for r in &reports {
                let worst = r.terms.iter().map(|t| t.max_error).fold(0.0, f64::max);
                println!("{} seed {:>3} {:?}: max relative error {worst:.2e}", if r.passed() { "pass" } else { "FAIL" }, r.seed, r.mode);
                ok &= r.passed();
            }
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&reports)?)?;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
