//! `flowkit` command-line interface.
//!
//! Results go to stdout as `name=value` lines; diagnostics go to stderr.
//! Exit codes: 0 success, 1 usage or argument error, 2 I/O or format
//! error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "flowkit", version, about = "Optical flow, propagation, sampling and URL tools")]
struct Cli {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lambda2=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-pixel work.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inverse-warp an image with a flow field.
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warp an image and its label map with the same flow.
    Propagate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Evaluate the unsupervised objective of a flow field.
    Loss {
        #[arg(long)]
        i1: PathBuf,
        #[arg(long)]
        i2: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        /// Include the SSIM term.
        #[arg(long)]
        ssim: bool,
        #[arg(long, default_value_t = 1)]
        smooth_order: u8,
    },
    /// Forward-backward occlusion masks.
    Occlusion {
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        backward: PathBuf,
        #[arg(long)]
        out_forward: Option<PathBuf>,
        #[arg(long)]
        out_backward: Option<PathBuf>,
    },
    /// Estimate flow between two images.
    Solve(SolveArgs),
    /// Mean endpoint error.
    Epe(MetricArgs),
    /// Fraction of flow outliers.
    Fl(MetricArgs),
    /// Mean intersection over union of two label maps.
    Miou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
    },
    /// Boundary-relaxed and standard cross-entropy of a logits file.
    RelaxLoss {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Render a flow field with the Middlebury color wheel.
    Flow2ppm {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_mag: Option<f64>,
    },
    /// Quantize flow components to 8-bit PGMs.
    Flownorm {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out_u: PathBuf,
        #[arg(long)]
        out_v: PathBuf,
    },
    /// Random temporal skipping indices.
    SampleRts {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        max_stride: usize,
    },
    /// Class-uniform crop positions.
    ClassCrops {
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        crop: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spatio-temporal depth normalization of a frame directory.
    Stdn {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Modified depth motion map of a frame directory.
    Mdmm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        start: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the joint factorization of two CSV matrices.
    UrlFit {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Orthogonal projections of both modalities onto a fitted model.
    UrlProject {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Nearest-prototype zero-shot prediction.
    UrlPredict {
        #[arg(long)]
        model: PathBuf,
        /// Test samples, one per column (`M1 x T`).
        #[arg(long)]
        test: PathBuf,
        /// Class semantic embeddings, one per column (`M2 x K`).
        #[arg(long)]
        semantic: PathBuf,
        /// Optional CSV of true class indices, one row.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// First frame (PGM or PPM).
    #[arg(long)]
    pub i1: PathBuf,
    /// Second frame, same size as the first.
    #[arg(long)]
    pub i2: PathBuf,
    /// Forward flow output (.flo).
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV `iter,total,pixel,smooth,ssim`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Ground-truth flow for an `epe` line.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Backward flow output; implies a bidirectional solve.
    #[arg(long)]
    pub out_backward: Option<PathBuf>,
    /// Forward occlusion mask PGM; implies a bidirectional solve.
    #[arg(long)]
    pub out_occlusion: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricArgs {
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Validity mask PGM (255 marks valid pixels).
    #[arg(long)]
    pub valid: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Core(flowkit::Error::Io { path: path.clone(), source: e }))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    for item in &cli.overrides {
        cfg.apply_override(item).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<(String, String)>, CliError> {
    let cfg = load_config(&cli)?;
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    commands::execute(cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(lines) => {
            for (k, v) in lines {
                println!("{k}={v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
