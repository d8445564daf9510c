//! `iretinex`: train, run and inspect the low-light enhancement model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "iretinex", version, about = "Retinex-style low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint
    Train {
        /// TOML run configuration; defaults apply to missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// checkpoint to write
        #[arg(long, required_unless_present = "print_defaults")]
        out: Option<PathBuf>,
        /// loss trace CSV (overrides the config)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// print the default configuration as TOML and exit
        #[arg(long, conflicts_with_all = ["config", "out", "trace"])]
        print_defaults: bool,
    },
    /// Enhance one image or every image in a directory
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// output directory; file names are preserved
        #[arg(long)]
        out: PathBuf,
    },
    /// Write illumination and reflectance images and report their feature similarity
    Decompose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two images: PSNR, SSIM, histograms, error map
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// directory for histogram / error-map CSV and heatmap PNG
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form attention cost of linear channel attention vs global attention
    Audit {
        #[arg(long = "H")]
        h: usize,
        #[arg(long = "W")]
        w: usize,
        #[arg(long = "C")]
        c: usize,
        #[arg(long)]
        s: usize,
    },
    /// Degrade clean images into synthetic low-light ones
    SynthData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// add signal-dependent shot noise
        #[arg(long)]
        poisson: bool,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        /// restrict to one module (tensor_core, icrr, rcm, losses) or entry name
        #[arg(long)]
        module: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _flush = iretinex_core::fpenv::FlushDenormals::enable();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            trace,
            print_defaults,
        } => {
            match out {
                Some(out) if !print_defaults => commands::train(config.as_deref(), &out, trace.as_deref()),
                _ => {
                    print!("{}", iretinex_core::io::RunConfig::default_toml());
                    Ok(())
                }
            }
        }
        Command::Enhance { ckpt, input, out } => commands::enhance(&ckpt, &input, &out),
        Command::Decompose { ckpt, input, out } => commands::decompose(&ckpt, &input, &out),
        Command::Metrics { a, b, out } => commands::metrics(&a, &b, out.as_deref()),
        Command::Audit { h, w, c, s } => commands::audit(h, w, c, s),
        Command::SynthData {
            input,
            out,
            gamma,
            alpha,
            sigma,
            seed,
            poisson,
        } => commands::synth_data(&input, &out, gamma, alpha, sigma, seed, poisson),
        Command::Gradcheck { module } => commands::gradcheck(module.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
