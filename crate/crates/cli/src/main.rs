//! `saekit` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{data_path, sibling, AutointerpPaths};
use config::{ConfigError, RunConfig};
use saekit::sae::Variant;
use saekit::ErrorKind;

fn parse_variant(s: &str) -> Result<Variant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "saekit",
    version,
    about = "Sparse autoencoder training, stitching and meta-SAE analysis"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides all seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic compositional activation file.
    Gen {
        /// Output file; defaults to `data.path`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sample count; overrides `data.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train an SAE; writes weights plus `<out>.history.json` and `<out>.state.json`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from these weights and their `.state.json` sibling.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `sae.variant` (relu, top-k, batch-top-k).
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Overrides `sae.m`.
        #[arg(long)]
        m: Option<usize>,
        /// Overrides `sae.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Stitch a small SAE towards a large one; writes the JSON report.
    Stitch {
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        large: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the interpolation trajectory as CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Overrides `stitch.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Interpolation trajectory only, as CSV.
    Interpolate {
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        large: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train a meta-SAE on a base SAE's decoder; writes the decomposition graph.
    Meta {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save the meta-SAE weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Core metrics, sparse probes and TPP.
    Eval {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain latents through a chat endpoint; with `--meta`, also explain
    /// meta-latents and run the multiple-choice evaluation.
    Autointerp {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Latent explanations, JSONL.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Defaults to `<out>.meta.jsonl`.
        #[arg(long)]
        meta_out: Option<PathBuf>,
        /// Defaults to `<out>.mcq.jsonl`.
        #[arg(long)]
        mcq_out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.global.seed);
    match cli.command {
        Command::Gen { out, count } => {
            let out = out
                .or_else(|| cfg.data.path.clone())
                .ok_or_else(|| ConfigError("no output file: pass --out or set data.path".into()))?;
            commands::gen(&cfg, &out, count)
        }
        Command::Train {
            data,
            out,
            resume,
            epochs,
            variant,
            m,
            k,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(v) = variant {
                cfg.sae.variant = v;
            }
            if let Some(m) = m {
                cfg.sae.m = m;
            }
            if k.is_some() {
                cfg.sae.k = k;
            }
            let data = data_path(data, &cfg)?;
            commands::train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Stitch {
            small,
            large,
            data,
            out,
            trajectory,
            threshold,
        } => {
            if let Some(t) = threshold {
                cfg.stitch.threshold = t;
            }
            let data = data_path(data, &cfg)?;
            commands::stitch(&cfg, &small, &large, &data, &out, trajectory.as_deref())
        }
        Command::Interpolate {
            small,
            large,
            data,
            out,
            threshold,
        } => {
            if let Some(t) = threshold {
                cfg.stitch.threshold = t;
            }
            let data = data_path(data, &cfg)?;
            commands::interpolate_cmd(&cfg, &small, &large, &data, &out)
        }
        Command::Meta { base, out, weights } => commands::meta(&cfg, &base, &out, weights.as_deref()),
        Command::Eval { sae, data, out } => {
            let data = data_path(data, &cfg)?;
            commands::eval(&cfg, &sae, &data, &out)
        }
        Command::Autointerp {
            sae,
            data,
            out,
            meta,
            meta_out,
            mcq_out,
        } => {
            let data = data_path(data, &cfg)?;
            let paths = AutointerpPaths {
                sae: &sae,
                data: &data,
                out: &out,
                meta: meta.as_deref(),
                meta_out: meta_out.unwrap_or_else(|| sibling(&out, "meta.jsonl")),
                mcq_out: mcq_out.unwrap_or_else(|| sibling(&out, "mcq.jsonl")),
            };
            commands::autointerp(&cfg, &paths)
        }
    }
}

/// First recognizable cause decides the exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<saekit::Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Io => 3,
                ErrorKind::Numeric => 4,
            };
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
