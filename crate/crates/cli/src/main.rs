use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use uqvae::experiment::{
    cmd_gen_data, cmd_laplace, cmd_report, cmd_timing, cmd_train, cmd_verify, ExperimentConfig, Precision,
};

/// Environment variable naming the directory relative output paths resolve against.
const OUTPUT_ROOT_ENV: &str = "UQVAE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "uqvae", version, about = "Amortized Gaussian posteriors for the 2-D heat conduction inverse problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw parameter fields from the prior and simulate noisy sensor data.
    GenData(Common),
    /// Train the encoder (and the decoder in learned mode).
    Train(Common),
    /// MAP estimate and Laplace posterior for one test datum.
    Laplace(Common),
    /// Numerical checks of the divergence identities and linear-Gaussian recovery.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Monte Carlo samples per divergence estimate.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Aggregate all runs below a directory into tables and figures.
    Report {
        /// Directory to scan; defaults to the output root.
        root: Option<PathBuf>,
    },
    /// Compare encoder evaluation time against the Laplace pipeline.
    Timing(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    mesh_n: Option<usize>,
    #[arg(long)]
    m_train: Option<usize>,
    #[arg(long)]
    m_test: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// modelled or learned.
    #[arg(long)]
    pto_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn resolve(p: &Path) -> PathBuf {
    match output_root() {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let flags: [(&str, Option<String>); 11] = [
            ("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string())),
            ("mesh_n", self.mesh_n.map(|v| v.to_string())),
            ("m_train", self.m_train.map(|v| v.to_string())),
            ("m_test", self.m_test.map(|v| v.to_string())),
            ("delta", self.delta.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("pto_mode", self.pto_mode.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("precision", self.precision.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(anyhow::Error::msg)?;
            }
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            cfg.set(k.trim(), v).map_err(anyhow::Error::msg)?;
        }
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.train_data = cfg.train_data.as_deref().map(resolve);
        cfg.test_data = cfg.test_data.as_deref().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident) => {
        match $cfg.precision {
            Precision::F64 => $f::<f64>(&$cfg),
            Precision::F32 => $f::<f32>(&$cfg),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            if cfg.is_full_scale() {
                eprintln!("note: mesh_n={} is a large configuration; generation may take a while", cfg.mesh_n);
            }
            let out = dispatch!(cfg, cmd_gen_data)?;
            println!("train set: {}", out.train_path.display());
            if let Some(p) = out.test_path {
                println!("test set: {}", p.display());
            }
            if out.rejected_draws > 0 {
                println!("draws rejected below the conductivity floor: {}", out.rejected_draws);
            }
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = dispatch!(cfg, cmd_train)?;
            println!("loss: {:.6e} -> {:.6e}", out.initial_total, out.final_total);
            println!("checkpoint: {}", out.checkpoint.display());
            if let Some(ev) = out.evaluation {
                println!("test parameter error: {:.3}%", ev.param_error.percent);
                if let Some(o) = ev.obs_error {
                    println!("test observation error: {:.3}%", o.percent);
                }
                println!("{}-std feasibility: {:.1}%", cfg.k_std, ev.feasibility.percent);
            }
        }
        Command::Laplace(c) => {
            let cfg = c.load()?;
            let out = dispatch!(cfg, cmd_laplace)?;
            println!(
                "MAP error {:.3}% after {} iterations (converged: {}), {:.3} s",
                out.relative_error, out.iterations, out.converged, out.wall_seconds
            );
        }
        Command::Verify { common, samples } => {
            let cfg = common.load()?;
            let out = cmd_verify(&cfg, samples)?;
            for r in &out.rows {
                println!("{} {} = {:.3e} ± {:.1e}", if r.pass { "PASS" } else { "FAIL" }, r.check, r.value, r.std_error);
            }
            for r in &out.recovery {
                println!(
                    "{} recovery seed={} mean={:.2e} cov={:.2e} steps={}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.seed,
                    r.mean_error,
                    r.cov_error,
                    r.steps
                );
            }
            if !out.all_pass() {
                bail!("verification failed");
            }
        }
        Command::Report { root } => {
            let root = match root {
                Some(r) => resolve(&r),
                None => output_root().unwrap_or_else(|| PathBuf::from(".")),
            };
            let out = cmd_report(&root)?;
            println!("{} runs, {} tables, {} figures", out.runs.len(), out.tables.len(), out.figures.len());
            println!("summary: {}", out.relative_errors.display());
        }
        Command::Timing(c) => {
            let cfg = c.load()?;
            let out = dispatch!(cfg, cmd_timing)?;
            println!(
                "encoder {:.3e} s, laplace {:.3e} s, speedup {:.1}x ({})",
                out.encoder_seconds, out.laplace_seconds, out.ratio, out.hardware
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
