//! Command-line parsing and flag overrides.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use hgm_core::{HighDimTransform, MaskKind, RestoreMode};

use crate::commands::{self, run, Command};
use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "hgm", version, about = "Score-based colour image restoration with high-dimensional lifts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Train a score network on a directory of PNG images.
    Train(RunArgs),
    /// Degrade ground-truth images, restore them and report PSNR/SSIM.
    Restore(RunArgs),
    /// Draw unconditional samples.
    Generate(RunArgs),
    /// Sample-count and transform sweeps against Gaussian oracles.
    Sweep(RunArgs),
    /// PSNR/SSIM of restored images against references.
    Eval(RunArgs),
    /// Write a synthetic correlated-Gaussian image dataset.
    Synth(RunArgs),
    /// Rerun a previous command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file; omitted sections use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<RestoreMode>,
    /// Lift used for training, restoration and generation.
    #[arg(long)]
    pub transform: Option<HighDimTransform>,
    /// Data-fidelity weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mask: Option<MaskKind>,
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Dump per-level snapshots during restoration.
    #[arg(long)]
    pub snapshots: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the rerun; defaults to `replay` next to the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self, command: Command) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        self.apply(command, &mut cfg)?;
        Ok(cfg)
    }

    /// Flags take precedence over the file.
    pub fn apply(&self, command: Command, cfg: &mut Config) -> Result<()> {
        if let Some(seed) = self.seed {
            match command {
                Command::Train => cfg.train.seed = seed,
                Command::Restore => cfg.restore.seed = seed,
                Command::Generate => cfg.generate.seed = seed,
                Command::Sweep => cfg.sweep.seeds = vec![seed],
                Command::Synth => cfg.synth.seed = seed,
                Command::Eval => {}
            }
        }
        if let Some(m) = self.mode {
            cfg.restore.mode = m;
        }
        if let Some(t) = self.transform {
            cfg.train.transform = t;
            cfg.restore.transform = t;
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                bail!("--lambda must be a non-negative number");
            }
            cfg.restore.lambda = l;
        }
        if let Some(m) = self.mask {
            cfg.degradation.mask = m;
        }
        if let Some(k) = self.keep_fraction {
            cfg.degradation.keep_fraction = k;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = std::path::absolute(d)?;
        }
        if self.snapshots {
            cfg.restore.snapshots = true;
        }
        Ok(())
    }
}

/// Applies `HGM_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HGM_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("HGM_THREADS must be a positive integer"))?;
        if n == 0 {
            bail!("HGM_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

pub fn main_with(cli: Cli) -> Result<()> {
    configure_threads()?;
    let (command, args) = match cli.command {
        CliCommand::Train(a) => (Command::Train, a),
        CliCommand::Restore(a) => (Command::Restore, a),
        CliCommand::Generate(a) => (Command::Generate, a),
        CliCommand::Sweep(a) => (Command::Sweep, a),
        CliCommand::Eval(a) => (Command::Eval, a),
        CliCommand::Synth(a) => (Command::Synth, a),
        CliCommand::Replay(r) => {
            let out = match r.out_dir {
                Some(d) => d,
                None => r.manifest.parent().unwrap_or(std::path::Path::new(".")).join("replay"),
            };
            let report = commands::replay(&r.manifest, &out)?;
            for p in &report.changed_inputs {
                eprintln!("input changed since the original run: {}", p.display());
            }
            for p in &report.mismatched_outputs {
                eprintln!("output differs: {}", p.display());
            }
            if !report.identical() {
                bail!("replay did not reproduce the original outputs");
            }
            println!("replay reproduced {} outputs in {}", report.manifest.outputs.len(), out.display());
            return Ok(());
        }
    };
    let cfg = args.resolve(command)?;
    let manifest = run(command, &cfg)?;
    println!(
        "{}: wrote {} files to {}",
        command.name(),
        manifest.outputs.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let cli = Cli::try_parse_from([
            "hgm",
            "restore",
            "--seed",
            "9",
            "--mode",
            "progressive",
            "--transform",
            "dwt",
            "--lambda",
            "1e6",
            "--mask",
            "block",
            "--keep-fraction",
            "0.5",
            "--out-dir",
            "/tmp/hgm-out",
            "--snapshots",
        ])
        .unwrap();
        let CliCommand::Restore(args) = cli.command else {
            panic!("wrong subcommand");
        };
        let cfg = args.resolve(Command::Restore).unwrap();
        assert_eq!(cfg.restore.seed, 9);
        assert_eq!(cfg.restore.mode, RestoreMode::Progressive);
        assert_eq!(cfg.restore.transform, HighDimTransform::Dwt);
        assert_eq!(cfg.train.transform, HighDimTransform::Dwt);
        assert_eq!(cfg.restore.lambda, 1e6);
        assert_eq!(cfg.degradation.mask, MaskKind::Block);
        assert_eq!(cfg.degradation.keep_fraction, 0.5);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/hgm-out"));
        assert!(cfg.restore.snapshots);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Cli::try_parse_from(["hgm", "restore", "--mode", "fast"]).is_err());
        assert!(Cli::try_parse_from(["hgm", "restore", "--transform", "fft"]).is_err());
        let cli = Cli::try_parse_from(["hgm", "restore", "--lambda=-1"]).unwrap();
        let CliCommand::Restore(args) = cli.command else {
            panic!("wrong subcommand");
        };
        assert!(args.resolve(Command::Restore).is_err());
    }
}
