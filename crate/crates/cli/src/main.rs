use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tplmatch::harness::pipeline::overlay;
use tplmatch::harness::selftest::run_selftest;
use tplmatch::harness::synth::write_shapes;
use tplmatch::harness::{evaluate, run_pipeline, synth_dataset, PipelineConfig, PipelineWeights};
use tplmatch::pgm::{read_gray, read_mask, write_gray};

#[derive(Parser)]
#[command(name = "tplmatch", version, about = "Coarse-to-fine template matching on edge maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write random binary shape masks.
    Shapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build a synthetic dataset from a directory of masks.
    Synth {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Match one template mask against one source image.
    Match {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every sample of a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Shapes { out, n, seed, config } => {
            let cfg = load_config(config.as_ref())?;
            let paths = write_shapes(&out, n, seed, cfg.width, cfg.height)?;
            println!("wrote {} masks to {}", paths.len(), out.display());
        }
        Cmd::Synth { masks, out, n, seed, config } => {
            let cfg = load_config(config.as_ref())?;
            let m = synth_dataset(&masks, &out, n, &cfg, seed)?;
            println!("wrote {} samples to {}", m.samples.len(), out.join("manifest.json").display());
        }
        Cmd::Match { template, image, config, out } => {
            let cfg = load_config(config.as_ref())?;
            let t = read_mask(&template)?;
            let s = read_gray(&image)?;
            let w = PipelineWeights::from_config(&cfg)?;
            let o = run_pipeline(&t, &s, &cfg, &w)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("homography.txt"), format!("{}\n", o.h))?;
            std::fs::write(out.join("coarse_matches.txt"), &o.coarse_dump)?;
            std::fs::write(out.join("fine_matches.txt"), &o.fine_dump)?;
            write_gray(&out.join("overlay.pgm"), &overlay(&s, &t, &o.h)?)?;
            println!("{}", o.h);
            println!(
                "coarse matches {}, fine matches {}{}",
                o.coarse.len(),
                o.fine_set.len(),
                if o.fine_fallback { " (coarse estimate kept)" } else { "" }
            );
        }
        Cmd::Eval { manifest, config, out } => {
            let cfg = load_config(config.as_ref())?;
            let r = evaluate(&manifest, &cfg, Some(&out))?;
            println!(
                "{} samples, {} failed: AUC@3 {:.2}  AUC@5 {:.2}  AUC@10 {:.2}",
                r.n_samples, r.n_failed, r.auc_3, r.auc_5, r.auc_10
            );
        }
        Cmd::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
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
            ExitCode::FAILURE
        }
    }
}
