//! `tdpaint`: train, sample, generate masks and evaluate from the shell.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use tdpaint::error::{Error, Result};
use tdpaint::eval::{run_eval, EvalConfig};
use tdpaint::io;
use tdpaint::rng::stream;
use tdpaint::samplers::{inpaint, Method, SamplerConfig};
use tdpaint::timemap::MaskFamily;
use tdpaint::training::{MetricRow, Trainer};

#[derive(Parser)]
#[command(name = "tdpaint", version, about = "Pixel-wise time-conditioned diffusion inpainting")]
struct Cli {
    /// Worker threads (overrides TDPAINT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives `checkpoint/` and `metrics.csv`.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Inpaint one image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM or PPM condition image.
        #[arg(long)]
        image: PathBuf,
        /// PGM mask, white = known.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value = "tdpaint")]
        method: Method,
        /// Passes per step for repaint.
        #[arg(long, default_value_t = 1)]
        resample: usize,
        /// Jump length for repaint.
        #[arg(long, default_value_t = 1)]
        jump: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives `inpainted.p?m` and `inpainted.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a mask as PGM.
    Maskgen {
        #[arg(long)]
        family: MaskFamily,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated mask families.
        #[arg(long, value_delimiter = ',', default_value = "patch,brush,sr2x,lines,half,expand")]
        families: Vec<MaskFamily>,
        /// Number of held-out images.
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value = "tdpaint")]
        method: Method,
        #[arg(long, default_value_t = 1)]
        resample: usize,
        #[arg(long, default_value_t = 1)]
        jump: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per image for the diversity column.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Output directory; receives `report.csv` and `report.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Sidecar {
    nfe: u64,
    wall_ms: f64,
    method: Method,
    seed: u64,
    resample: usize,
    jump: usize,
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("TDPAINT_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::Config {
            path: "TDPAINT_THREADS".into(),
            message: format!("expected a thread count, got `{v}`"),
        })?),
        Err(_) => None,
    };
    if let Some(n) = flag.or(from_env).filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = io::load_run_config(config)?;
    let mut trainer = Trainer::new(cfg)?;
    let total = cfg.training.steps;
    let mut rows: Vec<MetricRow> = Vec::new();
    trainer.run(|row| {
        eprintln!("step {}/{} loss {:.5}", row.step, total, row.loss);
        rows.push(row);
        Ok(())
    })?;
    io::save_checkpoint(&out.join("checkpoint"), &io::Checkpoint::from_trainer(&trainer))?;
    io::write_metrics_csv(&out.join("metrics.csv"), &rows)
}

fn shape_text(s: [usize; 3]) -> String {
    format!("{}×{}×{}", s[0], s[1], s[2])
}

fn inpaint_cmd(
    checkpoint: &Path,
    image: &Path,
    mask: &Path,
    sampler: SamplerConfig,
    out: &Path,
) -> Result<()> {
    let ckpt = io::load_checkpoint(checkpoint)?;
    let cond = io::read_image(image)?;
    let mask = io::read_mask(mask)?;
    let side = ckpt.config.dataset.image_side;
    let expected = [ckpt.config.model.in_channels, side, side];
    if cond.shape() != expected {
        return Err(Error::Shape(format!(
            "image {} is {} but the checkpoint expects {}",
            image.display(),
            shape_text(cond.shape()),
            shape_text(expected)
        )));
    }
    if [mask.height(), mask.width()] != [side, side] {
        return Err(Error::Shape(format!(
            "mask is {}×{} but the image is {}×{}",
            mask.height(),
            mask.width(),
            side,
            side
        )));
    }
    let table = ckpt.config.schedule.build()?;
    let start = Instant::now();
    let sample = inpaint(&ckpt.net, &table, &cond, &mask, &sampler)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let ext = if sample.image.channels() == 1 { "pgm" } else { "ppm" };
    io::write_image(&out.join(format!("inpainted.{ext}")), &sample.image)?;
    let sidecar = Sidecar {
        nfe: sample.nfe,
        wall_ms,
        method: sampler.method,
        seed: sampler.seed,
        resample: sampler.resample_r,
        jump: sampler.jump_j,
    };
    io::write_json(&out.join("inpainted.json"), &sidecar)
}

fn maskgen(family: MaskFamily, size: usize, seed: u64, out: &Path) -> Result<()> {
    let mut rng = stream(seed, "maskgen", 0);
    let mask = family.generate(&mut rng, size, size)?;
    io::write_mask(out, &mask)
}

fn eval_cmd(checkpoint: &Path, families: &[MaskFamily], n: usize, config: &EvalConfig, out: &Path) -> Result<()> {
    let ckpt = io::load_checkpoint(checkpoint)?;
    let table = ckpt.config.schedule.build()?;
    let images = ckpt.config.dataset.held_out(n);
    let report = run_eval(&ckpt.net, &table, &images, families, config)?;
    io::write_bytes(&out.join("report.csv"), report.to_csv()?.as_bytes())?;
    io::write_json(&out.join("report.json"), &report)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Inpaint { checkpoint, image, mask, method, resample, jump, seed, out } => {
            let sampler = SamplerConfig { resample_r: resample, jump_j: jump, ..SamplerConfig::new(method, seed) };
            sampler.validate()?;
            inpaint_cmd(&checkpoint, &image, &mask, sampler, &out)
        }
        Command::Maskgen { family, size, seed, out } => maskgen(family, size, seed, &out),
        Command::Eval { checkpoint, families, n, method, resample, jump, seed, samples, out } => {
            let sampler = SamplerConfig { resample_r: resample, jump_j: jump, ..SamplerConfig::new(method, seed) };
            let config = EvalConfig { sampler, diversity_samples: samples };
            eval_cmd(&checkpoint, &families, n, &config, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
