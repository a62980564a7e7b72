//! `wnet`: dataset synthesis, training, inference, evaluation and gradient
//! checking for the parsing-guided face super-resolution network.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (structured message on
//! stderr), 2 on command-line usage errors (clap's default).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use wnet::checkpoint::{load_checkpoint, read_params, RawParam};
use wnet::config::TrainConfig;
use wnet::data::io::{load_rgb, save_rgb, write_dataset};
use wnet::gradcheck::grad_check;
use wnet::loss::FeatureExtractor;
use wnet::metrics::{psnr, ssim};
use wnet::model::{Ablation, WNet, WNetConfig};
use wnet::params::{seeded_rng, ParamStore};
use wnet::train::{train_with, StepRecord};
use wnet::{Error, Result};

#[derive(Parser)]
#[command(name = "wnet", version, about = "Face super-resolution trainer and runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic face dataset.
    Synth {
        /// Number of samples to write.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// HR side length (divisible by 16).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Degradation factor between HR and LR (4 or 8).
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Generator seed; same seed, same pixels.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML configuration file.
    Train {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Super-resolve one PNG with a trained checkpoint.
    Sr {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Low-resolution input image.
        #[arg(long = "in", value_name = "IMG")]
        input: PathBuf,
        /// Where to write the super-resolved PNG.
        #[arg(long)]
        out: PathBuf,
        /// Upscaling factor the checkpoint was trained for (not stored in
        /// the file; 4 or 8).
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Attention head count (a reshape, invisible in weight shapes).
        #[arg(long, default_value_t = 4)]
        heads: usize,
    },
    /// PSNR/SSIM of every PNG in --pred against its namesake in --gt.
    Eval {
        /// Directory of predicted/restored images.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth images with matching file names.
        #[arg(long)]
        gt: PathBuf,
        /// CSV to write (image_id,psnr_db,ssim plus a mean row).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central differences (64-bit).
    Gradcheck {
        /// HR side length of the reduced model.
        #[arg(long, default_value_t = 16, value_parser = parse_gradcheck_size)]
        size: usize,
        /// Seed for parameters and the probe batch.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 1)]
        coords: usize,
    },
}

fn parse_gradcheck_size(raw: &str) -> std::result::Result<usize, String> {
    match raw {
        "16" => Ok(16),
        "32" => Ok(32),
        _ => Err(format!("size must be 16 or 32, got {raw}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { count, size, scale, seed, out } => cmd_synth(count, size, scale, seed, &out),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Sr { ckpt, input, out, scale, heads } => cmd_sr(&ckpt, &input, &out, scale, heads),
        Cmd::Eval { pred, gt, out } => cmd_eval(&pred, &gt, &out),
        Cmd::Gradcheck { size, seed, step, tolerance, coords } => {
            cmd_gradcheck(size, seed, step, tolerance, coords)
        }
    }
}

// ------------------------------------------------------------------ synth

fn cmd_synth(count: usize, size: usize, scale: usize, seed: u64, out: &Path) -> Result<()> {
    write_dataset(out, count, size, scale, seed)?;
    println!("wrote {count} samples ({size}x{size} HR, x{scale} degradation) to {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ train

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    println!(
        "training: {} steps, batch {}, hr {} x{}, channels {}, dataset {}",
        cfg.steps,
        cfg.batch_size,
        cfg.hr_size,
        cfg.scale,
        cfg.channels,
        cfg.dataset_dir.display()
    );
    let every = (cfg.steps / 100).max(1);
    let t0 = Instant::now();
    let print = |r: &StepRecord| {
        if r.step == 1 || r.step % every == 0 {
            println!(
                "step {:>5}  total {:.6}  mse {:.6}  parmse {:.6}  ({} ms)",
                r.step, r.total, r.mse, r.parmse, r.ms
            );
        }
    };
    let outcome = train_with(&cfg, print)?;
    println!("trained {} steps in {:.1}s", cfg.steps, t0.elapsed().as_secs_f64());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

// --------------------------------------------------------------------- sr

/// Read the architecture back out of a checkpoint's parameter table.
///
/// Widths, block counts and ablation switches are all visible in the
/// parameter names and shapes. Two things are not: the attention head
/// count (a reshape) and the training scale (the network is fully
/// convolutional), so both arrive as flags.
fn infer_config(params: &[RawParam], hr_size: usize, scale: usize, heads: usize) -> Result<WNetConfig> {
    let fusion1 = params
        .iter()
        .find(|p| p.name == "front.fusion1.weight")
        .ok_or_else(|| Error::CheckpointMismatch("no front.fusion1.weight; not a model checkpoint".into()))?;
    let channels = fusion1.shape.n;

    let use_scab = params.iter().any(|p| p.name.contains(".mhsa."));
    let use_lpf = params.iter().any(|p| p.name.contains(".lpf.f1."));
    let use_parsing_block = params.iter().any(|p| p.name.starts_with("parsing.hourglass."));

    let mut scabs = BTreeSet::new();
    let mut levels = BTreeSet::new();
    for p in params {
        if let Some(rest) = p.name.strip_prefix("encoder.stage0.scab") {
            if let Some((index, _)) = rest.split_once('.') {
                if let Ok(j) = index.parse::<usize>() {
                    scabs.insert(j);
                }
            }
        }
        if let Some(rest) = p.name.strip_prefix("parsing.hourglass.level") {
            if let Some((index, _)) = rest.split_once('.') {
                if let Ok(j) = index.parse::<usize>() {
                    levels.insert(j);
                }
            }
        }
    }

    let ca_reduction = params
        .iter()
        .find(|p| p.name.ends_with(".ca.reduce.weight"))
        .map(|p| p.shape.c / p.shape.n.max(1))
        .unwrap_or(16);
    let sa_kernel = params
        .iter()
        .find(|p| p.name.ends_with(".sa.conv.weight"))
        .map(|p| p.shape.h)
        .unwrap_or(7);

    let cfg = WNetConfig {
        hr_size,
        scale,
        channels,
        heads,
        scab_per_stage: scabs.len().max(1),
        hourglass_depth: if use_parsing_block { levels.len() } else { 4 },
        ca_reduction,
        sa_kernel,
        ablation: Ablation { use_lpf, use_parsing_block, use_scab },
        seed: 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_sr(ckpt: &Path, input: &Path, out: &Path, scale: usize, heads: usize) -> Result<()> {
    let lr = load_rgb(input)?;
    let s = lr.shape();
    let raw = read_params(ckpt)?;
    let cfg = infer_config(&raw, s.h * scale, scale, heads)?;

    let mut store = ParamStore::<f32>::new();
    let net = WNet::new(&mut store, cfg)?;
    // Registered only so the store layout matches the file; the loss
    // extractor plays no part in inference.
    FeatureExtractor::new(&mut store, &mut seeded_rng(0))?;
    load_checkpoint(ckpt, &mut store, None)?;

    let t0 = Instant::now();
    let (sr, _parsing) = net.super_resolve(&store, &lr)?;
    save_rgb(out, &sr)?;
    let o = sr.shape();
    println!(
        "{}x{} -> {}x{} in {:.2}s (channels {}, x{scale})",
        s.w,
        s.h,
        o.w,
        o.h,
        t0.elapsed().as_secs_f64(),
        cfg.channels
    );
    println!("wrote {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------- eval

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|x| x.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|x| x.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let stems = png_stems(pred)?;
    if stems.is_empty() {
        return Err(Error::invalid("eval", format!("no .png files in {}", pred.display())));
    }

    let mut rows = String::from("image_id,psnr_db,ssim\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for stem in &stems {
        let p_path = pred.join(format!("{stem}.png"));
        let g_path = gt.join(format!("{stem}.png"));
        if !g_path.exists() {
            return Err(Error::invalid("eval", format!("no ground truth for {stem}: {} is missing", g_path.display())));
        }
        let p = load_rgb(&p_path)?;
        let g = load_rgb(&g_path)?;
        let pv = psnr(&p, &g, 1.0)?;
        let sv = ssim(&p, &g)?;
        psnr_sum += pv;
        ssim_sum += sv;
        rows.push_str(&format!("{stem},{pv:.6},{sv:.6}\n"));
        println!("{stem}: psnr {pv:.3} dB, ssim {sv:.4}");
    }
    let n = stems.len() as f64;
    rows.push_str(&format!("mean,{:.6},{:.6}\n", psnr_sum / n, ssim_sum / n));
    fs::write(out, rows).map_err(|e| Error::io(out, e))?;
    println!("mean over {}: psnr {:.3} dB, ssim {:.4}", stems.len(), psnr_sum / n, ssim_sum / n);
    println!("wrote {}", out.display());
    Ok(())
}

// -------------------------------------------------------------- gradcheck

fn cmd_gradcheck(size: usize, seed: u64, step: f64, tolerance: f64, coords: usize) -> Result<()> {
    // Narrow trunk so the 64-bit check stays desk-scale; every structural
    // feature (attention, fusion, parsing trunk) is still exercised.
    let cfg = WNetConfig {
        hr_size: size,
        scale: 4,
        channels: 8,
        heads: 2,
        scab_per_stage: 1,
        hourglass_depth: 2,
        ca_reduction: 4,
        sa_kernel: 7,
        ablation: Ablation::default(),
        seed,
    };
    let t0 = Instant::now();
    let report = grad_check(&cfg, seed, step, tolerance, coords)?;
    println!(
        "checked {} coordinates across {} parameter tensors in {:.1}s ({} skipped as kink-adjacent)",
        report.coords_checked,
        report.params_checked,
        t0.elapsed().as_secs_f64(),
        report.coords_skipped
    );
    println!("max relative error {:.3e} at {}", report.max_rel_error, report.worst_parameter);
    if report.passed(tolerance) {
        println!("gradcheck passed (tolerance {tolerance:.1e})");
        Ok(())
    } else {
        Err(Error::invalid(
            "gradcheck",
            format!("max relative error {:.3e} exceeds tolerance {tolerance:.1e}", report.max_rel_error),
        ))
    }
}
