//! `tunet` — train, evaluate, run and verify the TUnet segmentation model.
//!
//! Exit codes: 0 success, 2 configuration/argument error, 3 runtime failure.
//! `gradcheck` additionally exits 1 when the gradient check fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tunet_core::error::Error;
use tunet_core::gradcheck::gradcheck_model;
use tunet_core::io::{load_checkpoint, load_sample_dir, load_tensor, save_sample_dir, save_tensor, Dtype};
use tunet_core::metrics::binarize;
use tunet_core::model::forward_inference;
use tunet_core::run_config::{load_dataset, run_training, RunConfig};
use tunet_core::synth::synth_dataset;
use tunet_core::tape::Precision;
use tunet_core::train::{eval_split, CSV_HEADER};

#[derive(Parser)]
#[command(name = "tunet", version, about = "Transformer-Unet binary segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config; writes metrics.csv, last.ckpt, best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints one CSV metrics row to stdout.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of img_/msk_ TensorFile pairs; defaults to the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a checkpoint on one image TensorFile; writes probability and mask files.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image TensorFile.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output probability-map TensorFile.
        #[arg(long)]
        out: PathBuf,
        /// Optional thresholded binary-mask TensorFile.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
    },
    /// Compare analytic gradients against central finite differences (64-bit).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Number of parameter coordinates to sample.
        #[arg(long)]
        samples: usize,
        /// Test hook: bias the analytic gradients so the check must fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Generate a deterministic synthetic dataset as TensorFile pairs.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Square image edge length (power of two ≥ 32).
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Schema(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn run(cmd: Cmd) -> Result<u8, Error> {
    match cmd {
        Cmd::Train { config, out } => {
            let run_cfg = RunConfig::from_json_file(&config)?;
            let summary = run_training(&run_cfg, &out)?;
            println!(
                "trained {} steps; outputs in {}",
                summary.steps,
                out.display()
            );
            Ok(0)
        }
        Cmd::Eval { config, ckpt, data } => {
            let run_cfg = RunConfig::from_json_file(&config)?;
            let (ckpt_cfg, params) = load_checkpoint(&ckpt)?;
            if !ckpt_cfg.same_architecture(&run_cfg.model) {
                return Err(Error::Schema(format!(
                    "checkpoint architecture does not match --config ({} vs {} pixels, patch {} vs {})",
                    ckpt_cfg.height, run_cfg.model.height, ckpt_cfg.patch_size, run_cfg.model.patch_size
                )));
            }
            let samples = match data {
                Some(dir) => load_sample_dir(dir)?,
                None => load_dataset(&run_cfg)?,
            };
            let eval = eval_split(
                &ckpt_cfg,
                &params,
                &samples,
                run_cfg.eval.threshold,
                Precision::F64,
            )?;
            let r = &eval.report;
            println!("{CSV_HEADER}");
            println!(
                "0,eval,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                eval.loss, r.miou, r.dice, r.pixel_acc, r.precision, r.recall
            );
            Ok(0)
        }
        Cmd::Infer {
            ckpt,
            input,
            out,
            mask,
            threshold,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Config(format!(
                    "threshold must be in [0,1], got {threshold}"
                )));
            }
            let (cfg, params) = load_checkpoint(&ckpt)?;
            let image = load_tensor(&input)?;
            if image.shape() != [cfg.channels, cfg.height, cfg.width] {
                return Err(Error::Config(format!(
                    "input shape {:?} does not match checkpoint config [{}, {}, {}]",
                    image.shape(),
                    cfg.channels,
                    cfg.height,
                    cfg.width
                )));
            }
            let prob = forward_inference(&cfg, &params, &image, Precision::F64)?;
            save_tensor(&out, &prob, Dtype::F64)?;
            if let Some(mask_path) = mask {
                let m = binarize(&prob, threshold)?;
                save_tensor(&mask_path, &m, Dtype::F64)?;
            }
            Ok(0)
        }
        Cmd::Gradcheck {
            config,
            samples,
            corrupt_backward,
        } => {
            let run_cfg = RunConfig::from_json_file(&config)?;
            let report = gradcheck_model(&run_cfg.model, samples, corrupt_backward)?;
            println!(
                "gradcheck: {} coordinates, worst relative error {:.3e} at {}[{}] (tolerance {:.0e})",
                report.sampled,
                report.worst_rel_err,
                report.worst_param,
                report.worst_index,
                report.tolerance
            );
            Ok(if report.passed() { 0 } else { 1 })
        }
        Cmd::Synth {
            seed,
            count,
            size,
            out,
        } => {
            if count == 0 {
                return Err(Error::Config("count must be ≥ 1".into()));
            }
            let samples = synth_dataset(seed, count, size, size)?;
            save_sample_dir(&out, &samples, Dtype::F64)?;
            println!("wrote {count} sample pairs to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
