//! Command-line front end: synthetic data generation, training, evaluation,
//! gradient verification, single-image inference, and log plotting.

mod plot;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sacnet_core::checkpoint;
use sacnet_core::config::TrainConfig;
use sacnet_core::data::{self, DatasetMeta};
use sacnet_core::model::SacNetModel;
use sacnet_core::train::{evaluate, run_training};
use sacnet_core::verify::{run_gradcheck_suite, SuiteFilter};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sacnet", about = "Deformable-convolution segmentation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Verify analytical gradients against central finite differences.
    Gradcheck {
        /// Which group to check: all, dcnv3, arfm, losses or model.
        #[arg(long, default_value = "all")]
        op: SuiteFilter,
        /// Relative tolerance; model-level checks use 10x this value.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Segment one image file (.img or .ppm) with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss/IoU/kappa curves from a metrics CSV.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            seed,
            count,
            size,
            classes,
            out,
        } => gen_data(seed, count, size, classes, &out),
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval { ckpt, data, report } => eval_cmd(&ckpt, &data, &report),
        Command::Gradcheck { op, tol } => gradcheck_cmd(op, tol),
        Command::Infer { ckpt, image, out } => infer(&ckpt, &image, &out),
        Command::Plot { log, out } => plot_cmd(&log, &out),
    }
}

fn gen_data(seed: u64, count: usize, size: usize, classes: usize, out: &Path) -> Result<()> {
    let samples = data::gen_synthetic(seed, count, size, classes)?;
    let meta = DatasetMeta {
        count,
        size,
        classes,
        seed,
    };
    data::write_dataset(out, &samples, &meta)?;
    println!(
        "wrote {count} samples ({size}x{size}, {classes} classes) to {}",
        out.display()
    );
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let report = run_training(&cfg, resume)?;
    println!(
        "done: best epoch {} with mean DSC {:.4}, mean IoU {:.4}; artifacts in {}",
        report.best_epoch,
        report.best_mean_dsc,
        report.best.mean_iou,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Rebuilds the model a checkpoint was trained with (f64 evaluation mode).
fn model_from_checkpoint(ckpt_path: &Path) -> Result<SacNetModel<f64>> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = ckpt.model_config()?;
    let mut model = SacNetModel::<f64>::new(cfg, 0)?;
    ckpt.restore_params(&mut model.store)?;
    Ok(model)
}

fn eval_cmd(ckpt: &Path, data_dir: &Path, report_path: &Path) -> Result<()> {
    let model = model_from_checkpoint(ckpt)?;
    let (samples, meta) = data::load_dataset(data_dir)?;
    if meta.classes != model.config.num_classes {
        bail!(
            "dataset has {} classes but the checkpoint model expects {}",
            meta.classes,
            model.config.num_classes
        );
    }
    let report = evaluate(&model, &samples, meta.classes)?;
    let json = serde_json_string(&report)?;
    std::fs::write(report_path, &json)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "evaluated {} samples: mean IoU {:.4}, mean DSC {:.4}, mean HD95 {:.3}",
        samples.len(),
        report.mean_iou,
        report.mean_dsc,
        report.mean_hd95
    );
    Ok(())
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).context("serializing report")
}

fn gradcheck_cmd(op: SuiteFilter, tol: f64) -> Result<()> {
    let reports = run_gradcheck_suite(op, tol)?;
    let mut failures = 0;
    for r in &reports {
        println!("{}", r.line());
        if !r.pass {
            failures += 1;
        }
    }
    println!("{} checks, {} failures", reports.len(), failures);
    if failures > 0 {
        bail!("{failures} gradient checks failed");
    }
    Ok(())
}

fn infer(ckpt: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let model = model_from_checkpoint(ckpt)?;
    let (image, size) = match image_path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => data::read_ppm(image_path)?,
        _ => data::read_image_file(image_path)?,
    };
    if size != model.config.input_h {
        bail!(
            "image is {size}x{size} but the model expects {}x{}",
            model.config.input_h,
            model.config.input_w
        );
    }
    let tensor = sacnet_core::Tensor::<f64>::from_f64_slice(&[1, 3, size, size], &image)?;
    let probs = model.predict(&tensor)?;
    let labels = sacnet_core::train::argmax_labels(&probs);
    match out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => data::write_pgm(out, &labels, size, model.config.num_classes)?,
        _ => data::write_mask_file(out, &labels, size)?,
    }
    println!("wrote predicted mask to {}", out.display());
    Ok(())
}

fn plot_cmd(log: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let (header, cols) = plot::parse_csv(&text)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let find = |name: &str| header.iter().position(|h| h == name);
    let collect = |prefix: &str| -> Vec<plot::Series> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(prefix))
            .map(|(i, h)| plot::Series {
                label: h.clone(),
                values: cols[i].clone(),
            })
            .collect()
    };

    let mut loss_series = Vec::new();
    if let Some(i) = find("train_loss") {
        loss_series.push(plot::Series {
            label: "train_loss".into(),
            values: cols[i].clone(),
        });
    }
    if loss_series.is_empty() {
        bail!("no train_loss column in {}", log.display());
    }
    plot::render_chart(&out.join("loss.png"), "TRAIN LOSS", &loss_series)?;

    if let Some(i) = find("lr") {
        plot::render_chart(
            &out.join("lr.png"),
            "LEARNING RATE",
            &[plot::Series {
                label: "lr".into(),
                values: cols[i].clone(),
            }],
        )?;
    }

    let mut iou = collect("iou_");
    if let Some(i) = find("mean_iou") {
        iou.insert(
            0,
            plot::Series {
                label: "mean_iou".into(),
                values: cols[i].clone(),
            },
        );
    }
    plot::render_chart(&out.join("iou.png"), "VALIDATION IOU", &iou)?;

    let kappa = collect("kappa_");
    if !kappa.is_empty() {
        plot::render_chart(&out.join("kappa.png"), "KAPPA", &kappa)?;
    }
    println!("wrote plots to {}", out.display());
    Ok(())
}
