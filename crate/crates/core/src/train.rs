//! Epoch loop, evaluation, and run orchestration.
//!
//! A run is fully determined by its config: the model is seeded from
//! `seed`, the harness RNG (shuffling + droppath) from `seed + 1`, batches
//! iterate in seeded shuffled order, and metrics CSVs are written with
//! stable formatting, so identical configs produce byte-identical logs.

use crate::checkpoint::{self, Checkpoint};
use crate::config::TrainConfig;
use crate::data::SyntheticSample;
use crate::error::{Result, SacError};
use crate::losses::{ct_loss, onehot_from_labels, CtLossConfig, KappaState};
use crate::metrics::{dsc, hd95, iou, BinaryMask};
use crate::model::SacNetModel;
use crate::nn::{Binder, Mode};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
use crate::tape::{Ctx, Tape};
use crate::tensor::{NumericMode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Per-class and mean validation metrics.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<f64>,
    pub per_class_dsc: Vec<f64>,
    pub per_class_hd95: Vec<f64>,
    pub mean_iou: f64,
    pub mean_dsc: f64,
    pub mean_hd95: f64,
}

/// Argmax class ids of a `(B,N,H,W)` probability map; ties resolve to the
/// lowest class index.
pub fn argmax_labels<F: Scalar>(probs: &Tensor<F>) -> Vec<u8> {
    let [b, n, h, w] = [
        probs.shape()[0],
        probs.shape()[1],
        probs.shape()[2],
        probs.shape()[3],
    ];
    let plane = h * w;
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = probs.data()[(bi * n) * plane + p];
            for c in 1..n {
                let v = probs.data()[(bi * n + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    out
}

/// Evaluates an arbitrary predictor; metrics are averaged over samples with
/// the both-empty-is-perfect convention.
pub fn evaluate_with<F, P>(mut predict: P, data: &[SyntheticSample], classes: usize) -> Result<EvalReport>
where
    F: Scalar,
    P: FnMut(&SyntheticSample) -> Result<Tensor<F>>,
{
    let mut sum_iou = vec![0.0f64; classes];
    let mut sum_dsc = vec![0.0f64; classes];
    let mut sum_hd = vec![0.0f64; classes];
    for sample in data {
        let probs = predict(sample)?;
        let pred = argmax_labels(&probs);
        let s = sample.size;
        for c in 0..classes {
            let pm = BinaryMask::from_labels(&pred, s, s, c as u8)?;
            let tm = BinaryMask::from_labels(&sample.mask, s, s, c as u8)?;
            sum_iou[c] += iou(&pm, &tm)?;
            sum_dsc[c] += dsc(&pm, &tm)?;
            sum_hd[c] += hd95(&pm, &tm)?;
        }
    }
    let n = data.len().max(1) as f64;
    let per_class_iou: Vec<f64> = sum_iou.iter().map(|v| v / n).collect();
    let per_class_dsc: Vec<f64> = sum_dsc.iter().map(|v| v / n).collect();
    let per_class_hd95: Vec<f64> = sum_hd.iter().map(|v| v / n).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(EvalReport {
        mean_iou: mean(&per_class_iou),
        mean_dsc: mean(&per_class_dsc),
        mean_hd95: mean(&per_class_hd95),
        per_class_iou,
        per_class_dsc,
        per_class_hd95,
    })
}

/// Deterministic eval-mode evaluation of the model.
pub fn evaluate<F: Scalar>(
    model: &SacNetModel<F>,
    data: &[SyntheticSample],
    classes: usize,
) -> Result<EvalReport> {
    evaluate_with(|s| model.predict(&s.image_tensor()), data, classes)
}

pub struct EpochStats {
    pub mean_loss: f64,
    pub first_lr: f64,
}

/// One pass over the training set in seeded shuffled order. Does not touch
/// kappa; the caller updates it after validation.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<F: Scalar>(
    model: &mut SacNetModel<F>,
    data: &[SyntheticSample],
    ks: &KappaState,
    loss_cfg: &CtLossConfig,
    adam_cfg: &AdamWConfig,
    opt: &mut AdamWState<F>,
    base_lr: f64,
    total_steps: u64,
    global_step: &mut u64,
    batch_size: usize,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let classes = model.config.num_classes;
    let s = model.config.input_h;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    let mut first_lr = None;

    for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
        let b = chunk.len();
        let mut img = vec![F::zero(); b * 3 * s * s];
        let mut labels = vec![0u8; b * s * s];
        for (i, &si) in chunk.iter().enumerate() {
            let sample = &data[si];
            for (k, &v) in sample.image.iter().enumerate() {
                img[i * 3 * s * s + k] = F::from_real(v);
            }
            labels[i * s * s..(i + 1) * s * s].copy_from_slice(&sample.mask);
        }
        let img = Tensor::new(vec![b, 3, s, s], img)?;
        let onehot = onehot_from_labels::<F>(&labels, b, classes, s, s)?;

        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let x = Ctx::<F>::leaf(&mut tape, img);
        let probs = model.model_forward(&mut tape, &mut binder, x, Mode::Train, Some(rng))?;
        let y = Ctx::<F>::constant(&mut tape, onehot);
        let loss = ct_loss(&mut tape, probs, y, ks, loss_cfg)?;
        let loss_val = tape.value(loss)?.item()?.real();
        if !loss_val.is_finite() {
            return Err(SacError::NanLoss {
                epoch,
                batch: batch_idx,
            });
        }
        tape.backward(loss)?;

        let mut grads: Vec<Vec<F>> = Vec::with_capacity(model.store.len());
        for (id, _, t) in model.store.iter() {
            let g = binder
                .bound(id)
                .and_then(|v| tape.grad(*v).ok().flatten())
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::zero(); t.numel()]);
            grads.push(g);
        }
        drop(tape);

        let lr = cosine_lr(*global_step, total_steps, base_lr)?;
        first_lr.get_or_insert(lr);
        adamw_step(&mut model.store, &grads, opt, lr, adam_cfg)?;
        *global_step += 1;

        loss_sum += loss_val;
        batches += 1;
    }

    Ok(EpochStats {
        mean_loss: loss_sum / batches.max(1) as f64,
        first_lr: first_lr.unwrap_or(base_lr),
    })
}

/// Final JSON report of a training run.
#[derive(Debug, Clone, Serialize)]
pub struct FinalReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_mean_dsc: f64,
    pub final_kappa: Vec<f64>,
    pub best: EvalReport,
}

fn csv_header(classes: usize) -> String {
    let mut h = String::from("epoch,train_loss,lr,mean_iou,mean_dsc,mean_hd95");
    for c in 0..classes {
        h.push_str(&format!(",iou_{c}"));
    }
    for c in 0..classes {
        h.push_str(&format!(",dsc_{c}"));
    }
    for c in 0..classes {
        h.push_str(&format!(",hd95_{c}"));
    }
    for c in 0..classes {
        h.push_str(&format!(",kappa_{c}"));
    }
    h.push('\n');
    h
}

fn csv_row(epoch: usize, stats: &EpochStats, eval: &EvalReport, kappa: &[f64]) -> String {
    let mut row = format!(
        "{},{},{},{},{},{}",
        epoch, stats.mean_loss, stats.first_lr, eval.mean_iou, eval.mean_dsc, eval.mean_hd95
    );
    for v in eval
        .per_class_iou
        .iter()
        .chain(&eval.per_class_dsc)
        .chain(&eval.per_class_hd95)
        .chain(kappa)
    {
        row.push_str(&format!(",{v}"));
    }
    row.push('\n');
    row
}

/// All artifact paths of a run directory.
pub struct RunPaths {
    pub metrics_csv: std::path::PathBuf,
    pub kappa_csv: std::path::PathBuf,
    pub report_json: std::path::PathBuf,
    pub best_ckpt: std::path::PathBuf,
    pub last_ckpt: std::path::PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        RunPaths {
            metrics_csv: out_dir.join("metrics.csv"),
            kappa_csv: out_dir.join("kappa.csv"),
            report_json: out_dir.join("report.json"),
            best_ckpt: out_dir.join("best.ckpt"),
            last_ckpt: out_dir.join("last.ckpt"),
        }
    }
}

/// Full training run: epoch loop, per-epoch kappa updates from validation
/// IoU, best-checkpoint tracking by mean DSC, CSV/JSON artifacts.
pub fn run_training(cfg: &TrainConfig, resume: Option<&Path>) -> Result<FinalReport> {
    match cfg.numeric_mode {
        NumericMode::F64 => run_training_typed::<f64>(cfg, resume),
        NumericMode::F32 => run_training_typed::<f32>(cfg, resume),
    }
}

fn run_training_typed<F: Scalar>(cfg: &TrainConfig, resume: Option<&Path>) -> Result<FinalReport> {
    cfg.validate()?;
    let (samples, meta) = crate::data::load_dataset(&cfg.data_dir)?;
    if meta.classes != cfg.model.num_classes {
        return Err(SacError::Config(format!(
            "dataset has {} classes, model expects {}",
            meta.classes, cfg.model.num_classes
        )));
    }
    if meta.size != cfg.model.input_h || meta.size != cfg.model.input_w {
        return Err(SacError::Config(format!(
            "dataset size {} does not match model input {}x{}",
            meta.size, cfg.model.input_h, cfg.model.input_w
        )));
    }
    let n_train = ((samples.len() as f64) * cfg.train_fraction).floor() as usize;
    if n_train == 0 || n_train == samples.len() {
        return Err(SacError::Config(format!(
            "split leaves no data on one side ({} of {})",
            n_train,
            samples.len()
        )));
    }
    let (train_data, val_data) = samples.split_at(n_train);

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| SacError::io(cfg.out_dir.display().to_string(), e))?;
    let paths = RunPaths::new(&cfg.out_dir);

    let mut model = SacNetModel::<F>::new(cfg.model.clone(), cfg.seed)?;
    let mut ks = KappaState::init(cfg.model.num_classes, cfg.kappa_max)?;
    let mut opt = AdamWState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    let mut best_mean_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    if let Some(ckpt_path) = resume {
        let ckpt = checkpoint::load(ckpt_path)?;
        checkpoint::check_digest(&ckpt, &cfg.model)?;
        ckpt.restore_params(&mut model.store)?;
        ckpt.restore_optimizer(&mut opt)?;
        ks = ckpt.kappa.clone();
        rng = ckpt.restore_rng();
        start_epoch = ckpt.next_epoch as usize;
        global_step = ckpt.global_step;
        best_mean_dsc = ckpt.best_mean_dsc;
    }

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let loss_cfg = CtLossConfig::new(cfg.gamma, cfg.model.num_classes)?;

    let mut csv = if start_epoch == 0 || !paths.metrics_csv.exists() {
        let mut f = std::fs::File::create(&paths.metrics_csv)
            .map_err(|e| SacError::io(paths.metrics_csv.display().to_string(), e))?;
        f.write_all(csv_header(cfg.model.num_classes).as_bytes())
            .map_err(|e| SacError::io(paths.metrics_csv.display().to_string(), e))?;
        f
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&paths.metrics_csv)
            .map_err(|e| SacError::io(paths.metrics_csv.display().to_string(), e))?
    };

    let mut best_eval: Option<EvalReport> = None;
    for epoch in start_epoch..cfg.epochs {
        let stats = train_epoch(
            &mut model,
            train_data,
            &ks,
            &loss_cfg,
            &cfg.adamw,
            &mut opt,
            cfg.base_lr,
            total_steps,
            &mut global_step,
            cfg.batch_size,
            epoch,
            &mut rng,
        )?;
        let eval = evaluate(&model, val_data, cfg.model.num_classes)?;
        ks.update_kappa(epoch, &eval.per_class_iou)?;

        csv.write_all(csv_row(epoch, &stats, &eval, ks.kappa()).as_bytes())
            .map_err(|e| SacError::io(paths.metrics_csv.display().to_string(), e))?;
        ks.write_history_csv(&paths.kappa_csv)?;

        let ckpt = Checkpoint::capture(
            &cfg.model,
            &model.store,
            &opt,
            &ks,
            epoch + 1,
            &rng,
            best_mean_dsc,
            global_step,
        );
        if eval.mean_dsc > best_mean_dsc {
            best_mean_dsc = eval.mean_dsc;
            best_epoch = epoch;
            best_eval = Some(eval.clone());
            let mut best_ckpt = ckpt.clone();
            best_ckpt.best_mean_dsc = best_mean_dsc;
            checkpoint::save(&paths.best_ckpt, &best_ckpt)?;
        }
        let mut last = ckpt;
        last.best_mean_dsc = best_mean_dsc;
        checkpoint::save(&paths.last_ckpt, &last)?;
    }

    let best = match best_eval {
        Some(e) => e,
        None => evaluate(&model, val_data, cfg.model.num_classes)?,
    };
    let report = FinalReport {
        epochs: cfg.epochs,
        best_epoch,
        best_mean_dsc,
        final_kappa: ks.kappa().to_vec(),
        best,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&paths.report_json, json)
        .map_err(|e| SacError::io(paths.report_json.display().to_string(), e))?;
    Ok(report)
}
