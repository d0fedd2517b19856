#![allow(dead_code)]

//! Shared oracles and cached training runs for the integration tests.
//!
//! Oracles here are written independently of the library code paths they
//! check: brute-force nearest-neighbor scans for the distance metrics, the
//! closed-form neighborhood-average for the degenerate deformable operator,
//! and a direct squared-cosine-distance loss.

use sacnet_core::config::TrainConfig;
use sacnet_core::data::{gen_synthetic, write_dataset, DatasetMeta};
use sacnet_core::losses::class_cosine;
use sacnet_core::metrics::BinaryMask;
use sacnet_core::model::SacNetConfig;
use sacnet_core::tensor::{NumericMode, Scalar, Tensor};
use sacnet_core::train::{run_training, FinalReport};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

// ---------------------------------------------------------------------------
// metric oracles (exhaustive O(n^2) scans)

pub fn oracle_counts(x: &BinaryMask, y: &BinaryMask) -> (usize, usize, usize) {
    let (h, w) = x.shape();
    let mut inter = 0;
    let mut cx = 0;
    let mut cy = 0;
    for yy in 0..h {
        for xx in 0..w {
            let (a, b) = (x.get(yy, xx), y.get(yy, xx));
            if a {
                cx += 1;
            }
            if b {
                cy += 1;
            }
            if a && b {
                inter += 1;
            }
        }
    }
    (inter, cx, cy)
}

pub fn oracle_dsc(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let (inter, cx, cy) = oracle_counts(x, y);
    if cx + cy == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (cx + cy) as f64
    }
}

pub fn oracle_iou(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let (inter, cx, cy) = oracle_counts(x, y);
    let union = cx + cy - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn oracle_directed(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let a: Vec<(usize, usize)> = from.pixels().collect();
    let b: Vec<(usize, usize)> = to.pixels().collect();
    a.iter()
        .map(|&(ay, ax)| {
            b.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn diagonal(m: &BinaryMask) -> f64 {
    let (h, w) = m.shape();
    let dy = (h - 1) as f64;
    let dx = (w - 1) as f64;
    (dy * dy + dx * dx).sqrt()
}

pub fn oracle_hausdorff(x: &BinaryMask, y: &BinaryMask) -> f64 {
    match (x.is_mask_empty(), y.is_mask_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return diagonal(x),
        _ => {}
    }
    let m = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    m(oracle_directed(x, y)).max(m(oracle_directed(y, x)))
}

pub fn oracle_hd95(x: &BinaryMask, y: &BinaryMask) -> f64 {
    match (x.is_mask_empty(), y.is_mask_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return diagonal(x),
        _ => {}
    }
    let mut pooled = oracle_directed(x, y);
    pooled.extend(oracle_directed(y, x));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (pooled.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        pooled[lo]
    } else {
        pooled[lo] + (pos - lo as f64) * (pooled[hi] - pooled[lo])
    }
}

// ---------------------------------------------------------------------------
// loss oracle: independent squared cosine distance (the kappa = 0 form)

pub fn oracle_squared_cosine_loss(probs: &Tensor<f64>, onehot: &Tensor<f64>) -> f64 {
    let classes = probs.shape()[1];
    let mut acc = 0.0;
    for c in 0..classes {
        let cos = class_cosine(probs, onehot, c).unwrap();
        acc += (1.0 - cos) * (1.0 - cos);
    }
    acc / classes as f64
}

// ---------------------------------------------------------------------------
// degenerate deformable-aggregation oracle: per-group zero-padded 3x3
// neighborhood average followed by the grouped projection

pub fn oracle_dcn_degenerate<F: Scalar>(x: &Tensor<F>, proj: &Tensor<F>, groups: usize) -> Tensor<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cp = c / groups;
    let mut out = Tensor::<F>::zeros(&[b, c, h, w]);
    let ninth = F::from_real(1.0 / 9.0);
    for bi in 0..b {
        for g in 0..groups {
            for hy in 0..h {
                for wx in 0..w {
                    for cpi in 0..cp {
                        let mut mean = F::zero();
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (yy, xx) = (hy as i64 + dy, wx as i64 + dx);
                                if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                                    mean = mean + x.at4(bi, g * cp + cpi, yy as usize, xx as usize);
                                }
                            }
                        }
                        mean = mean * ninth;
                        for co in 0..c {
                            let wv = proj.data()[(g * c + co) * cp + cpi];
                            let idx = out.idx4(bi, co, hy, wx);
                            out.data_mut()[idx] = out.data_mut()[idx] + wv * mean;
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// cached toy training runs

pub struct ToyRun {
    pub report: FinalReport,
    pub metrics_csv: String,
    pub kappa_csv: String,
    pub out_dir: PathBuf,
    pub wall: Duration,
}

fn scratch_root() -> &'static PathBuf {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("sacnet-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("create scratch root");
        dir
    })
}

/// The shared 250-sample toy dataset (seed 42, 32x32, 4 classes).
pub fn toy_dataset_dir() -> PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch_root().join("data");
        let samples = gen_synthetic(42, 250, 32, 4).expect("generate dataset");
        write_dataset(
            &dir,
            &samples,
            &DatasetMeta {
                count: 250,
                size: 32,
                classes: 4,
                seed: 42,
            },
        )
        .expect("write dataset");
        dir
    })
    .clone()
}

pub fn toy_config(seed: u64, kappa_max: f64, mode: NumericMode, epochs: usize, tag: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = SacNetConfig::toy(4);
    cfg.batch_size = 8;
    cfg.base_lr = 3e-4;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.kappa_max = kappa_max;
    cfg.gamma = 0.6;
    cfg.numeric_mode = mode;
    cfg.data_dir = toy_dataset_dir();
    cfg.out_dir = scratch_root().join(format!("run-{tag}"));
    cfg
}

type Cache = Mutex<HashMap<String, Arc<OnceLock<Arc<ToyRun>>>>>;

/// Runs (or returns the cached) toy training for a tag. Tags double as the
/// output directory name, so distinct tags are genuinely independent runs.
pub fn toy_run(tag: &str, seed: u64, kappa_max: f64, mode: NumericMode, epochs: usize) -> Arc<ToyRun> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let cell = {
        let mut map = cache.lock().unwrap();
        map.entry(tag.to_string()).or_default().clone()
    };
    cell.get_or_init(|| {
        let cfg = toy_config(seed, kappa_max, mode, epochs, tag);
        let t0 = std::time::Instant::now();
        let report = run_training(&cfg, None).expect("training run");
        let wall = t0.elapsed();
        let metrics_csv = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
        let kappa_csv = std::fs::read_to_string(cfg.out_dir.join("kappa.csv")).unwrap();
        Arc::new(ToyRun {
            report,
            metrics_csv,
            kappa_csv,
            out_dir: cfg.out_dir,
            wall,
        })
    })
    .clone()
}

/// Parses a metrics CSV into (header, rows).
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(|s| s.to_string()).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

pub fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}
