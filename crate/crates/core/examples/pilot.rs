use sacnet_core::config::TrainConfig;
use sacnet_core::data::{gen_synthetic, write_dataset, DatasetMeta};
use sacnet_core::model::SacNetConfig;
use sacnet_core::train::run_training;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let dir = std::path::PathBuf::from("/tmp/pilot");
    let data_dir = dir.join("data");
    if !data_dir.join("manifest.txt").exists() {
        let samples = gen_synthetic(42, 250, 32, 4).unwrap();
        write_dataset(&data_dir, &samples, &DatasetMeta { count: 250, size: 32, classes: 4, seed: 42 }).unwrap();
    }
    let mut cfg = TrainConfig::default();
    cfg.model = SacNetConfig::toy(4);
    cfg.epochs = epochs;
    cfg.seed = 42;
    if args.get(2).map(|s| s == "f32").unwrap_or(false) { cfg.numeric_mode = sacnet_core::NumericMode::F32; }
    cfg.data_dir = data_dir;
    cfg.out_dir = dir.join(format!("out_{epochs}"));
    let t0 = Instant::now();
    let report = run_training(&cfg, None).unwrap();
    println!("epochs {} in {:.1}s", epochs, t0.elapsed().as_secs_f64());
    println!("best epoch {} mDSC {:.4}", report.best_epoch, report.best_mean_dsc);
    println!("best mIoU {:.4} per-class IoU {:?}", report.best.mean_iou, report.best.per_class_iou.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    let csv = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || i % 5 == 1 || i == csv.lines().count() - 1 {
            let cells: Vec<&str> = line.split(',').collect();
            println!("{}", cells[..6.min(cells.len())].join(","));
        }
    }
}
