use sacnet_core::config::TrainConfig;
use sacnet_core::data::{gen_synthetic, write_dataset, DatasetMeta};
use sacnet_core::model::SacNetConfig;
use sacnet_core::train::run_training;

fn main() {
    let dir = std::path::PathBuf::from("/tmp/ablation");
    let data_dir = dir.join("data");
    if !data_dir.join("manifest.txt").exists() {
        let samples = gen_synthetic(42, 250, 32, 4).unwrap();
        write_dataset(&data_dir, &samples, &DatasetMeta { count: 250, size: 32, classes: 4, seed: 42 }).unwrap();
    }
    for seed in [42u64, 43, 44] {
        let mut results = Vec::new();
        for (name, kmax) in [("ct", 32.0), ("fixed", 0.0)] {
            let mut cfg = TrainConfig::default();
            cfg.model = SacNetConfig::toy(4);
            cfg.epochs = 60;
            cfg.seed = seed;
            cfg.kappa_max = kmax;
            cfg.numeric_mode = sacnet_core::NumericMode::F32;
            cfg.data_dir = data_dir.clone();
            cfg.out_dir = dir.join(format!("out_{seed}_{name}"));
            let t0 = std::time::Instant::now();
            let report = run_training(&cfg, None).unwrap();
            // final-epoch (not best) worst-class IoU from the CSV last row
            let csv = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
            let last = csv.lines().last().unwrap();
            let cells: Vec<f64> = last.split(',').map(|c| c.parse().unwrap()).collect();
            let worst = cells[6..10].iter().cloned().fold(f64::INFINITY, f64::min);
            println!("seed {seed} {name:<5} kmax {kmax:>4}: worst-class IoU(ep60) {worst:.4} mIoU {:.4} best mDSC {:.4} [{:.0}s]",
                cells[3], report.best_mean_dsc, t0.elapsed().as_secs_f64());
            results.push(worst);
        }
        println!("seed {seed}: ct {} fixed ({})", if results[0] >= results[1] { ">= wins" } else { "< LOSES" }, results[0] - results[1]);
    }
}
