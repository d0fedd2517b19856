use sacnet_core::config::TrainConfig;
use sacnet_core::data::gen_synthetic;
use sacnet_core::losses::{ct_loss, onehot_from_labels, CtLossConfig, KappaState};
use sacnet_core::model::{SacNetConfig, SacNetModel};
use sacnet_core::nn::{Binder, Mode};
use sacnet_core::tape::{Ctx, Tape};
use sacnet_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = TrainConfig::default();
    let model = SacNetModel::<f64>::new(SacNetConfig::toy(4), 42).unwrap();
    let data = gen_synthetic(42, 8, 32, 4).unwrap();
    let ks = KappaState::init(4, 32.0).unwrap();
    let lcfg = CtLossConfig::new(0.6, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let _ = &cfg;

    // batch build
    let s = 32;
    let b = 8;
    let mut img = vec![0.0f64; b * 3 * s * s];
    let mut labels = vec![0u8; b * s * s];
    for (i, sample) in data.iter().enumerate() {
        for (k, &v) in sample.image.iter().enumerate() { img[i*3*s*s+k] = v; }
        labels[i*s*s..(i+1)*s*s].copy_from_slice(&sample.mask);
    }
    let img = Tensor::new(vec![b,3,s,s], img).unwrap();
    let onehot = onehot_from_labels::<f64>(&labels, b, 4, s, s).unwrap();

    for trial in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let x = Ctx::<f64>::leaf(&mut tape, img.clone());
        let probs = model.model_forward(&mut tape, &mut binder, x, Mode::Train, Some(&mut rng)).unwrap();
        let t_fwd = t0.elapsed();
        let y = Ctx::<f64>::constant(&mut tape, onehot.clone());
        let loss = ct_loss(&mut tape, probs, y, &ks, &lcfg).unwrap();
        let t1 = Instant::now();
        tape.backward(loss).unwrap();
        let t_bwd = t1.elapsed();
        println!("trial {trial}: fwd {:.0}ms bwd {:.0}ms nodes {}", t_fwd.as_secs_f64()*1e3, t_bwd.as_secs_f64()*1e3, tape.len());
    }

    // eval timing
    let t0 = Instant::now();
    for sample in &data { model.predict(&sample.image_tensor()).unwrap(); }
    println!("predict x8: {:.0}ms", t0.elapsed().as_secs_f64()*1e3);
}
