use sacnet_core::model::{SacNetConfig, SacNetModel};
use sacnet_core::nn;
use sacnet_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let model = SacNetModel::<f64>::new(SacNetConfig::paper(9), 0).unwrap();
    println!("build: {:.1}s, params {}", t0.elapsed().as_secs_f64(), model.count_parameters().total);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img: Tensor<f64> = nn::trunc_normal(&mut rng, &[1, 3, 224, 224], 0.5);
    let t0 = Instant::now();
    let probs = model.predict(&img).unwrap();
    println!("forward: {:.1}s, out {:?}", t0.elapsed().as_secs_f64(), probs.shape());
}
