use sacnet_core::ops::Op;
use sacnet_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench(name: &str, op: Op<f64>, inputs: &[&Tensor<f64>], needs: &[bool], iters: usize) {
    let out = op.eval(inputs).unwrap();
    let gout = Tensor::full(out.shape(), 1.0);
    let t0 = Instant::now();
    for _ in 0..iters { let _ = op.eval(inputs).unwrap(); }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let t0 = Instant::now();
    for _ in 0..iters { let _ = op.vjp(inputs, &out, &gout, needs).unwrap(); }
    let bwd = t0.elapsed().as_secs_f64() / iters as f64;
    println!("{name:<36} fwd {:>8.3}ms bwd {:>8.3}ms", fwd*1e3, bwd*1e3);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // decoder block 4 scale: 16ch @ 16x16, batch 8
    let x = rt(&mut rng, &[8, 16, 16, 16]);
    let w_off = rt(&mut rng, &[36, 16, 3, 3]);
    let b_off = rt(&mut rng, &[36]);
    bench("conv3x3 16->36 @16x16", Op::Conv2d { stride: 1, pad: 1 }, &[&x, &w_off, &b_off], &[true, true, true], 50);
    let w1 = rt(&mut rng, &[64, 16, 1, 1]);
    let b1 = rt(&mut rng, &[64]);
    bench("conv1x1 16->64 @16x16", Op::Conv2d { stride: 1, pad: 0 }, &[&x, &w1, &b1], &[true, true, true], 50);
    let g = rt(&mut rng, &[16]);
    let be = rt(&mut rng, &[16]);
    bench("layernorm 16ch @16x16", Op::LayerNorm { axis: 1, eps: 1e-6 }, &[&x, &g, &be], &[true, true, true], 50);
    bench("gelu @8x64x16x16", Op::Gelu, &[&rt(&mut rng, &[8,64,16,16])], &[true], 50);
    let off = rt(&mut rng, &[8, 2, 9, 2, 16, 16]);
    let md = {
        let t = rt(&mut rng, &[8, 2, 9, 16, 16]);
        Op::Softmax { axis: 2 }.eval(&[&t]).unwrap()
    };
    let proj = rt(&mut rng, &[2, 16, 8]);
    bench("dcn 16ch G2 @16x16", Op::DcnCore { groups: 2, points: 9 }, &[&x, &off, &md, &proj], &[true, true, true, true], 50);
    bench("softmax K @[8,2,9,16,16]", Op::Softmax { axis: 2 }, &[&rt(&mut rng, &[8,2,9,16,16])], &[true], 50);
    bench("resize 8x8->16x16 (16ch)", Op::BilinearResize { out_h: 16, out_w: 16 }, &[&rt(&mut rng, &[8,16,8,8])], &[true], 50);
    // head resize 16->32 over 4 classes
    bench("resize 16->32 (4ch)", Op::BilinearResize { out_h: 32, out_w: 32 }, &[&rt(&mut rng, &[8,4,16,16])], &[true], 50);
    bench("softmax classes @[8,4,32,32]", Op::Softmax { axis: 1 }, &[&rt(&mut rng, &[8,4,32,32])], &[true], 50);
}
