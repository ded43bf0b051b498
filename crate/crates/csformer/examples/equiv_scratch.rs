// scratch check
use csformer::inference::{infer_baseline, infer_full_image};
use csformer::model::{ModelConfig, ModelParams};
use csformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig::nano();
    // Random weights, not the zeroed output conv.
    let params = ModelParams::<f32>::init(&cfg, 99).unwrap();
    let params = params.map_leaves(&mut |name: &str, t: &Tensor<f32>| {
        if name == "output.weight" {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            Ok(Tensor::from_fn(t.shape().to_vec(), |_| rng.random::<f32>() * 0.1 - 0.05))
        } else {
            Ok(t.clone())
        }
    }).unwrap();
    for &(h, w) in &[(16usize, 16usize), (17, 23), (100, 100), (128, 128)] {
        let mut rng = ChaCha8Rng::seed_from_u64(h as u64 * 1000 + w as u64);
        let img = Tensor::<f32>::from_fn(vec![1, 3, h, w], |_| rng.random::<f32>());
        let t0 = std::time::Instant::now();
        let a = infer_full_image(&img, &params, &cfg).unwrap();
        let t1 = t0.elapsed();
        let t0b = std::time::Instant::now();
        let b = infer_baseline(&img, &params, &cfg).unwrap();
        let t1b = t0b.elapsed();
        let diff = a.restored.max_abs_diff(&b.restored);
        println!("{}x{}: diff={:e} bit_eq={} ours={:?} base={:?} macs {} vs {}",
            h, w, diff, a.restored.bit_eq(&b.restored), t1, t1b,
            a.macs.total.total(), b.macs.total.total());
    }
}
