use csformer::model::{window_msa, ModelConfig, ModelParams};
use csformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn timeit<R>(name: &str, reps: usize, mut f: impl FnMut() -> R) {
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{name}: {:?}/iter", t0.elapsed() / reps as u32);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = 16usize;
    let (h, w) = (128usize, 128usize);
    let x = Tensor::<f32>::from_fn(vec![1, c, h, w], |_| rng.random::<f32>());
    let gamma = Tensor::<f32>::full(vec![c], 1.0);
    let beta = Tensor::<f32>::zeros(vec![c]);
    timeit("layer_norm 16x128x128", 20, || x.layer_norm(&gamma, &beta, 1e-6).unwrap());

    let w1x1 = Tensor::<f32>::from_fn(vec![2 * c, c, 1, 1], |_| rng.random::<f32>());
    timeit("conv1x1 16->32 @128^2", 20, || x.conv2d(&w1x1, None, 1, 0, 1).unwrap());

    let wd = Tensor::<f32>::from_fn(vec![c, 1, 3, 3], |_| rng.random::<f32>());
    timeit("depthwise3x3 16 @128^2", 20, || x.conv2d(&wd, None, 1, 1, c).unwrap());

    let w3 = Tensor::<f32>::from_fn(vec![c, c, 3, 3], |_| rng.random::<f32>());
    timeit("conv3x3 16->16 @128^2", 20, || x.conv2d(&w3, None, 1, 1, 1).unwrap());

    timeit("pixel_unshuffle", 50, || x.pixel_unshuffle(2).unwrap());
    timeit("roll2d", 50, || x.roll2d(-4, -4).unwrap());
    timeit("window_partition", 50, || x.window_partition(8).unwrap());
    timeit("gelu @16x128^2", 20, || x.gelu().unwrap());
    timeit("mul same", 50, || x.mul(&x).unwrap());

    let cfg = ModelConfig::nano();
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let x8 = Tensor::<f32>::from_fn(vec![1, 8, 128, 128], |_| rng.random::<f32>());
    timeit("window_msa lvl1 d8 @128^2", 10, || {
        window_msa(&x8, &params.encoder[0][0].msa, 1, 8, 0, None).unwrap()
    });
}
