//! Times one training step (forward + backward) and one eval forward.
//!
//! `cargo run --release -p fundus-nn --example bench_step -- [batch] [size]`

use std::time::Instant;

use fundus_nn::{EfficientNetB0, Mode, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let batch = args.next().unwrap_or(8);
    let size = args.next().unwrap_or(224);
    let mut net = EfficientNetB0::new(0);
    let x = Tensor::from_vec(
        [batch, 3, size, size],
        (0..batch * 3 * size * size).map(|i| ((i % 255) as f32 / 127.0) - 1.0).collect(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for step in 0..3 {
        let t = Instant::now();
        net.zero_grad();
        let f = net.forward(x.clone(), &mut Mode::Train(&mut rng));
        let fwd = t.elapsed();
        net.backward(&vec![1.0 / f.len() as f32; f.len()]);
        println!("step {step}: forward {fwd:?}, total {:?}", t.elapsed());
    }
    let t = Instant::now();
    net.forward(x, &mut Mode::Eval);
    println!("eval forward {:?}", t.elapsed());
}
