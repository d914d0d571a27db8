//! Isolated timings for the raw convolution kernels (no tape overhead).

use std::time::Instant;

use rand::Rng;
use strabscreen_core::rng::seeded;
use strabscreen_core::tensor::bench_conv_raw;

fn main() {
    let mut rng = seeded(1);
    let mut mk = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen::<f64>() - 0.5).collect() };

    for (name, ci, h, w, co, stride, reps) in [
        ("conv1 [3,254,318]->16", 3usize, 254usize, 318usize, 16usize, 1usize, 20usize),
        ("conv2 [16,127,159]->32", 16, 127, 159, 32, 1, 20),
        ("conv3 [32,62,78]->64 s2", 32, 62, 78, 64, 2, 20),
        ("cls conv2 [16,31,31]->32", 16, 31, 31, 32, 1, 200),
    ] {
        let input = mk(ci * h * w);
        let kernels = mk(co * ci * 9);
        let bias = mk(co);
        let (fwd_ms, bwd_ms, sink) = bench_conv_raw(&input, (ci, h, w), &kernels, (co, 3, 3), &bias, stride, reps);
        let ho = (h - 3) / stride + 1;
        let wo = (w - 3) / stride + 1;
        let flop = 2.0 * (ho * wo * co * ci * 9) as f64;
        println!(
            "{name}: fwd {fwd_ms:.1} ms ({:.2} GFLOP/s), bwd {bwd_ms:.1} ms ({:.2} GFLOP/s eq) [{sink:.2}]",
            flop / (fwd_ms / 1e3) / 1e9,
            2.0 * flop / (bwd_ms / 1e3) / 1e9
        );
    }
    let _ = Instant::now();
}
