//! Microbenchmark of the convolution kernels at the shapes the desk-scale
//! profile actually runs, printing achieved GFLOP/s per full pass
//! (forward + weight gradient + input gradient).

use std::time::Instant;

use cofsep::autodiff::Tape;
use cofsep::tensor::Tensor;

fn bench(label: &str, c_in: usize, c_out: usize, hw: usize, k: usize, stride: usize, reps: usize) {
    let pad = k / 2;
    let x = Tensor::full(&[c_in, hw, hw], 0.5);
    let w = Tensor::full(&[c_out, c_in, k, k], 0.01);
    let b = Tensor::zeros(&[c_out]);
    let start = Instant::now();
    let mut out_hw = 0;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), true);
        let wi = tape.leaf(w.clone(), true);
        let bi = tape.leaf(b.clone(), true);
        let y = tape.conv2d(xi, wi, bi, stride, pad, 1);
        out_hw = tape.value(y).shape()[1];
        let loss = tape.sum_all(y);
        let _ = tape.backward(loss);
    }
    let secs = start.elapsed().as_secs_f64();
    let macs = (c_out * c_in * k * k * out_hw * out_hw) as f64 * reps as f64;
    let gflops = 3.0 * 2.0 * macs / secs / 1e9;
    println!(
        "{label:<28} {out_hw:>4}^2 out  {:>8.2} ms/rep  {gflops:>6.2} GFLOP/s",
        1e3 * secs / reps as f64
    );
}

fn main() {
    bench("unet enc 1->8  64->32 s2 k4", 1, 8, 64, 4, 2, 50);
    bench("unet enc 8->16 32->16 s2 k4", 8, 16, 32, 4, 2, 50);
    bench("unet dec 24->8 32x32 k3", 24, 8, 32, 3, 1, 50);
    bench("unet dec 8->8 64x64 k3", 8, 8, 64, 3, 1, 50);
    bench("head 8->16 64x64 k1", 8, 16, 64, 1, 1, 50);
    bench("stem 3->8 64->32 s2 k7", 3, 8, 64, 7, 2, 50);
    bench("block 16->16 8x8 k3", 16, 16, 8, 3, 1, 200);
    bench("block 64->64 4x4 k3", 64, 64, 4, 3, 1, 200);
}
