//! Reverse-mode gradients on a two-layer network, checked against central
//! differences.
//!
//! `cargo run --release --example autodiff`

use masked_distill::rng::substream;
use masked_distill::tensor::{Tape, Tensor};
use rand_distr::{Distribution, StandardNormal};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = substream(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// ½·Σ softmax(y²)·y with y = LN(gelu(x·W1)·W2), as a function of W1.
fn loss(x: &Tensor, w1: &Tensor, w2: &Tensor) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let w1v = tape.param(w1.clone());
    let w2 = tape.constant(w2.clone());
    let h = tape.matmul(x, w1v).unwrap();
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2).unwrap();
    let y = tape.layer_norm(y, 1e-6).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let soft = tape.softmax(sq);
    let weighted = tape.mul(soft, y).unwrap();
    let l = tape.sum(weighted);
    let l = tape.scale(l, 0.5);
    let mut g = tape.backward(l).unwrap();
    (tape.value(l).item().unwrap(), g.take(w1v))
}

fn main() {
    let x = random(&[4, 5], 1);
    let w1 = random(&[5, 6], 2);
    let w2 = random(&[6, 3], 3);
    let (value, grad) = loss(&x, &w1, &w2);
    println!("loss {value:.6}");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w1.len() {
        let mut plus = w1.clone();
        plus.data_mut()[i] += h;
        let mut minus = w1.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss(&x, &plus, &w2).0 - loss(&x, &minus, &w2).0) / (2.0 * h);
        let a = grad.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    println!("{} parameters, worst relative error {worst:.2e}", w1.len());
}
