//! Loss checks shared by the objectives tests and acceptance criterion 3.
//! Each function panics on failure.

use super::{normal, rng};
use masked_distill::objectives::{
    disc_loss, pixel_loss, rep_loss, smooth_l1, total_loss, LossBreakdown, LossWeights, PixelNorm,
};
use masked_distill::tensor::{layer_norm_rows, Tape, Tensor};
use rand::Rng as _;

const EPS: f64 = 1e-6;

fn ln(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter().map(|a| (a - m) / (v + EPS).sqrt()).collect()
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn rep_value(pred: &Tensor, teacher: &Tensor) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(pred.clone());
    let q = t.constant(teacher.clone());
    let l = rep_loss(&mut t, p, q, 1.0, EPS).unwrap();
    t.value(l).item().unwrap()
}

fn disc_value(teacher: &[f64], student: &[f64], temp: f64) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(1, teacher.len(), teacher.to_vec()).unwrap());
    let b = t.constant(Tensor::matrix(1, student.len(), student.to_vec()).unwrap());
    let l = disc_loss(&mut t, a, b, temp).unwrap();
    t.value(l).item().unwrap()
}

fn pixel_value(target: &Tensor, pred: &Tensor, norm: PixelNorm) -> f64 {
    let mut t = Tape::new();
    let a = t.constant(target.clone());
    let b = t.constant(pred.clone());
    let l = pixel_loss(&mut t, a, b, norm, EPS).unwrap();
    t.value(l).item().unwrap()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn entropy(x: &[f64]) -> f64 {
    softmax(x).iter().map(|p| -p * p.ln()).sum()
}

pub fn smooth_l1_examples() {
    assert_eq!(smooth_l1(&[0.3, -2.0], &[0.3, -2.0], 1.0).unwrap(), 0.0);
    assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
    assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
    assert!(smooth_l1(&[0.5], &[0.0, 1.0], 1.0).is_err());
}

pub fn rep_examples() {
    let teacher = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
    // Predictions equal to LN(teacher).
    let exact = Tensor::new(vec![2, 3], layer_norm_rows(teacher.data(), 3, EPS).0).unwrap();
    assert_eq!(rep_value(&exact, &teacher), 0.0);

    // One masked patch.
    let one_t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let one_p = Tensor::from_rows(&[vec![0.0, 0.4, -1.0]]).unwrap();
    let direct = smooth_l1(one_p.row(0), &ln(one_t.row(0)), 1.0).unwrap();
    assert!((rep_value(&one_p, &one_t) - direct).abs() < 1e-12);

    // Two masked patches summed by hand.
    let pred = Tensor::from_rows(&[vec![0.0, 0.4, -1.0], vec![2.0, -0.3, 0.1]]).unwrap();
    let mut sum = 0.0;
    for i in 0..2 {
        let t = ln(teacher.row(i));
        sum += (0..3).map(|k| huber(pred.at(i, k) - t[k])).sum::<f64>() / 3.0;
    }
    assert!((rep_value(&pred, &teacher) - sum / 2.0).abs() < 1e-12);

    let mut t = Tape::new();
    let e = t.constant(Tensor::zeros(&[0, 3]));
    let f = t.constant(Tensor::zeros(&[0, 3]));
    assert!(rep_loss(&mut t, e, f, 1.0, EPS).is_err());
}

pub fn disc_examples() {
    let teacher = [0.2, -1.0, 1.5];
    assert!((disc_value(&teacher, &teacher, 1.0) - entropy(&teacher)).abs() < 1e-12);

    let student = [0.5, -1.0, 2.0];
    let uniform = [0.7, 0.7, 0.7];
    let log_q: Vec<f64> = softmax(&student).iter().map(|q| q.ln()).collect();
    let mean = -log_q.iter().sum::<f64>() / 3.0;
    assert!((disc_value(&uniform, &student, 1.0) - mean).abs() < 1e-12);

    let p = softmax(&teacher);
    let direct: f64 = -(0..3).map(|i| p[i] * log_q[i]).sum::<f64>();
    assert!((disc_value(&teacher, &student, 1.0) - direct).abs() < 1e-12);
}

pub fn disc_entropy_bound(cases: usize) {
    let mut r = rng(31);
    for _ in 0..cases {
        let d = r.random_range(2..40);
        let teacher: Vec<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
        let student: Vec<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
        let h = entropy(&teacher);
        assert!(disc_value(&teacher, &student, 1.0) >= h - 1e-10);
        let shift = r.random_range(-5.0..5.0);
        let shifted: Vec<f64> = teacher.iter().map(|v| v + shift).collect();
        assert!((disc_value(&teacher, &shifted, 1.0) - h).abs() < 1e-10);
    }
}

pub fn pixel_examples() {
    let target = Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.0]]).unwrap();
    // LN(prediction) equal to target: an already normalized target.
    let pred = Tensor::from_rows(&[vec![1.75, -1.25, 4.75, 0.75]]).unwrap();
    let normed = Tensor::new(vec![1, 4], layer_norm_rows(pred.data(), 4, EPS).0).unwrap();
    assert_eq!(pixel_value(&normed, &pred, PixelNorm::PredictionLn), 0.0);

    let c = 0.3;
    let shifted = target.map(|v| v + c);
    assert!((pixel_value(&target, &shifted, PixelNorm::None) - c * c).abs() < 1e-12);

    // Prediction [1,2,3,4]: mean 2.5, variance 1.25.
    let p = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    let x = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 1.0]]).unwrap();
    let s = (1.25f64 + EPS).sqrt();
    let y = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
    let hand = (y[0] * y[0] + y[1] * y[1] + (y[2] - 1.0).powi(2) + (y[3] - 1.0).powi(2)) / 4.0;
    assert!((pixel_value(&x, &p, PixelNorm::PredictionLn) - hand).abs() < 1e-12);

    let mut t = Tape::new();
    let e = t.constant(Tensor::zeros(&[0, 4]));
    let f = t.constant(Tensor::zeros(&[0, 4]));
    assert!(pixel_loss(&mut t, e, f, PixelNorm::None, EPS).is_err());
}

/// Builds all three components from one shared parameter and returns the
/// total value, breakdown and its gradient.
fn total_with(weights: &LossWeights, seed: u64) -> (f64, LossBreakdown, Tensor, [Tensor; 3]) {
    let mut r = rng(seed);
    let w0 = normal(&[6, 5], &mut r);
    let feats = normal(&[3, 6], &mut r);
    let teacher = normal(&[3, 5], &mut r);
    let t_cls = normal(&[1, 5], &mut r);
    let pixels = normal(&[3, 5], &mut r);

    let mut t = Tape::new();
    let w = t.param(w0);
    let x = t.constant(feats);
    let y = t.matmul(x, w).unwrap();
    let tv = t.constant(teacher);
    let rep = rep_loss(&mut t, y, tv, 1.0, EPS).unwrap();
    let cls = t.gather_rows(y, &[0]).unwrap();
    let tc = t.constant(t_cls);
    let disc = disc_loss(&mut t, tc, cls, 1.0).unwrap();
    let px = t.constant(pixels);
    let pixel = pixel_loss(&mut t, px, y, PixelNorm::PredictionLn, EPS).unwrap();
    let total = total_loss(&mut t, weights, rep, disc, pixel).unwrap();
    let g = t.backward(total.loss).unwrap().get(w);
    let parts = [rep, disc, pixel].map(|v| t.backward(v).unwrap().get(w));
    (t.value(total.loss).item().unwrap(), total.breakdown, g, parts)
}

pub fn total_examples() {
    let (v, b, g, parts) = total_with(&LossWeights::new(1.0, 0.0, 0.0), 40);
    assert_eq!(v, b.rep);
    assert_eq!(b.total, b.rep);
    assert!(b.disc > 0.0 && b.pixel > 0.0);
    assert_eq!(g, parts[0]);

    let (v, b, g, _) = total_with(&LossWeights::new(0.0, 0.0, 0.0), 40);
    assert_eq!(v, 0.0);
    assert_eq!(b.total, 0.0);
    assert!(g.data().iter().all(|&x| x == 0.0));

    // Zero-weight pixel term: gradient is that of the other two only.
    let (_, _, g, parts) = total_with(&LossWeights::new(1.0, 0.3, 0.0), 40);
    for i in 0..g.len() {
        assert!((g.data()[i] - (parts[0].data()[i] + 0.3 * parts[1].data()[i])).abs() < 1e-12);
    }

    let (a, ba, _, _) = total_with(&LossWeights::new(1.0, 0.3, 0.02), 41);
    let (b, _, _, _) = total_with(&LossWeights::new(1.0, 0.3, 0.01), 41);
    assert!(((a - b) - 0.01 * ba.pixel).abs() < 1e-12);
}

pub fn decomposition(cases: usize) {
    let mut r = rng(50);
    for i in 0..cases {
        let w = LossWeights::new(r.random_range(0.0..2.0), r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        let (v, b, _, _) = total_with(&w, 1000 + i as u64);
        let sum = w.rep * b.rep + w.disc * b.disc + w.pixel * b.pixel;
        assert!((b.total - sum).abs() < 1e-12);
        assert!((v - sum).abs() < 1e-12);
    }
}

pub fn set_semantics() {
    let mut r = rng(60);
    let pred = normal(&[5, 7], &mut r);
    let teacher = normal(&[5, 7], &mut r);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    assert!((rep_value(&pred, &teacher) - rep_value(&permute(&pred), &permute(&teacher))).abs() < 1e-12);
    for norm in [PixelNorm::PredictionLn, PixelNorm::None, PixelNorm::TargetPerPatch] {
        let a = pixel_value(&teacher, &pred, norm);
        let b = pixel_value(&permute(&teacher), &permute(&pred), norm);
        assert!((a - b).abs() < 1e-12);
    }
}
