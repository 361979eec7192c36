#![allow(dead_code)]

pub mod loss_suite;

use masked_distill::rng::{substream, Rng};
use masked_distill::tensor::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Rng {
    substream(seed, &[0xC0FFEE])
}

pub fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn stochastic_rows(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for _ in 0..n {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Reference average linkage: merge distances recomputed from the raw
/// matrix at every step; ties go to the lexicographically smallest pair of
/// cluster minimum indices. Returns a group id per point.
pub fn brute_upgma(d: &[f64], n: usize, target: usize) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > target {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut s = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        s += d[i * n + j];
                    }
                }
                let avg = s / (clusters[a].len() * clusters[b].len()) as f64;
                let key = (clusters[a][0].min(clusters[b][0]), clusters[a][0].max(clusters[b][0]));
                let better = match best {
                    None => true,
                    Some((v, x, y)) => {
                        let cur = (clusters[x][0].min(clusters[y][0]), clusters[x][0].max(clusters[y][0]));
                        avg < v || (avg == v && key < cur)
                    }
                };
                if better {
                    best = Some((avg, a, b));
                }
            }
        }
        let (_, a, b) = best.unwrap();
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort();
        clusters.sort_by_key(|c| c[0]);
    }
    let mut groups = vec![0; n];
    for (g, c) in clusters.iter().enumerate() {
        for &i in c {
            groups[i] = g;
        }
    }
    groups
}

/// Exhaustive kNN: every similarity computed directly, neighbors chosen by
/// repeated arg-max, votes summed per class, classes ranked by repeated
/// arg-max with smaller index winning ties.
pub fn brute_knn(train: &[Vec<f64>], labels: &[usize], test: &[Vec<f64>], test_labels: &[usize], k: usize) -> (f64, f64) {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| if n > 0.0 { x / n } else { *x }).collect::<Vec<f64>>()
    };
    let classes = labels.iter().chain(test_labels).max().unwrap() + 1;
    let tr: Vec<Vec<f64>> = train.iter().map(|v| unit(v)).collect();
    let (mut h1, mut h5) = (0, 0);
    for (q, &y) in test.iter().zip(test_labels) {
        let q = unit(q);
        let sims: Vec<f64> = tr.iter().map(|t| t.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        let mut used = vec![false; sims.len()];
        let mut score = vec![0.0; classes];
        for _ in 0..k {
            let mut best = usize::MAX;
            for i in 0..sims.len() {
                if !used[i] && (best == usize::MAX || sims[i] > sims[best]) {
                    best = i;
                }
            }
            used[best] = true;
            score[labels[best]] += sims[best];
        }
        let mut taken = vec![false; classes];
        let mut ranked = Vec::new();
        for _ in 0..classes {
            let mut best = usize::MAX;
            for c in 0..classes {
                if !taken[c] && (best == usize::MAX || score[c] > score[best]) {
                    best = c;
                }
            }
            taken[best] = true;
            ranked.push(best);
        }
        h1 += (ranked[0] == y) as usize;
        h5 += ranked.iter().take(5).any(|&c| c == y) as usize;
    }
    let n = test.len() as f64;
    (100.0 * h1 as f64 / n, 100.0 * h5 as f64 / n)
}

/// Random symmetric zero-diagonal matrix; with `ties`, entries are small
/// integers so equal merge distances are common.
pub fn random_distance(n: usize, ties: bool, rng: &mut Rng) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if ties { rng.random_range(1..=3) as f64 } else { rng.random::<f64>() };
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}
