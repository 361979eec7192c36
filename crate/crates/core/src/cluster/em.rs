//! Spherical Gaussian mixture over attention rows, fitted by EM.

use rand::Rng as _;

use super::{AttentionMap, ClusterAssignment};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower bound on every component variance.
pub const EM_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct EmFit {
    pub assignment: ClusterAssignment,
    /// Mixture log-likelihood at the initial parameters and after every
    /// M-step (`iters + 1` entries).
    pub log_likelihood: Vec<f64>,
}

pub fn em_cluster(
    attention: &AttentionMap,
    clusters: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<ClusterAssignment> {
    Ok(em_fit(attention, clusters, iters, rng)?.assignment)
}

struct Mixture {
    means: Vec<Vec<f64>>,
    vars: Vec<f64>,
    log_weights: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// k-means++ seeding.
fn seed_means(x: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = x.iter().map(|p| sq_dist(p, x[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        for (i, p) in x.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, x[pick]));
        }
    }
    chosen.into_iter().map(|i| x[i].to_vec()).collect()
}

impl Mixture {
    fn log_components(&self, point: &[f64], out: &mut [f64]) {
        let d = point.len() as f64;
        for (c, o) in out.iter_mut().enumerate() {
            let var = self.vars[c];
            *o = self.log_weights[c]
                - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                - sq_dist(point, &self.means[c]) / (2.0 * var);
        }
    }

    /// E-step. Returns the log-likelihood and fills `resp` (`n × k`).
    fn expect(&self, x: &[&[f64]], resp: &mut [f64]) -> f64 {
        let k = self.means.len();
        let mut ll = 0.0;
        let mut buf = vec![0.0; k];
        for (i, p) in x.iter().enumerate() {
            self.log_components(p, &mut buf);
            let lse = log_sum_exp(&buf);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (buf[c] - lse).exp();
            }
        }
        ll
    }

    fn maximize(&mut self, x: &[&[f64]], resp: &[f64]) {
        let k = self.means.len();
        let n = x.len();
        let d = x[0].len();
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk <= 0.0 {
                self.log_weights[c] = f64::NEG_INFINITY;
                continue;
            }
            let mut mean = vec![0.0; d];
            for (i, p) in x.iter().enumerate() {
                let r = resp[i * k + c];
                if r == 0.0 {
                    continue;
                }
                for (m, &v) in mean.iter_mut().zip(p.iter()) {
                    *m += r * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let spread: f64 = x
                .iter()
                .enumerate()
                .map(|(i, p)| resp[i * k + c] * sq_dist(p, &mean))
                .sum();
            self.vars[c] = (spread / (nk * d as f64)).max(EM_VARIANCE_FLOOR);
            self.means[c] = mean;
            self.log_weights[c] = (nk / n as f64).ln();
        }
    }
}

/// Fits a `clusters`-component spherical GMM to the attention rows with
/// k-means++ initialization, runs `iters` EM iterations, then hard-assigns
/// each patch to its most responsible component. Components left without
/// members take the point farthest from its own mean.
pub fn em_fit(
    attention: &AttentionMap,
    clusters: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<EmFit> {
    let n = attention.n();
    if clusters == 0 || clusters > n {
        return Err(Error::Config(format!(
            "cannot form {clusters} clusters from {n} patches"
        )));
    }
    if iters == 0 {
        return Err(Error::Config("em_cluster needs at least one iteration".into()));
    }
    let x: Vec<&[f64]> = (0..n).map(|i| attention.row(i)).collect();
    let d = n as f64;
    let means = seed_means(&x, clusters, rng);
    let spread: f64 = x
        .iter()
        .map(|p| means.iter().map(|m| sq_dist(p, m)).fold(f64::INFINITY, f64::min))
        .sum();
    let var0 = (spread / (n as f64 * d)).max(EM_VARIANCE_FLOOR);
    let mut mix = Mixture {
        means,
        vars: vec![var0; clusters],
        log_weights: vec![-(clusters as f64).ln(); clusters],
    };

    let mut resp = vec![0.0; n * clusters];
    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        history.push(mix.expect(&x, &mut resp));
        mix.maximize(&x, &resp);
    }
    history.push(mix.expect(&x, &mut resp));

    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            let row = &resp[i * clusters..(i + 1) * clusters];
            let mut best = 0;
            for c in 1..clusters {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();

    let mut counts = vec![0usize; clusters];
    labels.iter().for_each(|&l| counts[l] += 1);
    for c in 0..clusters {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..n)
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(x[a], &mix.means[labels[a]]);
                let db = sq_dist(x[b], &mix.means[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("clusters <= n leaves a donor");
        counts[labels[far]] -= 1;
        labels[far] = c;
        counts[c] = 1;
        mix.means[c] = x[far].to_vec();
    }

    Ok(EmFit {
        assignment: ClusterAssignment::canonical(&labels),
        log_likelihood: history,
    })
}
