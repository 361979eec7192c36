//! Weighted kNN over cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracies in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub top1: f64,
    pub top5: f64,
}

fn normalized(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.clone()
            }
        })
        .collect()
}

/// Classes ranked for one query: the `k` most similar training rows (ties by
/// lower index) each vote their similarity for their class; classes are
/// ordered by total vote, ties by lower class index.
pub fn knn_rank(train: &[Vec<f64>], labels: &[usize], classes: usize, query: &[f64], k: usize) -> Vec<usize> {
    let train = normalized(train);
    let q = &normalized(&[query.to_vec()])[0];
    rank(&train, labels, classes, q, k)
}

fn rank(train: &[Vec<f64>], labels: &[usize], classes: usize, q: &[f64], k: usize) -> Vec<usize> {
    let sims: Vec<f64> = train
        .iter()
        .map(|t| t.iter().zip(q).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut score = vec![0.0; classes];
    for &i in &order[..k] {
        score[labels[i]] += sims[i];
    }
    let mut ranked: Vec<usize> = (0..classes).collect();
    ranked.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    ranked
}

pub fn knn_eval(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<KnnResult> {
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::dim("knn_eval", &[train.len(), test.len()], &[train_labels.len(), test_labels.len()]));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k = {k} needs 1 <= k <= {} training points", train.len())));
    }
    if test.is_empty() {
        return Err(Error::Config("knn_eval needs at least one test point".into()));
    }
    let dim = train[0].len();
    if let Some(bad) = train.iter().chain(test).find(|r| r.len() != dim) {
        return Err(Error::dim("knn_eval", &[dim], &[bad.len()]));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&m| m + 1);
    let train_n = normalized(train);
    let test_n = normalized(test);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (q, &label) in test_n.iter().zip(test_labels) {
        let ranked = rank(&train_n, train_labels, classes, q, k);
        if ranked[0] == label {
            hit1 += 1;
        }
        if ranked.iter().take(5).any(|&c| c == label) {
            hit5 += 1;
        }
    }
    let n = test.len() as f64;
    Ok(KnnResult {
        top1: 100.0 * hit1 as f64 / n,
        top5: 100.0 * hit5 as f64 / n,
    })
}
