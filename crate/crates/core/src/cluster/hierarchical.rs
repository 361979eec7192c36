//! Average-linkage (UPGMA) agglomerative clustering.

use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, DistanceMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    /// Full rescan of all cluster pairs after every merge, O(N³).
    #[default]
    Naive,
    /// Nearest-neighbor chain, O(N²). Agrees with `Naive` whenever the
    /// merge distances are free of exact ties.
    NnChain,
}

/// Merges clusters with the smallest mean pairwise distance until `target`
/// remain. Ties go to the pair with the lexicographically smallest
/// `(min index, min index)`.
pub fn hierarchical_cluster(d: &DistanceMatrix, target: usize) -> Result<ClusterAssignment> {
    hierarchical_cluster_with(d, target, Linkage::Naive)
}

pub fn hierarchical_cluster_with(
    d: &DistanceMatrix,
    target: usize,
    linkage: Linkage,
) -> Result<ClusterAssignment> {
    let n = d.n();
    if target == 0 || target > n {
        return Err(Error::Config(format!(
            "cannot form {target} clusters from {n} patches"
        )));
    }
    let groups = match linkage {
        Linkage::Naive => naive(d, target),
        Linkage::NnChain => nn_chain(d, target),
    };
    Ok(ClusterAssignment::canonical(&groups))
}

/// Each cluster lives in the slot of its smallest member, so comparing slots
/// is comparing minimum indices. `sums[a][b]` holds the total raw distance
/// between the members of `a` and `b`; sums of exactly representable values
/// stay exact, which keeps tie detection stable.
fn naive(d: &DistanceMatrix, target: usize) -> Vec<usize> {
    let n = d.n();
    let mut sums: Vec<f64> = d.matrix().as_slice().to_vec();
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut owner: Vec<usize> = (0..n).collect();

    while active.len() > target {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                let avg = sums[a * n + b] / (size[a] * size[b]) as f64;
                if avg < best.0 {
                    best = (avg, a, b);
                }
            }
        }
        let (_, a, b) = best;
        for &c in &active {
            if c != a && c != b {
                let merged = sums[a * n + c] + sums[b * n + c];
                sums[a * n + c] = merged;
                sums[c * n + a] = merged;
            }
        }
        size[a] += size[b];
        active.retain(|&x| x != b);
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
    }
    owner
}

fn nn_chain(d: &DistanceMatrix, target: usize) -> Vec<usize> {
    let n = d.n();
    let mut dist: Vec<f64> = d.matrix().as_slice().to_vec();
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(n.saturating_sub(1));

    while remaining > 1 {
        if chain.is_empty() {
            chain.push(alive.iter().position(|&x| x).expect("a live cluster"));
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = (f64::INFINITY, usize::MAX);
            if let Some(p) = prev {
                best = (dist[a * n + p], p);
            }
            for c in 0..n {
                if !alive[c] || c == a {
                    continue;
                }
                let v = dist[a * n + c];
                if v < best.0 || (v == best.0 && Some(best.1) != prev && c < best.1) {
                    best = (v, c);
                }
            }
            let b = best.1;
            if Some(b) == prev {
                break;
            }
            chain.push(b);
        }
        let a = chain.pop().unwrap();
        let b = chain.pop().unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        merges.push((dist[lo * n + hi], lo, hi));
        let (sl, sh) = (size[lo] as f64, size[hi] as f64);
        for c in 0..n {
            if alive[c] && c != lo && c != hi {
                let v = (sl * dist[lo * n + c] + sh * dist[hi * n + c]) / (sl + sh);
                dist[lo * n + c] = v;
                dist[c * n + lo] = v;
            }
        }
        size[lo] += size[hi];
        alive[hi] = false;
        remaining -= 1;
    }

    // Replay the cheapest n - target merges. Average linkage is monotone, so
    // sorting by height recovers the agglomeration order.
    merges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(_, lo, hi) in merges.iter().take(n - target) {
        let (ra, rb) = (find(&mut parent, lo), find(&mut parent, hi));
        let (keep, drop) = (ra.min(rb), ra.max(rb));
        parent[drop] = keep;
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SquareMatrix;

    fn line(points: &[f64]) -> DistanceMatrix {
        let n = points.len();
        DistanceMatrix::new(SquareMatrix::from_fn(n, |i, j| (points[i] - points[j]).abs())).unwrap()
    }

    #[test]
    fn extremes() {
        let d = line(&[0.0, 1.0, 5.0, 6.5, 20.0]);
        let all = hierarchical_cluster(&d, 5).unwrap();
        assert_eq!(all.labels(), &[0, 1, 2, 3, 4]);
        let one = hierarchical_cluster(&d, 1).unwrap();
        assert!(one.labels().iter().all(|&l| l == 0));
        assert!(hierarchical_cluster(&d, 6).is_err());
        assert!(hierarchical_cluster(&d, 0).is_err());
    }

    #[test]
    fn groups_on_a_line() {
        let d = line(&[0.0, 0.5, 10.0, 10.4, 30.0]);
        let a = hierarchical_cluster(&d, 3).unwrap();
        assert_eq!(a.labels(), &[0, 0, 1, 1, 2]);
        let b = hierarchical_cluster_with(&d, 3, Linkage::NnChain).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_prefer_smallest_pair() {
        // All pairwise distances equal: merges go (0,1), then ({0,1},2), ...
        let d = DistanceMatrix::new(SquareMatrix::from_fn(4, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(hierarchical_cluster(&d, 3).unwrap().labels(), &[0, 0, 1, 2]);
        assert_eq!(hierarchical_cluster(&d, 2).unwrap().labels(), &[0, 0, 0, 1]);
    }
}
