//! Patch clustering for evolved masking.
//!
//! The distance between patches combines how differently they attend
//! (`‖A_i − A_j‖²` over last-layer attention rows) with how far apart they
//! sit on the patch lattice:
//!
//! ```text
//! D = ζ·D_attn + (1 − ζ)·B,   D ← ½(D + Dᵀ),   D_ii = 0
//! ```
//!
//! `D` then feeds average-linkage agglomerative clustering
//! ([`hierarchical_cluster`]). A spherical Gaussian mixture fitted by EM over
//! the raw attention rows ([`em_cluster`]) is the alternative clusterer.

mod em;
mod hierarchical;

use std::fmt::Write as _;

pub use em::{em_cluster, em_fit, EmFit, EM_VARIANCE_FLOOR};
pub use hierarchical::{hierarchical_cluster, hierarchical_cluster_with, Linkage};

use crate::error::{Error, Result};
use crate::masking::PatchGrid;
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-6;

/// Dense `n × n` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim("SquareMatrix::new", &[n, n], &[data.len()]));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        SquareMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Row-stochastic, nonnegative patch-to-patch attention (CLS removed).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(SquareMatrix);

impl AttentionMap {
    pub fn new(m: SquareMatrix) -> Result<Self> {
        for i in 0..m.n() {
            let row = m.row(i);
            if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Contract(format!("attention row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!("attention row {i} sums to {s}")));
            }
        }
        Ok(AttentionMap(m))
    }

    /// Drops the CLS row and column (index 0) of a `(N+1) × (N+1)` token
    /// attention matrix. With `renormalize`, each remaining row is rescaled to
    /// sum to one; without it the rows keep their raw mass and the
    /// row-stochastic check is skipped.
    pub fn from_token_attention(tokens: &Tensor<f64>, renormalize: bool) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
            return Err(Error::dim("AttentionMap::from_token_attention", shape, &[0, 0]));
        }
        let n = shape[0] - 1;
        let mut data = Vec::with_capacity(n * n);
        for i in 1..=n {
            let row = &tokens.row(i)[1..];
            if renormalize {
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|&x| x / s));
            } else {
                data.extend_from_slice(row);
            }
        }
        let m = SquareMatrix::new(n, data)?;
        if renormalize {
            Self::new(m)
        } else {
            Ok(AttentionMap(m))
        }
    }

    /// Elementwise mean of several maps of the same size.
    pub fn average(maps: &[AttentionMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Contract("average of no attention maps".into()))?;
        let n = first.n();
        let mut acc = vec![0.0; n * n];
        for m in maps {
            if m.n() != n {
                return Err(Error::dim("AttentionMap::average", &[n], &[m.n()]));
            }
            for (a, &x) in acc.iter_mut().zip(m.0.as_slice()) {
                *a += x;
            }
        }
        let k = maps.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(AttentionMap(SquareMatrix::new(n, acc)?))
    }

    pub fn n(&self) -> usize {
        self.0.n()
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Symmetric, zero-diagonal spatial proximity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionBias(SquareMatrix);

impl PositionBias {
    pub fn new(m: SquareMatrix) -> Result<Self> {
        if !m.is_symmetric() {
            return Err(Error::Contract("position bias must be symmetric".into()));
        }
        for i in 0..m.n() {
            if m.get(i, i) != 0.0 {
                return Err(Error::Contract("position bias diagonal must be zero".into()));
            }
            if m.row(i).iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Contract("position bias entries must lie in [0, 1]".into()));
            }
        }
        Ok(PositionBias(m))
    }

    pub fn n(&self) -> usize {
        self.0.n()
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }
}

/// Pairwise patch dissimilarity consumed by the clusterers.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(SquareMatrix);

impl DistanceMatrix {
    pub fn new(m: SquareMatrix) -> Result<Self> {
        if m.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("distance matrix has non-finite entries".into()));
        }
        Ok(DistanceMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.n()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }
}

/// Euclidean distance between patch centers on the `(row, col)` lattice,
/// divided by the lattice diameter.
pub fn position_bias_matrix(grid: &PatchGrid) -> PositionBias {
    let n = grid.len();
    let dr = grid.rows.saturating_sub(1) as f64;
    let dc = grid.cols.saturating_sub(1) as f64;
    let diameter = (dr * dr + dc * dc).sqrt();
    let m = SquareMatrix::from_fn(n, |i, j| {
        if diameter == 0.0 || i == j {
            return 0.0;
        }
        let (ri, ci) = grid.coords(i);
        let (rj, cj) = grid.coords(j);
        let a = ri.abs_diff(rj) as f64;
        let b = ci.abs_diff(cj) as f64;
        ((a * a + b * b).sqrt() / diameter).min(1.0)
    });
    PositionBias(m)
}

/// `D_attn[i][j] = ‖A_i − A_j‖²`.
pub fn attention_distance(attention: &AttentionMap) -> DistanceMatrix {
    let n = attention.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = attention
                .row(i)
                .iter()
                .zip(attention.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    DistanceMatrix(SquareMatrix { n, data })
}

/// `D = ζ·D_attn + (1 − ζ)·B`, symmetrized with a zeroed diagonal.
pub fn combine_distance(
    attn: &DistanceMatrix,
    bias: &PositionBias,
    zeta: f64,
) -> Result<DistanceMatrix> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::Config(format!("zeta {zeta} outside [0, 1]")));
    }
    let n = attn.n();
    if bias.n() != n {
        return Err(Error::dim("combine_distance", &[n, n], &[bias.n(), bias.n()]));
    }
    let mixed = SquareMatrix::from_fn(n, |i, j| {
        zeta * attn.get(i, j) + (1.0 - zeta) * bias.matrix().get(i, j)
    });
    let sym = SquareMatrix::from_fn(n, |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (mixed.get(i, j) + mixed.get(j, i))
        }
    });
    DistanceMatrix::new(sym)
}

/// Cluster label per patch. Labels are `0..clusters`, numbered in order of
/// each cluster's smallest patch index, and every cluster is nonempty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    clusters: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, clusters: usize) -> Result<Self> {
        let mut seen = vec![false; clusters];
        for &l in &labels {
            if l >= clusters {
                return Err(Error::Bounds {
                    op: "ClusterAssignment::new",
                    index: l,
                    len: clusters,
                });
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("cluster {c} is empty")));
        }
        Ok(ClusterAssignment { labels, clusters })
    }

    /// Relabels arbitrary group ids so clusters are numbered by first appearance.
    pub fn canonical(groups: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = groups
            .iter()
            .map(|g| {
                let next = map.len();
                *map.entry(*g).or_insert(next)
            })
            .collect();
        ClusterAssignment {
            labels,
            clusters: map.len(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Patch indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// `patch_index,label` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch_index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}
