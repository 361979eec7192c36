use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{
    alpha_schedule, blend_probabilities, masked_count, BinaryMask, MaskProbabilities,
    MaskSchedule, PatchGrid,
};
use crate::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest rectangle area sampled by [`block_mask`], in patches.
pub const BLOCK_MIN_AREA: usize = 4;
/// Rectangle aspect ratios are drawn log-uniformly from `[1/BLOCK_MAX_ASPECT, BLOCK_MAX_ASPECT]`.
pub const BLOCK_MAX_ASPECT: f64 = 1.0 / 0.3;
/// Relative jitter used by [`sample_mask`] to break probability ties.
pub const SAMPLE_JITTER: f64 = 1e-9;

const MAX_GRID_PERIOD: usize = 8;
const MAX_BLOCK_ATTEMPTS: usize = 10_000;

/// Marks additional row-major cells (or clears trailing ones) until exactly
/// `target` are set.
fn enforce_count_row_major(bits: &mut [bool], target: usize) {
    let mut count = bits.iter().filter(|&&b| b).count();
    if count > target {
        for b in bits.iter_mut().rev() {
            if count == target {
                break;
            }
            if *b {
                *b = false;
                count -= 1;
            }
        }
    } else {
        for b in bits.iter_mut() {
            if count == target {
                break;
            }
            if !*b {
                *b = true;
                count += 1;
            }
        }
    }
}

/// Period `p` and masked residue count `q` with `q/p` closest to `ratio`.
fn grid_period(ratio: f64) -> (usize, usize) {
    let mut best = (2, 1);
    let mut best_err = f64::INFINITY;
    for p in 2..=MAX_GRID_PERIOD {
        let q = ((ratio * p as f64).round() as usize).clamp(1, p - 1);
        let err = (q as f64 / p as f64 - ratio).abs();
        if err < best_err - 1e-12 {
            best = (p, q);
            best_err = err;
        }
    }
    best
}

/// Deterministic periodic mask: cell `(row, col)` is masked when
/// `(row·s + col) mod p < q`, with `q/p ≈ ratio` and `s = max(1, p/2)`, then
/// trimmed or filled in row-major order to the exact count.
pub fn grid_mask(grid: &PatchGrid, ratio: f64) -> Result<BinaryMask> {
    let n = grid.len();
    let target = masked_count(n, ratio)?;
    let (p, q) = grid_period(ratio);
    let stride = (p / 2).max(1);
    let mut bits: Vec<bool> = (0..n)
        .map(|i| {
            let (r, c) = grid.coords(i);
            (r * stride + c) % p < q
        })
        .collect();
    enforce_count_row_major(&mut bits, target);
    BinaryMask::new(bits, ratio)
}

/// Indicator of [`grid_mask`] as a probability vector.
pub fn grid_probabilities(grid: &PatchGrid, ratio: f64) -> Result<MaskProbabilities> {
    let mask = grid_mask(grid, ratio)?;
    MaskProbabilities::new(
        mask.bits()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Uniform sample of `round(r·N)` patches without replacement.
pub fn random_mask(grid: &PatchGrid, ratio: f64, rng: &mut Rng) -> Result<BinaryMask> {
    let n = grid.len();
    let target = masked_count(n, ratio)?;
    let mut bits = vec![false; n];
    for i in rand::seq::index::sample(rng, n, target) {
        bits[i] = true;
    }
    BinaryMask::new(bits, ratio)
}

/// Accumulates random axis-aligned rectangles until `round(r·N)` patches are
/// masked. Areas are drawn from `[BLOCK_MIN_AREA, max(remaining, BLOCK_MIN_AREA)]`
/// and aspect ratios log-uniformly; the block that crosses the target is
/// trimmed in row-major order.
pub fn block_mask(grid: &PatchGrid, ratio: f64, rng: &mut Rng) -> Result<BinaryMask> {
    let n = grid.len();
    let target = masked_count(n, ratio)?;
    let mut bits = vec![false; n];
    let mut count = 0;
    let log_aspect = BLOCK_MAX_ASPECT.ln();
    let min_area = BLOCK_MIN_AREA.min(n);

    for _ in 0..MAX_BLOCK_ATTEMPTS {
        if count == target {
            break;
        }
        let remaining = target - count;
        let max_area = remaining.max(min_area).min(n);
        let area = rng.random_range(min_area..=max_area) as f64;
        let aspect = rng.random_range(-log_aspect..log_aspect).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, grid.rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, grid.cols);
        let top = rng.random_range(0..=grid.rows - h);
        let left = rng.random_range(0..=grid.cols - w);
        'rect: for r in top..top + h {
            for c in left..left + w {
                let i = r * grid.cols + c;
                if !bits[i] {
                    bits[i] = true;
                    count += 1;
                    if count == target {
                        break 'rect;
                    }
                }
            }
        }
    }
    enforce_count_row_major(&mut bits, target);
    BinaryMask::new(bits, ratio)
}

/// Cluster-derived probabilities: clusters are visited in a seeded random
/// order and fully marked (`P = 1`) until the cumulative size reaches
/// `round(r·N)`; the cluster that crosses the target gets the fractional
/// remainder.
pub fn cluster_mask_probs(
    assignment: &ClusterAssignment,
    ratio: f64,
    rng: &mut Rng,
) -> Result<MaskProbabilities> {
    let n = assignment.len();
    let target = masked_count(n, ratio)?;
    let members = assignment.members();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(rng);

    let mut probs = vec![0.0; n];
    let mut cum = 0;
    for c in order {
        if cum == target {
            break;
        }
        let size = members[c].len();
        let p = if cum + size <= target {
            1.0
        } else {
            (target - cum) as f64 / size as f64
        };
        for &i in &members[c] {
            probs[i] = p;
        }
        cum = (cum + size).min(target);
    }
    MaskProbabilities::new(probs)
}

/// Realizes probabilities as a mask with exactly `round(r·N)` patches: the
/// largest `P_i + ε·u_i` are masked, `u_i ~ U[0,1)` and `ε` = [`SAMPLE_JITTER`]
/// times the largest probability.
pub fn sample_mask(probs: &MaskProbabilities, ratio: f64, rng: &mut Rng) -> Result<BinaryMask> {
    let n = probs.len();
    let target = masked_count(n, ratio)?;
    let top = probs.as_slice().iter().copied().fold(0.0, f64::max);
    let eps = SAMPLE_JITTER * if top > 0.0 { top } else { 1.0 };
    let keys: Vec<f64> = probs
        .as_slice()
        .iter()
        .map(|&p| p + eps * rng.random::<f64>())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in &order[..target] {
        bits[i] = true;
    }
    BinaryMask::new(bits, ratio)
}

/// Evolved mask for `epoch`: blend of the grid pattern and cluster
/// probabilities at `α(epoch)`, realized by [`sample_mask`]. At `α = 0` the
/// cluster assignment is not consulted and may be `None`.
pub fn evolved_mask(
    grid: &PatchGrid,
    schedule: &MaskSchedule,
    epoch: usize,
    assignment: Option<&ClusterAssignment>,
    rng: &mut Rng,
) -> Result<BinaryMask> {
    let alpha = alpha_schedule(epoch, schedule)?;
    let p_grid = grid_probabilities(grid, schedule.ratio)?;
    let p_cluster = if alpha > 0.0 {
        let assignment = assignment.ok_or_else(|| {
            Error::Contract(format!(
                "evolved mask at epoch {epoch} (alpha {alpha}) needs a cluster assignment"
            ))
        })?;
        if assignment.len() != grid.len() {
            return Err(Error::dim(
                "evolved_mask",
                &[grid.len()],
                &[assignment.len()],
            ));
        }
        cluster_mask_probs(assignment, schedule.ratio, rng)?
    } else {
        MaskProbabilities::zeros(grid.len())
    };
    let blended = blend_probabilities(&p_grid, &p_cluster, alpha)?;
    sample_mask(&blended, schedule.ratio, rng)
}
