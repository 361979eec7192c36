//! Patch masks: grid, random, block, and evolved (grid → cluster) strategies.
//!
//! Every generator returns a [`BinaryMask`] with exactly `round(r·N)` masked
//! patches. Evolved masking blends a deterministic grid pattern with
//! cluster-derived probabilities according to the epoch schedule
//! `α = (k/K)^γ`, then realizes the blend as a concrete mask by ranking.

mod pgm;
mod strategies;

use serde::{Deserialize, Serialize};

pub use pgm::{mask_from_pgm, mask_to_pgm, parse_pgm, write_mask_pgm, PgmImage};
pub use strategies::{
    block_mask, cluster_mask_probs, evolved_mask, grid_mask, grid_probabilities, random_mask,
    sample_mask, BLOCK_MAX_ASPECT, BLOCK_MIN_AREA, SAMPLE_JITTER,
};

use crate::error::{Error, Result};

/// Geometry of the tokenized image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("empty patch grid {rows}x{cols}")));
        }
        Ok(PatchGrid {
            rows,
            cols,
            patch_size,
        })
    }

    /// Square grid for an `image_size × image_size` input.
    pub fn for_image(image_size: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        Self::new(image_size / patch_size, image_size / patch_size, patch_size)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Number of masked patches for ratio `r` over `n` patches: `round(r·n)`.
pub fn masked_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let count = (ratio * n as f64).round() as usize;
    if count == 0 || count >= n {
        return Err(Error::DegenerateRatio { ratio, n, count });
    }
    Ok(count)
}

/// Per-patch visible/masked partition. `true` means masked.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    bits: Vec<bool>,
    target_ratio: f64,
}

impl BinaryMask {
    /// Wraps `bits`, checking that exactly `round(ratio·N)` are set.
    pub fn new(bits: Vec<bool>, target_ratio: f64) -> Result<Self> {
        let want = (target_ratio * bits.len() as f64).round() as usize;
        let have = bits.iter().filter(|&&b| b).count();
        if have != want {
            return Err(Error::Contract(format!(
                "mask has {have} masked patches, ratio {target_ratio} over {} requires {want}",
                bits.len()
            )));
        }
        Ok(BinaryMask { bits, target_ratio })
    }

    pub fn all_visible(n: usize) -> Self {
        BinaryMask {
            bits: vec![false; n],
            target_ratio: 0.0,
        }
    }

    pub fn from_masked_indices(n: usize, masked: &[usize], target_ratio: f64) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in masked {
            if i >= n {
                return Err(Error::Bounds {
                    op: "BinaryMask::from_masked_indices",
                    index: i,
                    len: n,
                });
            }
            bits[i] = true;
        }
        Self::new(bits, target_ratio)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn visible_count(&self) -> usize {
        self.len() - self.masked_count()
    }

    /// Masked positions in ascending order.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Visible positions in ascending order.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    Grid,
    Random,
    Block,
    EvolvedHc,
    EvolvedEm,
}

impl MaskStrategy {
    pub fn is_evolved(self) -> bool {
        matches!(self, MaskStrategy::EvolvedHc | MaskStrategy::EvolvedEm)
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Grid => "grid",
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
            MaskStrategy::EvolvedHc => "evolved-hc",
            MaskStrategy::EvolvedEm => "evolved-em",
        }
    }

    pub const ALL: [MaskStrategy; 5] = [
        MaskStrategy::Grid,
        MaskStrategy::Random,
        MaskStrategy::Block,
        MaskStrategy::EvolvedHc,
        MaskStrategy::EvolvedEm,
    ];
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask strategy {s:?}")))
    }
}

/// Parameters of the evolved masking schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSchedule {
    pub gamma: f64,
    pub total_epochs: usize,
    pub c_min: usize,
    pub c_max: usize,
    pub zeta: f64,
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl MaskSchedule {
    /// Evolved-masking settings used for ImageNet-scale pre-training.
    pub fn paper() -> Self {
        MaskSchedule {
            gamma: 1.7,
            total_epochs: 300,
            c_min: 10,
            c_max: 40,
            zeta: 0.9,
            ratio: 0.75,
            strategy: MaskStrategy::EvolvedHc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        if self.c_min == 0 || self.c_min > self.c_max {
            return Err(Error::Config(format!(
                "cluster range {}..{} is invalid",
                self.c_min, self.c_max
            )));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Config(format!("zeta {} outside [0, 1]", self.zeta)));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self::paper()
    }
}

/// `α = (k/K)^γ`.
pub fn alpha_schedule(epoch: usize, schedule: &MaskSchedule) -> Result<f64> {
    let total = schedule.total_epochs;
    if epoch > total {
        return Err(Error::Range { epoch, total });
    }
    if total == 0 {
        return Err(Error::Config("total_epochs must be at least 1".into()));
    }
    Ok((epoch as f64 / total as f64).powf(schedule.gamma))
}

/// `C = floor(C_min + (C_max - C_min)·α)`, clamped to `[C_min, C_max]`.
pub fn cluster_count(alpha: f64, schedule: &MaskSchedule) -> usize {
    let span = (schedule.c_max - schedule.c_min) as f64;
    let c = (schedule.c_min as f64 + span * alpha).floor();
    if c.is_nan() {
        return schedule.c_min;
    }
    (c.max(0.0) as usize).clamp(schedule.c_min, schedule.c_max)
}

/// Per-patch masking probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskProbabilities(Vec<f64>);

impl MaskProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
        }
        Ok(MaskProbabilities(probs))
    }

    pub fn zeros(n: usize) -> Self {
        MaskProbabilities(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `P = (1 - α)·P_grid + α·P_cluster`, elementwise.
pub fn blend_probabilities(
    p_grid: &MaskProbabilities,
    p_cluster: &MaskProbabilities,
    alpha: f64,
) -> Result<MaskProbabilities> {
    if p_grid.len() != p_cluster.len() {
        return Err(Error::dim(
            "blend_probabilities",
            &[p_grid.len()],
            &[p_cluster.len()],
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let out = p_grid
        .0
        .iter()
        .zip(&p_cluster.0)
        .map(|(&g, &c)| (1.0 - alpha) * g + alpha * c)
        .collect();
    Ok(MaskProbabilities(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(gamma: f64, total: usize) -> MaskSchedule {
        MaskSchedule {
            gamma,
            total_epochs: total,
            ..MaskSchedule::paper()
        }
    }

    #[test]
    fn alpha_endpoints_and_midpoint() {
        let s = sched(2.0, 10);
        assert_eq!(alpha_schedule(0, &s).unwrap(), 0.0);
        assert_eq!(alpha_schedule(10, &s).unwrap(), 1.0);
        assert_eq!(alpha_schedule(5, &s).unwrap(), 0.25);
        assert!(matches!(alpha_schedule(11, &s), Err(Error::Range { .. })));
    }

    #[test]
    fn alpha_paper_gamma_halfway() {
        let a = alpha_schedule(150, &sched(1.7, 300)).unwrap();
        assert!((a - 0.307_786_103_336_229_1).abs() < 1e-12, "{a}");
    }

    #[test]
    fn cluster_count_examples() {
        let s = MaskSchedule::paper();
        assert_eq!(cluster_count(0.0, &s), 10);
        assert_eq!(cluster_count(1.0, &s), 40);
        assert_eq!(cluster_count(0.5, &s), 25);
        assert_eq!(cluster_count(0.33, &s), 19);
        assert_eq!(cluster_count(1.5, &s), 40);
        assert_eq!(cluster_count(-0.2, &s), 10);
    }

    #[test]
    fn blend_endpoints() {
        let g = MaskProbabilities::new(vec![1.0, 0.0, 0.3]).unwrap();
        let c = MaskProbabilities::new(vec![0.0, 1.0, 0.7]).unwrap();
        assert_eq!(blend_probabilities(&g, &c, 0.0).unwrap(), g);
        assert_eq!(blend_probabilities(&g, &c, 1.0).unwrap(), c);
        let mid = blend_probabilities(
            &MaskProbabilities::new(vec![1.0, 0.0]).unwrap(),
            &MaskProbabilities::new(vec![0.0, 1.0]).unwrap(),
            0.5,
        )
        .unwrap();
        assert_eq!(mid.as_slice(), &[0.5, 0.5]);
        assert!(blend_probabilities(&g, &MaskProbabilities::zeros(2), 0.5).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = MaskSchedule::paper();
        s.validate().unwrap();
        s.zeta = 1.2;
        assert!(s.validate().is_err());
        let mut s = MaskSchedule::paper();
        s.c_min = 50;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mask_popcount_contract() {
        assert!(BinaryMask::new(vec![true, false, false, false], 0.5).is_err());
        let m = BinaryMask::new(vec![true, false, true, false], 0.5).unwrap();
        assert_eq!(m.masked_indices(), vec![0, 2]);
        assert_eq!(m.visible_indices(), vec![1, 3]);
        assert!(matches!(
            masked_count(4, 0.1),
            Err(Error::DegenerateRatio { .. })
        ));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in MaskStrategy::ALL {
            assert_eq!(s.name().parse::<MaskStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
    }
}
