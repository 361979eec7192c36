//! Loss components and their weighted combination.
//!
//! Every function here records onto a caller-owned [`Tape`], so the same code
//! produces both the reported scalar and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rep: f64,
    /// CLW.
    pub disc: f64,
    /// DLW.
    pub pixel: f64,
}

impl LossWeights {
    pub const fn new(rep: f64, disc: f64, pixel: f64) -> Self {
        LossWeights { rep, disc, pixel }
    }

    /// Best combined setting of the loss-weight sweep.
    pub const fn paper() -> Self {
        LossWeights::new(1.0, 0.30, 0.01)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("rep", self.rep), ("disc", self.disc), ("pixel", self.pixel)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, rep: f64, disc: f64, pixel: f64) -> f64 {
        self.rep * rep + self.disc * disc + self.pixel * pixel
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rep: f64,
    pub disc: f64,
    pub pixel: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(weights: &LossWeights, rep: f64, disc: f64, pixel: f64) -> Self {
        LossBreakdown {
            rep,
            disc,
            pixel,
            total: weights.combine(rep, disc, pixel),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rep, self.disc, self.pixel, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Componentwise mean, summed in slice order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.rep += b.rep;
            acc.disc += b.disc;
            acc.pixel += b.pixel;
            acc.total += b.total;
        }
        LossBreakdown {
            rep: acc.rep / n,
            disc: acc.disc / n,
            pixel: acc.pixel / n,
            total: acc.total / n,
        }
    }
}

/// Where layer normalization enters the pixel loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelNorm {
    /// MSE between raw target pixels and LN of the decoder output.
    #[default]
    PredictionLn,
    /// Plain MSE.
    None,
    /// MSE between per-patch normalized targets and the raw decoder output.
    TargetPerPatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub smooth_l1_beta: f64,
    pub disc_temperature: f64,
    pub pixel_norm: PixelNorm,
    pub ln_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::paper(),
            smooth_l1_beta: 1.0,
            disc_temperature: 1.0,
            pixel_norm: PixelNorm::PredictionLn,
            ln_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        if !(self.disc_temperature > 0.0) {
            return Err(Error::Config("disc_temperature must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth L1 between two vectors, averaged over elements.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], beta: T) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::dim("smooth_l1", &[pred.len()], &[target.len()]));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(pred.to_vec()));
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let l = tape.smooth_l1(p, t, beta)?;
    tape.value(l).item()
}

/// Patch distillation: Smooth L1 between student predictions at the masked
/// positions (`|ℳ| × teacher_dim`) and the layer-normalized teacher patch
/// tokens at the same positions, in the same order.
pub fn rep_loss<T: Real>(
    tape: &mut Tape<T>,
    predictions: Var,
    teacher_masked: Var,
    beta: T,
    eps: T,
) -> Result<Var> {
    if tape.value(predictions).rows() == 0 {
        return Err(Error::EmptyMask("rep_loss"));
    }
    let target = tape.layer_norm(teacher_masked, eps)?;
    tape.smooth_l1(predictions, target, beta)
}

/// Cross-entropy of the teacher CLS distribution against the projected
/// student CLS distribution, both at `temperature`.
pub fn disc_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_cls: Var,
    student_logits: Var,
    temperature: T,
) -> Result<Var> {
    if tape.shape(teacher_cls) != tape.shape(student_logits) {
        return Err(Error::dim("disc_loss", tape.shape(teacher_cls), tape.shape(student_logits)));
    }
    let inv = T::one() / temperature;
    let t = tape.scale(teacher_cls, inv);
    let p = tape.softmax(t);
    let s = tape.scale(student_logits, inv);
    let log_q = tape.log_softmax(s);
    let prod = tape.mul(p, log_q)?;
    let sum = tape.sum(prod);
    Ok(tape.scale(sum, -T::one()))
}

/// Per-patch mean squared error between target pixels and decoder rows at
/// the masked positions, averaged over patches.
pub fn pixel_loss<T: Real>(
    tape: &mut Tape<T>,
    target: Var,
    predictions: Var,
    norm: PixelNorm,
    eps: T,
) -> Result<Var> {
    if tape.value(predictions).rows() == 0 {
        return Err(Error::EmptyMask("pixel_loss"));
    }
    if tape.shape(target) != tape.shape(predictions) {
        return Err(Error::dim("pixel_loss", tape.shape(target), tape.shape(predictions)));
    }
    let (x, y) = match norm {
        PixelNorm::PredictionLn => (target, tape.layer_norm(predictions, eps)?),
        PixelNorm::None => (target, predictions),
        PixelNorm::TargetPerPatch => (tape.layer_norm(target, eps)?, predictions),
    };
    let d = tape.sub(y, x)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Component scalars plus the combined loss node.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    /// Weighted sum over the components with nonzero weight. Zero-weight
    /// components are left off this node, so no gradient flows from them.
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    weights: &LossWeights,
    rep: Var,
    disc: Var,
    pixel: Var,
) -> Result<TotalLoss> {
    let value = |tape: &Tape<T>, v: Var| tape.value(v).item().map(Real::as_f64);
    let breakdown = LossBreakdown::new(
        weights,
        value(tape, rep)?,
        value(tape, disc)?,
        value(tape, pixel)?,
    );
    let mut acc: Option<Var> = None;
    for (w, v) in [(weights.rep, rep), (weights.disc, disc), (weights.pixel, pixel)] {
        if w == 0.0 {
            continue;
        }
        let term = tape.scale(v, T::lit(w));
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let loss = match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok(TotalLoss { loss, breakdown })
}
