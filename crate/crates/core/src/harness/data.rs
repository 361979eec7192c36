//! Procedural colored-shape images.
//!
//! Each image is one bright, faintly tinted shape near the center, with
//! random size, over a dark background with Gaussian noise. The label is the
//! shape. Image `i` of a split depends only on `(seed, split, i)`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::DataConfig;
use crate::error::{Error, Result};
use crate::model::Image;
use crate::rng::{substream, tag, Rng};

pub const SHAPE_CLASSES: usize = 5;
pub const SHAPE_NAMES: [&str; SHAPE_CLASSES] = ["disk", "square", "triangle", "cross", "ring"];

const CHANNELS: usize = 3;
const TINT: f64 = 0.08;
const JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Probe,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
            Split::Probe => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub probe: LabeledImages,
}

impl Dataset {
    pub fn generate(spec: &DataConfig, image_size: usize, seed: u64) -> Result<Self> {
        Ok(Dataset {
            train: split(spec, image_size, seed, Split::Train, spec.train)?,
            test: split(spec, image_size, seed, Split::Test, spec.test)?,
            probe: split(spec, image_size, seed, Split::Probe, spec.probe)?,
        })
    }
}

fn split(spec: &DataConfig, size: usize, seed: u64, which: Split, count: usize) -> Result<LabeledImages> {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        // Classes cycle so every split is balanced.
        let label = i % spec.classes;
        let mut rng = substream(seed, &[tag::DATA, which.tag(), i as u64]);
        images.push(render(label, size, spec.noise, &mut rng)?);
        labels.push(label);
    }
    Ok(LabeledImages { images, labels })
}

/// True when pixel center `(x, y)` lies inside `shape` centered at
/// `(cx, cy)` with radius `r`, all in pixels.
fn inside(shape: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => {
            // Upward triangle with apex at cy - r and base at cy + r.
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        3 => {
            let arm = 0.3 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.45 * 0.45 * r * r
        }
        _ => false,
    }
}

pub fn render(label: usize, size: usize, noise: f64, rng: &mut Rng) -> Result<Image> {
    if label >= SHAPE_CLASSES {
        return Err(Error::Config(format!("shape label {label} out of range")));
    }
    let s = size as f64;
    let r = rng.random_range(0.34 * s..0.40 * s);
    let cx = s / 2.0 + rng.random_range(-JITTER * s..JITTER * s);
    let cy = s / 2.0 + rng.random_range(-JITTER * s..JITTER * s);
    let bg = rng.random_range(0.05..0.35);
    let level = rng.random_range(0.6..0.95);
    let mut color = [0.0; CHANNELS];
    for c in &mut color {
        *c = (level + rng.random_range(-TINT..TINT)).clamp(0.0, 1.0);
    }
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let on = inside(label, x as f64 + 0.5, y as f64 + 0.5, cx, cy, r);
            for &c in &color {
                let base = if on { c } else { bg };
                let v: f64 = base + gauss.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, CHANNELS, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TrainConfig;

    #[test]
    fn deterministic_and_balanced() {
        let spec = TrainConfig::toy().data;
        let a = Dataset::generate(&spec, 32, 7).unwrap();
        let b = Dataset::generate(&spec, 32, 7).unwrap();
        assert_eq!(a.train.images[17], b.train.images[17]);
        assert_eq!(a.train.len(), 512);
        assert_eq!(a.test.len(), 256);
        for c in 0..5 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 512 / 5 + usize::from(c < 512 % 5));
        }
        assert_ne!(a.train.images[0], a.test.images[0]);
        assert!(a.train.images[3].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shapes_cover_some_pixels() {
        for label in 0..SHAPE_CLASSES {
            let img = render(label, 32, 0.0, &mut substream(1, &[label as u64])).unwrap();
            let px: Vec<[f64; 3]> = img.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let bg = px[0];
            let fg = px.iter().filter(|p| **p != bg).count();
            assert!(fg > 30, "class {label} drew only {fg} pixels");
        }
    }
}
