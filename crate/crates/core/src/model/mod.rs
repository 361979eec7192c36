//! Toy ViT student, pixel decoder and frozen teacher.

mod checkpoint;
mod params;
mod student;
mod teacher;
mod vit;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{Init, Layout, ParamId, ParamSet, ParamSpec};
pub use student::{DecoderOutputs, Pooling, Student, StudentOutputs};
pub use teacher::{
    read_teacher_features, write_teacher_features, SyntheticTeacher, TeacherFeatures,
    TeacherOutputs, TeacherProvider, TEACHER_SEED,
};
pub use vit::{Encoder, EncoderSpec};

use crate::error::{Error, Result};
use crate::masking::PatchGrid;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingMode {
    /// All N positions, mask token at the masked ones.
    Dense,
    /// Only the visible positions, position embeddings added before dropping.
    #[default]
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub teacher_dim: usize,
    pub teacher_layers: usize,
    pub teacher_heads: usize,
    pub teacher_ffn_dim: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_dim: usize,
    pub encoding_mode: EncodingMode,
    /// Separate projections for the patch and CLS losses instead of one shared `h`.
    pub split_head: bool,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Recognized so paper configs parse; only 0 is supported.
    pub stochastic_depth: f64,
}

impl ModelConfig {
    /// ViT-B/16 student with a ViT-B/16-sized teacher and the 8×512 decoder.
    pub fn paper() -> Self {
        ModelConfig {
            layers: 12,
            hidden_dim: 768,
            heads: 12,
            ffn_dim: 3072,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            teacher_dim: 768,
            teacher_layers: 12,
            teacher_heads: 12,
            teacher_ffn_dim: 3072,
            decoder_layers: 8,
            decoder_hidden: 512,
            decoder_heads: 16,
            decoder_ffn_dim: 2048,
            encoding_mode: EncodingMode::Sparse,
            split_head: false,
            init_std: 0.02,
            ln_eps: 1e-6,
            stochastic_depth: 0.1,
        }
    }

    /// 4 layers × 64 on 32×32 images with 4×4 patches (an 8×8 grid).
    pub fn toy() -> Self {
        ModelConfig {
            layers: 4,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 256,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            teacher_dim: 96,
            teacher_layers: 2,
            teacher_heads: 4,
            teacher_ffn_dim: 192,
            decoder_layers: 2,
            decoder_hidden: 32,
            decoder_heads: 2,
            decoder_ffn_dim: 64,
            encoding_mode: EncodingMode::Sparse,
            split_head: false,
            init_std: 0.1,
            ln_eps: 1e-6,
            stochastic_depth: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("teacher_dim", self.teacher_dim),
            ("teacher_layers", self.teacher_layers),
            ("teacher_heads", self.teacher_heads),
            ("teacher_ffn_dim", self.teacher_ffn_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_heads", self.decoder_heads),
            ("decoder_ffn_dim", self.decoder_ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        for (name, dim, heads) in [
            ("hidden_dim", self.hidden_dim, self.heads),
            ("teacher_dim", self.teacher_dim, self.teacher_heads),
            ("decoder_hidden", self.decoder_hidden, self.decoder_heads),
        ] {
            if dim % heads != 0 {
                return Err(Error::Config(format!(
                    "model.{name} = {dim} is not divisible by {heads} heads"
                )));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.init_std > 0.0 && self.ln_eps > 0.0) {
            return Err(Error::Config("init_std and ln_eps must be positive".into()));
        }
        if self.stochastic_depth != 0.0 {
            return Err(Error::Config(format!(
                "stochastic_depth = {} is recognized but not supported; set it to 0",
                self.stochastic_depth
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::for_image(self.image_size, self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Standard ViT parameter count for the student encoder alone: patch
    /// embedding, CLS token, position table for `N + 1` tokens, `L` blocks of
    /// `12d² + 13d` (with `ffn = 4d`, general form below) and the final norm.
    pub fn vit_formula_params(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let n = self.num_patches();
        let block = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
        self.patch_dim() * d + d + d + (n + 1) * d + self.layers * block + 2 * d
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Image as `height × width × channels` floats, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim("image", &[height, width, channels], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// SHA-256 over the dimensions and the little-endian pixel values.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in [self.height, self.width, self.channels] {
            h.update((d as u32).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Splits an image into non-overlapping row-major patches, each flattened
/// as `(row, col, channel)`.
pub fn patchify<T: Real>(image: &Image, patch_size: usize) -> Result<Tensor<T>> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::Config(format!(
            "{}×{} image is not divisible into {patch_size}-pixel patches",
            image.height, image.width
        )));
    }
    let (gr, gc) = (image.height / patch_size, image.width / patch_size);
    let dim = patch_size * patch_size * image.channels;
    let mut data = Vec::with_capacity(gr * gc * dim);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch_size {
                let row = (pr * patch_size + y) * image.width + pc * patch_size;
                let start = row * image.channels;
                let end = start + patch_size * image.channels;
                data.extend(image.data[start..end].iter().map(|&v| T::lit(v)));
            }
        }
    }
    Tensor::new(vec![gr * gc, dim], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
) -> Result<Image> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::Config(format!(
            "{height}×{width} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gr, gc) = (height / patch_size, width / patch_size);
    let dim = patch_size * patch_size * channels;
    if patches.shape() != [gr * gc, dim] {
        return Err(Error::dim("unpatchify", patches.shape(), &[gr * gc, dim]));
    }
    let mut data = vec![0.0; height * width * channels];
    let src = patches.data();
    for pr in 0..gr {
        for pc in 0..gc {
            let p = (pr * gc + pc) * dim;
            for y in 0..patch_size {
                let row = (pr * patch_size + y) * width + pc * patch_size;
                let start = row * channels;
                let width_px = patch_size * channels;
                for (k, v) in data[start..start + width_px].iter_mut().enumerate() {
                    *v = src[p + y * width_px + k].as_f64();
                }
            }
        }
    }
    Image::new(height, width, channels, data)
}
