use std::collections::HashMap;
use std::path::Path;

use super::checkpoint::ByteReader;
use super::params::{Layout, ParamSet};
use super::vit::{Encoder, EncoderSpec};
use super::{patchify, Image, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::rng::{substream, tag};
use crate::tensor::{Tape, Tensor};

/// Seed of the synthetic teacher's parameters. It does not depend on the
/// run seed, so every run distills from the same teacher.
pub const TEACHER_SEED: u64 = 0x7EAC_4E25_D15C_0001;

/// Standard deviation of the teacher's position table. Matrices use
/// `1/sqrt(fan_in)`.
const TEACHER_EMBED_STD: f64 = 1.0;

/// A small CLS token keeps the teacher's final CLS state dominated by what it
/// gathers from the patches rather than by its own constant embedding.
const TEACHER_CLS_STD: f64 = 0.1;

const FEATURE_MAGIC: &[u8; 4] = b"MEDT";
const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    /// `N × teacher_dim`.
    pub patches: Tensor<f64>,
    /// `teacher_dim`.
    pub cls: Vec<f64>,
}

/// Frozen randomly initialized ViT standing in for a pretrained encoder.
#[derive(Clone, Debug)]
pub struct SyntheticTeacher {
    encoder: Encoder,
    layout: Layout,
    params: ParamSet<f64>,
    patch_size: usize,
    eps: f64,
}

impl SyntheticTeacher {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let encoder = Encoder::declare(
            &mut layout,
            "teacher",
            EncoderSpec {
                tokens: config.num_patches(),
                in_dim: config.patch_dim(),
                dim: config.teacher_dim,
                heads: config.teacher_heads,
                ffn: config.teacher_ffn_dim,
                layers: config.teacher_layers,
                mask_token: false,
                weight_std: None,
                embed_std: TEACHER_EMBED_STD,
                cls_std: TEACHER_CLS_STD,
            },
        );
        let params = layout.init(&mut substream(TEACHER_SEED, &[tag::TEACHER]));
        Ok(SyntheticTeacher {
            encoder,
            layout,
            params,
            patch_size: config.patch_size,
            eps: config.ln_eps,
        })
    }

    pub fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.encoder.spec().dim
    }

    pub fn forward(&self, image: &Image) -> Result<TeacherOutputs> {
        let patches: Tensor = patchify(image, self.patch_size)?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let x = tape.constant(patches);
        let mask = BinaryMask::all_visible(self.encoder.spec().tokens);
        let pass = self.encoder.forward_sparse(&mut tape, &vars, x, &mask, self.eps, false)?;
        let tokens = tape.value(pass.tokens);
        let d = tokens.cols();
        let n = tokens.rows() - 1;
        Ok(TeacherOutputs {
            cls: tokens.row(0).to_vec(),
            patches: Tensor::new(vec![n, d], tokens.data()[d..].to_vec())?,
        })
    }
}

/// Precomputed teacher features keyed by image content hash.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherFeatures {
    patches: usize,
    dim: usize,
    keys: Vec<[u8; 32]>,
    records: HashMap<[u8; 32], TeacherOutputs>,
}

impl TeacherFeatures {
    pub fn new(patches: usize, dim: usize) -> Self {
        TeacherFeatures {
            patches,
            dim,
            keys: Vec::new(),
            records: HashMap::new(),
        }
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Stores `out` under `key`, rounded to f32 as the file stores it.
    pub fn insert(&mut self, key: [u8; 32], out: &TeacherOutputs) -> Result<()> {
        if out.patches.shape() != [self.patches, self.dim] || out.cls.len() != self.dim {
            return Err(Error::dim("teacher features", out.patches.shape(), &[self.patches, self.dim]));
        }
        let round = |v: &f64| *v as f32 as f64;
        let stored = TeacherOutputs {
            patches: Tensor::new(out.patches.shape().to_vec(), out.patches.data().iter().map(round).collect())?,
            cls: out.cls.iter().map(round).collect(),
        };
        if self.records.insert(key, stored).is_none() {
            self.keys.push(key);
        }
        Ok(())
    }

    pub fn get(&self, key: &[u8; 32]) -> Result<&TeacherOutputs> {
        self.records.get(key).ok_or_else(|| {
            let hex: String = key.iter().map(|b| format!("{b:02x}")).collect();
            Error::Lookup(format!("no teacher features for image {hex}"))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.keys.len() * (32 + 4 * self.dim * (self.patches + 1)));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.patches as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for key in &self.keys {
            let r = &self.records[key];
            out.extend_from_slice(key);
            for v in r.cls.iter().chain(r.patches.data()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "teacher feature file");
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Version(format!("teacher feature file version {version}")));
        }
        let patches = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut feats = TeacherFeatures::new(patches, dim);
        let floats = dim * (patches + 1);
        for _ in 0..count {
            let key: [u8; 32] = r.take(32)?.try_into().unwrap();
            let values: Vec<f64> = r
                .take(4 * floats)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let out = TeacherOutputs {
                cls: values[..dim].to_vec(),
                patches: Tensor::new(vec![patches, dim], values[dim..].to_vec())?,
            };
            feats.insert(key, &out)?;
        }
        r.finish()?;
        Ok(feats)
    }
}

pub fn write_teacher_features(path: &Path, feats: &TeacherFeatures) -> Result<()> {
    std::fs::write(path, feats.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_teacher_features(path: &Path) -> Result<TeacherFeatures> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TeacherFeatures::from_bytes(&bytes)
}

/// Source of teacher targets.
#[derive(Clone, Debug)]
pub enum TeacherProvider {
    Synthetic(Box<SyntheticTeacher>),
    File(TeacherFeatures),
}

impl TeacherProvider {
    pub fn synthetic(config: &ModelConfig) -> Result<Self> {
        Ok(TeacherProvider::Synthetic(Box::new(SyntheticTeacher::new(config)?)))
    }

    pub fn forward(&self, image: &Image) -> Result<TeacherOutputs> {
        match self {
            TeacherProvider::Synthetic(t) => t.forward(image),
            TeacherProvider::File(f) => f.get(&image.content_hash()).cloned(),
        }
    }
}
