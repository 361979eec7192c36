use serde::{Deserialize, Serialize};

use super::params::{Layout, ParamSet};
use super::teacher::TeacherOutputs;
use super::vit::{Decoder, Encoder, EncoderSpec, Linear};
use super::{EncodingMode, ModelConfig};
use crate::cluster::AttentionMap;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::objectives::{disc_loss, pixel_loss, rep_loss, total_loss, LossConfig, TotalLoss};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which encoder output becomes the frozen embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

/// Student encoder outputs on one image.
#[derive(Clone, Debug)]
pub struct StudentOutputs {
    /// Final CLS state, `1 × hidden_dim`.
    pub cls: Var,
    /// One row per processed patch: all N in dense mode, the visible ones in
    /// sparse mode.
    pub patch_tokens: Var,
    /// Grid position of each `patch_tokens` row.
    pub positions: Vec<usize>,
    /// Last-block attention probabilities per head, when captured. These
    /// include the CLS row and column.
    pub heads: Option<Vec<Var>>,
}

impl StudentOutputs {
    /// Head-averaged last-block attention over the processed tokens, CLS
    /// dropped.
    pub fn attention<T: Real>(&self, tape: &Tape<T>, renormalize: bool) -> Result<AttentionMap> {
        let heads = self
            .heads
            .as_ref()
            .ok_or_else(|| Error::Contract("attention was not captured".into()))?;
        let first = tape.value(heads[0]);
        let mut avg = vec![0.0; first.len()];
        for &h in heads {
            for (a, &v) in avg.iter_mut().zip(tape.value(h).data()) {
                *a += v.as_f64();
            }
        }
        let inv = 1.0 / heads.len() as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        let t = Tensor::new(first.shape().to_vec(), avg)?;
        AttentionMap::from_token_attention(&t, renormalize)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    /// Pixel predictions for the masked positions, in mask order.
    pub pixels: Var,
    /// Teacher-space predictions for the masked positions from the decoder
    /// stream (sparse mode only).
    pub rep: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Student {
    config: ModelConfig,
    layout: Layout,
    encoder: Encoder,
    head: Linear,
    patch_head: Option<Linear>,
    decoder: Decoder,
}

impl Student {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let n = config.num_patches();
        let dense = config.encoding_mode == EncodingMode::Dense;
        let encoder = Encoder::declare(
            &mut layout,
            "encoder",
            EncoderSpec {
                tokens: n,
                in_dim: config.patch_dim(),
                dim: config.hidden_dim,
                heads: config.heads,
                ffn: config.ffn_dim,
                layers: config.layers,
                mask_token: dense,
                weight_std: Some(config.init_std),
                embed_std: config.init_std,
                cls_std: config.init_std,
            },
        );
        let std = Some(config.init_std);
        let head = Linear::declare(&mut layout, "head", config.hidden_dim, config.teacher_dim, std);
        let patch_head = (dense && config.split_head)
            .then(|| Linear::declare(&mut layout, "patch_head", config.hidden_dim, config.teacher_dim, std));
        let decoder = Decoder::declare(
            &mut layout,
            n,
            config.hidden_dim,
            config.decoder_hidden,
            config.decoder_heads,
            config.decoder_ffn_dim,
            config.decoder_layers,
            config.patch_dim(),
            (!dense).then_some(config.teacher_dim),
            config.init_std,
        );
        Ok(Student {
            config: config.clone(),
            layout,
            encoder,
            head,
            patch_head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet<f64> {
        self.layout.init(rng)
    }

    /// Names of the projection `h` parameters (weight, bias).
    pub fn head_names(&self) -> [&str; 2] {
        let specs = self.layout.specs();
        [
            specs[self.head.weight().index()].name.as_str(),
            specs[self.head.bias().index()].name.as_str(),
        ]
    }

    /// Names of the decoder pixel-head parameters (weight, bias).
    pub fn pixel_head_names(&self) -> [&str; 2] {
        let specs = self.layout.specs();
        let h = self.decoder.pixel_head();
        [
            specs[h.weight().index()].name.as_str(),
            specs[h.bias().index()].name.as_str(),
        ]
    }

    /// Registers every parameter on `tape` in layout order.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, trainable: bool) -> Result<Vec<Var>> {
        self.layout.check(params)?;
        Ok(params.register(tape, trainable))
    }

    fn eps<T: Real>(&self) -> T {
        T::lit(self.config.ln_eps)
    }

    fn wrap(pass: super::vit::EncoderPass, tape: &mut Tape<impl Real>) -> Result<StudentOutputs> {
        let rows = tape.value(pass.tokens).rows();
        let cls = tape.gather_rows(pass.tokens, &[0])?;
        let idx: Vec<usize> = (1..rows).collect();
        let patch_tokens = tape.gather_rows(pass.tokens, &idx)?;
        Ok(StudentOutputs {
            cls,
            patch_tokens,
            positions: pass.positions,
            heads: pass.attention,
        })
    }

    pub fn encode_dense<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
        mask: &BinaryMask,
        capture: bool,
    ) -> Result<StudentOutputs> {
        let pass = self.encoder.forward_dense(tape, vars, patches, mask, self.eps(), capture)?;
        Self::wrap(pass, tape)
    }

    pub fn encode_sparse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
        mask: &BinaryMask,
        capture: bool,
    ) -> Result<StudentOutputs> {
        let pass = self.encoder.forward_sparse(tape, vars, patches, mask, self.eps(), capture)?;
        Self::wrap(pass, tape)
    }

    /// Encodes with the configured [`EncodingMode`].
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
        mask: &BinaryMask,
        capture: bool,
    ) -> Result<StudentOutputs> {
        match self.config.encoding_mode {
            EncodingMode::Dense => self.encode_dense(tape, vars, patches, mask, capture),
            EncodingMode::Sparse => self.encode_sparse(tape, vars, patches, mask, capture),
        }
    }

    /// The shared projection `h` into teacher space.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        self.head.forward(tape, vars, x)
    }

    fn visible_rows<T: Real>(&self, tape: &mut Tape<T>, out: &StudentOutputs, mask: &BinaryMask) -> Result<(Var, Vec<usize>)> {
        if out.positions.len() == mask.len() {
            // Dense output: the decoder sees only the visible rows.
            let vis = mask.visible_indices();
            let rows = tape.gather_rows(out.patch_tokens, &vis)?;
            Ok((rows, vis))
        } else {
            Ok((out.patch_tokens, out.positions.clone()))
        }
    }

    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        out: &StudentOutputs,
        mask: &BinaryMask,
    ) -> Result<DecoderOutputs> {
        let (visible, positions) = self.visible_rows(tape, out, mask)?;
        let stream = self.decoder.stream(tape, vars, visible, &positions, self.eps())?;
        let masked = tape.gather_rows(stream, &mask.masked_indices())?;
        let pixels = self.decoder.pixels(tape, vars, masked)?;
        let rep = self.decoder.rep(tape, vars, masked)?;
        Ok(DecoderOutputs { pixels, rep })
    }

    /// Student teacher-space predictions at the masked positions.
    fn rep_predictions<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        out: &StudentOutputs,
        dec: &DecoderOutputs,
        mask: &BinaryMask,
    ) -> Result<Var> {
        if let Some(rep) = dec.rep {
            return Ok(rep);
        }
        let rows = tape.gather_rows(out.patch_tokens, &mask.masked_indices())?;
        match &self.patch_head {
            Some(h) => h.forward(tape, vars, rows),
            None => self.project(tape, vars, rows),
        }
    }

    /// Full objective on one image: encode, decode, and the three losses.
    pub fn losses<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: &Tensor<T>,
        teacher: &TeacherOutputs,
        mask: &BinaryMask,
        loss: &LossConfig,
    ) -> Result<TotalLoss> {
        let n = self.config.num_patches();
        if teacher.patches.shape() != [n, self.config.teacher_dim] {
            return Err(Error::dim(
                "teacher patches",
                teacher.patches.shape(),
                &[n, self.config.teacher_dim],
            ));
        }
        if mask.masked_count() == 0 {
            return Err(Error::EmptyMask("losses"));
        }
        let masked = mask.masked_indices();
        let x = tape.constant(patches.clone());
        let out = self.encode(tape, vars, x, mask, false)?;
        let dec = self.decode(tape, vars, &out, mask)?;

        let pred = self.rep_predictions(tape, vars, &out, &dec, mask)?;
        let t_patches = tape.constant(teacher.patches.cast());
        let t_masked = tape.gather_rows(t_patches, &masked)?;
        let eps = T::lit(loss.ln_eps);
        let rep = rep_loss(tape, pred, t_masked, T::lit(loss.smooth_l1_beta), eps)?;

        let logits = self.project(tape, vars, out.cls)?;
        let t_cls = tape.constant(Tensor::from_parts(
            vec![1, teacher.cls.len()],
            teacher.cls.iter().map(|&v| T::lit(v)).collect(),
        ));
        let disc = disc_loss(tape, t_cls, logits, T::lit(loss.disc_temperature))?;

        let target = tape.gather_rows(x, &masked)?;
        let pixel = pixel_loss(tape, target, dec.pixels, loss.pixel_norm, eps)?;

        total_loss(tape, &loss.weights, rep, disc, pixel)
    }

    /// Frozen embedding of an unmasked image.
    pub fn embed<T: Real>(&self, params: &ParamSet<T>, patches: &Tensor<T>, pooling: Pooling) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, params, false)?;
        let x = tape.constant(patches.clone());
        let mask = BinaryMask::all_visible(self.config.num_patches());
        let out = self.encode(&mut tape, &vars, x, &mask, false)?;
        let v = match pooling {
            Pooling::Cls => out.cls,
            Pooling::Mean => {
                let rows: Vec<usize> = (0..tape.value(out.patch_tokens).rows()).collect();
                tape.mean_rows(out.patch_tokens, &rows)?
            }
        };
        Ok(tape.value(v).data().iter().map(|x| x.as_f64()).collect())
    }

    /// Last-block attention of an unmasked image over the N patches.
    pub fn probe_attention<T: Real>(
        &self,
        params: &ParamSet<T>,
        patches: &Tensor<T>,
        renormalize: bool,
    ) -> Result<AttentionMap> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, params, false)?;
        let x = tape.constant(patches.clone());
        let mask = BinaryMask::all_visible(self.config.num_patches());
        let out = self.encode(&mut tape, &vars, x, &mask, true)?;
        out.attention(&tape, renormalize)
    }
}
