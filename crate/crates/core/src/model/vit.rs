use super::params::{Init, Layout, ParamId};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::tensor::{Real, Tape, Var};

/// Matrix init: a fixed standard deviation, or `1/sqrt(fan_in)` when `None`.
fn matrix_init(std: Option<f64>, fan_in: usize) -> Init {
    Init::Normal(std.unwrap_or(1.0 / (fan_in as f64).sqrt()))
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub(crate) fn declare(layout: &mut Layout, name: &str, fan_in: usize, fan_out: usize, std: Option<f64>) -> Self {
        Linear {
            w: layout.add(format!("{name}.weight"), &[fan_in, fan_out], matrix_init(std, fan_in), true),
            b: layout.add(format!("{name}.bias"), &[fan_out], Init::Zeros, false),
        }
    }

    pub(crate) fn weight(&self) -> ParamId {
        self.w
    }

    pub(crate) fn bias(&self) -> ParamId {
        self.b
    }

    pub(crate) fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w.index()])?;
        tape.add_row(y, vars[self.b.index()])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub(crate) fn declare(layout: &mut Layout, name: &str, dim: usize) -> Self {
        Norm {
            gain: layout.add(format!("{name}.gain"), &[dim], Init::Ones, false),
            bias: layout.add(format!("{name}.bias"), &[dim], Init::Zeros, false),
        }
    }

    pub(crate) fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, eps: T) -> Result<Var> {
        tape.layer_norm_affine(x, vars[self.gain.index()], vars[self.bias.index()], eps)
    }
}

/// Pre-norm transformer block: `x + attn(LN x)`, then `x + mlp(LN x)`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    heads: usize,
}

impl Block {
    pub(crate) fn declare(layout: &mut Layout, name: &str, dim: usize, heads: usize, ffn: usize, std: Option<f64>) -> Self {
        Block {
            ln1: Norm::declare(layout, &format!("{name}.ln1"), dim),
            qkv: Linear::declare(layout, &format!("{name}.qkv"), dim, 3 * dim, std),
            proj: Linear::declare(layout, &format!("{name}.proj"), dim, dim, std),
            ln2: Norm::declare(layout, &format!("{name}.ln2"), dim),
            fc1: Linear::declare(layout, &format!("{name}.fc1"), dim, ffn, std),
            fc2: Linear::declare(layout, &format!("{name}.fc2"), ffn, dim, std),
            dim,
            heads,
        }
    }

    /// Returns the block output and, when `capture` is set, the per-head
    /// attention probabilities (`tokens × tokens` each).
    pub(crate) fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        eps: T,
        capture: bool,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        let hd = self.dim / self.heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let h = self.ln1.forward(tape, vars, x, eps)?;
        let qkv = self.qkv.forward(tape, vars, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::new();
        for i in 0..self.heads {
            let q = tape.slice_cols(qkv, i * hd, hd)?;
            let k = tape.slice_cols(qkv, self.dim + i * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * self.dim + i * hd, hd)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s);
            if capture {
                probs.push(a);
            }
            outs.push(tape.matmul(a, v)?);
        }
        let heads = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let attn = self.proj.forward(tape, vars, heads)?;
        let x = tape.add(x, attn)?;
        let h = self.ln2.forward(tape, vars, x, eps)?;
        let h = self.fc1.forward(tape, vars, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, vars, h)?;
        let x = tape.add(x, h)?;
        Ok((x, capture.then_some(probs)))
    }
}

/// Shape of an [`Encoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub tokens: usize,
    pub in_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub mask_token: bool,
    /// `None` selects `1/sqrt(fan_in)` for every matrix.
    pub weight_std: Option<f64>,
    /// Position table and mask token.
    pub embed_std: f64,
    pub cls_std: f64,
}

/// Patch embedding, CLS token, learnable position table for the N patch
/// positions, a block stack and a final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    mask_token: Option<ParamId>,
    blocks: Vec<Block>,
    norm: Norm,
}

/// Encoder result on one image.
#[derive(Clone, Debug)]
pub(crate) struct EncoderPass {
    /// Final-norm output, CLS first: `(rows + 1) × dim`.
    pub tokens: Var,
    /// Grid position of each non-CLS row.
    pub positions: Vec<usize>,
    pub attention: Option<Vec<Var>>,
}

impl Encoder {
    pub fn declare(layout: &mut Layout, name: &str, spec: EncoderSpec) -> Self {
        let d = spec.dim;
        let embed = Linear::declare(layout, &format!("{name}.patch_embed"), spec.in_dim, d, spec.weight_std);
        let cls = layout.add(format!("{name}.cls"), &[1, d], Init::Normal(spec.cls_std), false);
        let pos = layout.add(format!("{name}.pos"), &[spec.tokens, d], Init::Normal(spec.embed_std), false);
        let mask_token = spec
            .mask_token
            .then(|| layout.add(format!("{name}.mask_token"), &[1, d], Init::Normal(spec.embed_std), false));
        let blocks = (0..spec.layers)
            .map(|i| Block::declare(layout, &format!("{name}.blocks.{i}"), d, spec.heads, spec.ffn, spec.weight_std))
            .collect();
        let norm = Norm::declare(layout, &format!("{name}.norm"), d);
        Encoder {
            spec,
            embed,
            cls,
            pos,
            mask_token,
            blocks,
            norm,
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, patches: Var, mask: &BinaryMask) -> Result<()> {
        let shape = tape.shape(patches);
        if shape != [self.spec.tokens, self.spec.in_dim] {
            return Err(Error::dim("encoder input", shape, &[self.spec.tokens, self.spec.in_dim]));
        }
        if mask.len() != self.spec.tokens {
            return Err(Error::dim("encoder mask", &[mask.len()], &[self.spec.tokens]));
        }
        Ok(())
    }

    /// Every position is processed; masked rows take the mask token before
    /// the position embedding is added.
    pub(crate) fn forward_dense<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
        mask: &BinaryMask,
        eps: T,
        capture: bool,
    ) -> Result<EncoderPass> {
        self.check_input(tape, patches, mask)?;
        let n = self.spec.tokens;
        let emb = self.embed.forward(tape, vars, patches)?;
        let x = if mask.masked_count() == 0 {
            emb
        } else {
            let token = self
                .mask_token
                .ok_or_else(|| Error::Contract("dense encoding of masked input needs a mask token".into()))?;
            let table = tape.concat_rows(&[emb, vars[token.index()]])?;
            let index: Vec<usize> = (0..n).map(|i| if mask.is_masked(i) { n } else { i }).collect();
            tape.gather_rows(table, &index)?
        };
        let x = tape.add(x, vars[self.pos.index()])?;
        self.stack(tape, vars, x, (0..n).collect(), eps, capture)
    }

    /// Position embeddings are added to all N rows, then masked rows are
    /// dropped.
    pub(crate) fn forward_sparse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        patches: Var,
        mask: &BinaryMask,
        eps: T,
        capture: bool,
    ) -> Result<EncoderPass> {
        self.check_input(tape, patches, mask)?;
        let emb = self.embed.forward(tape, vars, patches)?;
        let x = tape.add(emb, vars[self.pos.index()])?;
        let visible = mask.visible_indices();
        let x = tape.gather_rows(x, &visible)?;
        self.stack(tape, vars, x, visible, eps, capture)
    }

    /// Prepends CLS and runs the blocks; attention is captured from the last
    /// block only.
    fn stack<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        positions: Vec<usize>,
        eps: T,
        capture: bool,
    ) -> Result<EncoderPass> {
        let mut x = tape.concat_rows(&[vars[self.cls.index()], x])?;
        let mut attention = None;
        let last = self.blocks.len().saturating_sub(1);
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, a) = block.forward(tape, vars, x, eps, capture && i == last)?;
            x = y;
            if a.is_some() {
                attention = a;
            }
        }
        let tokens = self.norm.forward(tape, vars, x, eps)?;
        Ok(EncoderPass {
            tokens,
            positions,
            attention,
        })
    }
}

/// Lightweight MAE-style decoder over all N positions.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    embed: Linear,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    pixel_head: Linear,
    rep_head: Option<Linear>,
    tokens: usize,
}

#[allow(clippy::too_many_arguments)]
impl Decoder {
    pub(crate) fn declare(
        layout: &mut Layout,
        tokens: usize,
        enc_dim: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        layers: usize,
        pixel_dim: usize,
        rep_dim: Option<usize>,
        std: f64,
    ) -> Self {
        let s = Some(std);
        Decoder {
            embed: Linear::declare(layout, "decoder.embed", enc_dim, dim, s),
            mask_token: layout.add("decoder.mask_token", &[1, dim], Init::Normal(std), false),
            pos: layout.add("decoder.pos", &[tokens, dim], Init::Normal(std), false),
            blocks: (0..layers)
                .map(|i| Block::declare(layout, &format!("decoder.blocks.{i}"), dim, heads, ffn, s))
                .collect(),
            norm: Norm::declare(layout, "decoder.norm", dim),
            pixel_head: Linear::declare(layout, "decoder.pixel_head", dim, pixel_dim, s),
            rep_head: rep_dim.map(|r| Linear::declare(layout, "decoder.rep_head", dim, r, s)),
            tokens,
        }
    }

    pub(crate) fn pixel_head(&self) -> &Linear {
        &self.pixel_head
    }

    /// `visible` holds the encoder rows for `positions`; the remaining grid
    /// positions are filled with the mask token. Returns the decoder stream
    /// after the final norm (`N × dim`).
    pub(crate) fn stream<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        visible: Var,
        positions: &[usize],
        eps: T,
    ) -> Result<Var> {
        let n = self.tokens;
        let nv = positions.len();
        let mut slot = vec![nv; n];
        for (r, &p) in positions.iter().enumerate() {
            if p >= n {
                return Err(Error::Bounds {
                    op: "decoder scatter",
                    index: p,
                    len: n,
                });
            }
            slot[p] = r;
        }
        let token = vars[self.mask_token.index()];
        let table = if nv == 0 {
            token
        } else {
            let proj = self.embed.forward(tape, vars, visible)?;
            tape.concat_rows(&[proj, token])?
        };
        let x = tape.gather_rows(table, &slot)?;
        let mut x = tape.add(x, vars[self.pos.index()])?;
        for block in &self.blocks {
            x = block.forward(tape, vars, x, eps, false)?.0;
        }
        self.norm.forward(tape, vars, x, eps)
    }

    pub(crate) fn pixels<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], rows: Var) -> Result<Var> {
        self.pixel_head.forward(tape, vars, rows)
    }

    pub(crate) fn rep<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], rows: Var) -> Result<Option<Var>> {
        self.rep_head
            .as_ref()
            .map(|h| h.forward(tape, vars, rows))
            .transpose()
    }
}
