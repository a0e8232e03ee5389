//! Toy dual encoder (text transformer + vision transformer) with per-layer
//! prompt slots.
//!
//! Prompts are injected fresh before each of the first `prompt_depth`
//! layers; the outgoing prompt states of those layers are discarded, and the
//! last injected prompts flow on through the remaining layers.

mod block;
mod tokenizer;

use std::rc::Rc;

use qica_autograd::{causal_mask, Mat, Real, Var};
use serde::{Deserialize, Serialize};

pub use block::TransformerBlock;
pub use tokenizer::{TokenSeq, VocabTokenizer, END_OF_TEXT, PAD};

use crate::data::Image;
use crate::error::{QicaError, Result};
use crate::params::{Ctx, Init, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub num_layers: usize,
    pub width: usize,
    pub num_heads: usize,
    pub prompt_depth: usize,
    pub prompt_length: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            width: 32,
            num_heads: 4,
            prompt_depth: 9,
            prompt_length: 2,
            max_seq_len: 8,
            mlp_ratio: 4,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_depth < 1 || self.prompt_depth > self.num_layers {
            return Err(QicaError::Config(format!(
                "prompt depth {} must lie in 1..={}",
                self.prompt_depth, self.num_layers
            )));
        }
        if self.prompt_length < 1 {
            return Err(QicaError::Config("prompt length must be at least 1".into()));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(QicaError::Config(format!(
                "text width {} not divisible by {} heads",
                self.width, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionEncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub num_layers: usize,
    pub width: usize,
    pub num_heads: usize,
    /// Layers (counted from 1) whose output feeds the decoder skips.
    pub skip_stage_indices: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            num_layers: 12,
            width: 48,
            num_heads: 4,
            skip_stage_indices: vec![4, 8],
            mlp_ratio: 4,
        }
    }
}

impl VisionEncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(QicaError::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.skip_stage_indices.len() != 2 {
            return Err(QicaError::Config("exactly two skip stages are required".into()));
        }
        let ok = self.skip_stage_indices.windows(2).all(|w| w[0] < w[1])
            && self.skip_stage_indices.iter().all(|&s| s >= 1 && s < self.num_layers);
        if !ok {
            return Err(QicaError::Config(format!(
                "skip stages {:?} must be strictly increasing within 1..{}",
                self.skip_stage_indices, self.num_layers
            )));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(QicaError::Config(format!(
                "vision width {} not divisible by {} heads",
                self.width, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Dense visual output of one vision forward.
#[derive(Clone, Debug)]
pub struct DenseVisual {
    /// Patch features `[h*w, d_v]`, prompt tokens excluded.
    pub dense: Var,
    /// Class token `[1, d_v]`.
    pub global: Var,
    /// Raw patch states after each skip layer, `[h*w, d_v]` each.
    pub stages: Vec<Var>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Real>(
        config: TextEncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Self {
        let group = ParamGroup::TextBackbone;
        let d = config.width;
        let token_embedding = store.add("text.token_embedding", group, init.normal(vocab_size, d, 0.02));
        let position_embedding =
            store.add("text.position_embedding", group, init.normal(config.max_seq_len, d, 0.01));
        let blocks = (0..config.num_layers)
            .map(|i| {
                TransformerBlock::new(store, init, &format!("text.layer{i}"), group, d, config.num_heads, config.mlp_ratio)
            })
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", group, d);
        Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            ln_final,
        }
    }

    /// Encodes `tokens` with prompt grids `prompts[j]` (`[m, d_t]`) placed
    /// in front of the words before layer `j`. Returns the normalised state
    /// at the end-of-text position, `[1, d_t]`.
    pub fn encode<T: Real>(&self, ctx: &Ctx<T>, tokens: &TokenSeq, prompts: &[Var]) -> Result<Var> {
        let g = ctx.graph;
        let d = self.config.width;
        let seq = self.config.max_seq_len;
        if tokens.ids.len() != seq {
            return Err(QicaError::Shape {
                what: "token sequence".into(),
                expected: (seq, 1),
                got: (tokens.ids.len(), 1),
            });
        }
        if prompts.len() > self.blocks.len() {
            return Err(QicaError::Config(format!(
                "{} prompt grids for {} text layers",
                prompts.len(),
                self.blocks.len()
            )));
        }
        let m = prompt_rows(ctx, prompts, d, "text prompt")?;

        let words = g.gather_rows(ctx.p(self.token_embedding), Rc::new(tokens.ids.clone()));
        let mut x = g.add(words, ctx.p(self.position_embedding));
        let mask = Rc::new(causal_mask::<T>(m + seq));
        for (j, block) in self.blocks.iter().enumerate() {
            if let Some(&p) = prompts.get(j) {
                let content = if j == 0 { x } else { g.slice_rows(x, m, seq) };
                x = g.concat_rows(&[p, content]);
            }
            x = block.forward(ctx, x, Some(mask.clone()));
        }
        let last = g.slice_rows(x, m + tokens.eot, 1);
        Ok(self.ln_final.forward(ctx, last))
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionEncoderConfig,
    patch_embedding: Linear,
    class_token: ParamId,
    position_embedding: ParamId,
    ln_pre: LayerNorm,
    blocks: Vec<TransformerBlock>,
    ln_post: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Real>(config: VisionEncoderConfig, store: &mut ParamStore<T>, init: &mut Init) -> Self {
        let group = ParamGroup::VisionBackbone;
        let d = config.width;
        let (h, w) = config.grid();
        let patch_dim = config.patch_size * config.patch_size * 3;
        let patch_embedding = Linear::new(store, init, "vision.patch_embedding", group, patch_dim, d);
        let class_token = store.add("vision.class_token", group, init.normal(1, d, 0.02));
        let position_embedding = store.add("vision.position_embedding", group, init.normal(1 + h * w, d, 0.01));
        let ln_pre = LayerNorm::new(store, "vision.ln_pre", group, d);
        let blocks = (0..config.num_layers)
            .map(|i| {
                TransformerBlock::new(store, init, &format!("vision.layer{i}"), group, d, config.num_heads, config.mlp_ratio)
            })
            .collect();
        let ln_post = LayerNorm::new(store, "vision.ln_post", group, d);
        Self {
            config,
            patch_embedding,
            class_token,
            position_embedding,
            ln_pre,
            blocks,
            ln_post,
        }
    }

    /// Flattens non-overlapping patches into rows `[h*w, p*p*3]`.
    pub fn patchify<T: Real>(&self, image: &Image) -> Result<Mat<T>> {
        let c = &self.config;
        if image.height != c.image_height || image.width != c.image_width {
            return Err(QicaError::Shape {
                what: "image".into(),
                expected: (c.image_height, c.image_width),
                got: (image.height, image.width),
            });
        }
        if !image.data.iter().all(|v| v.is_finite()) {
            return Err(QicaError::NonFinite("image pixel".into()));
        }
        let p = c.patch_size;
        let (gh, gw) = c.grid();
        let mut out = Mat::zeros(gh * gw, p * p * 3);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..3 {
                            row[k] = T::of(image.get(py * p + dy, px * p + dx, ch) as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch tokens `[h*w, d_v]` before the class token and positions are
    /// added; shared by every hypothesis of one image.
    pub fn embed_patches<T: Real>(&self, ctx: &Ctx<T>, image: &Image) -> Result<Var> {
        let patches = ctx.graph.constant(self.patchify(image)?);
        Ok(self.patch_embedding.forward(ctx, patches))
    }

    pub fn encode<T: Real>(&self, ctx: &Ctx<T>, image: &Image, prompts: &[Var]) -> Result<DenseVisual> {
        let patches = self.embed_patches(ctx, image)?;
        self.encode_embedded(ctx, patches, prompts)
    }

    /// Runs the encoder on pre-embedded patches, appending prompt grid
    /// `prompts[j]` (`[m, d_v]`) after the patch tokens before layer `j`.
    pub fn encode_embedded<T: Real>(&self, ctx: &Ctx<T>, patches: Var, prompts: &[Var]) -> Result<DenseVisual> {
        let g = ctx.graph;
        let d = self.config.width;
        let grid = self.config.grid();
        let hw = grid.0 * grid.1;
        if prompts.len() > self.blocks.len() {
            return Err(QicaError::Config(format!(
                "{} prompt grids for {} vision layers",
                prompts.len(),
                self.blocks.len()
            )));
        }
        prompt_rows(ctx, prompts, d, "vision prompt")?;

        let x = g.concat_rows(&[ctx.p(self.class_token), patches]);
        let x = g.add(x, ctx.p(self.position_embedding));
        let mut x = self.ln_pre.forward(ctx, x);
        let mut stages = Vec::with_capacity(2);
        for (j, block) in self.blocks.iter().enumerate() {
            if let Some(&p) = prompts.get(j) {
                let content = if j == 0 { x } else { g.slice_rows(x, 0, 1 + hw) };
                x = g.concat_rows(&[content, p]);
            }
            x = block.forward(ctx, x, None);
            if self.config.skip_stage_indices.contains(&(j + 1)) {
                stages.push(g.slice_rows(x, 1, hw));
            }
        }
        let tokens = g.slice_rows(x, 0, 1 + hw);
        let normed = self.ln_post.forward(ctx, tokens);
        Ok(DenseVisual {
            dense: g.slice_rows(normed, 1, hw),
            global: g.slice_rows(normed, 0, 1),
            stages,
            grid,
        })
    }
}

/// Common row count of the prompt grids (0 when there are none).
fn prompt_rows<T: Real>(ctx: &Ctx<T>, prompts: &[Var], width: usize, what: &str) -> Result<usize> {
    let Some(&first) = prompts.first() else {
        return Ok(0);
    };
    let m = ctx.graph.shape(first).0;
    for &p in prompts {
        let got = ctx.graph.shape(p);
        if got != (m, width) || m == 0 {
            return Err(QicaError::Shape {
                what: what.into(),
                expected: (m.max(1), width),
                got,
            });
        }
    }
    Ok(m)
}
