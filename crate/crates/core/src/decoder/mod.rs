//! Cost aggregation decoder: similarity map, cost embedding, windowed
//! aggregation with optional visual guidance, similarity-gated upsampling
//! with encoder skips, and the density head.

mod density;
mod swin;

use std::rc::Rc;

use qica_autograd::{Mat, Real, ResamplePlan, Var};
use serde::{Deserialize, Serialize};

pub use density::DensityMap;
pub use swin::{SwinBlock, SwinSpec, WindowLayout};

use crate::backbone::DenseVisual;
use crate::error::{QicaError, Result};
use crate::params::{Ctx, Init, LayerNorm, Linear, ParamGroup, ParamStore};

/// Denominator guard for cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

const HEAD_WEIGHT_STD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Cost feature width `d_g`.
    pub width: usize,
    pub num_heads: usize,
    pub window: usize,
    /// Feed projected visual features into attention queries and keys.
    pub guidance: bool,
    /// Halve the channel count at each upsampling stage.
    pub halve_channels: bool,
    pub mlp_ratio: usize,
    /// Initial bias of the density head.
    pub head_bias: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            num_heads: 4,
            window: 4,
            guidance: true,
            halve_channels: true,
            mlp_ratio: 4,
            head_bias: 0.02,
        }
    }
}

impl DecoderConfig {
    /// Channel widths `[c0, c1, c2]` before and after each upsampling stage.
    pub fn stage_channels(&self) -> [usize; 3] {
        if self.halve_channels {
            [self.width, (self.width / 2).max(1), (self.width / 4).max(1)]
        } else {
            [self.width; 3]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(QicaError::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.num_heads
            )));
        }
        if self.stage_channels()[2] < 2 {
            return Err(QicaError::Config(format!(
                "decoder width {} leaves fewer than 2 channels in the last stage",
                self.width
            )));
        }
        if self.window < 2 {
            return Err(QicaError::Config("window must be at least 2".into()));
        }
        Ok(())
    }
}

/// 3x3 same-padding convolution on `[h*w, c]` maps.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3 {
    pub linear: Linear,
}

impl Conv3x3 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            linear: Linear::new(store, init, name, ParamGroup::Decoder, 9 * c_in, c_out),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var, grid: (usize, usize)) -> Var {
        let cols = ctx.graph.im2col3x3(x, grid.0, grid.1);
        self.linear.forward(ctx, cols)
    }
}

/// One similarity-gated 2x upsampling stage. Its convolution is a block:
/// 3x3 conv, per-pixel layer norm over channels, GELU.
#[derive(Clone, Debug)]
pub struct UpStage {
    pub skip_projection: Linear,
    pub conv: Conv3x3,
    pub norm: LayerNorm,
}

impl UpStage {
    pub fn conv_block<T: Real>(&self, ctx: &Ctx<T>, x: Var, grid: (usize, usize)) -> Var {
        let y = self.conv.forward(ctx, x, grid);
        let y = self.norm.forward(ctx, y);
        ctx.graph.gelu(y)
    }
}

/// Decoder outputs for one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[h*w, 1]`.
    pub similarity: Var,
    /// `[4h*4w, 1]`, nonnegative.
    pub density: Var,
    /// Sum of `density`, `[1, 1]`.
    pub count: Var,
    pub out_grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct CostDecoder {
    pub config: DecoderConfig,
    /// Maps text embeddings into the visual width; `None` when the widths agree.
    bridge: Option<Linear>,
    cost_embedding: Conv3x3,
    blocks: [SwinBlock; 2],
    stages: [UpStage; 2],
    head: Linear,
}

impl CostDecoder {
    pub fn new<T: Real>(
        config: DecoderConfig,
        text_width: usize,
        vision_width: usize,
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Self {
        let d = config.width;
        let bridge = (text_width != vision_width).then(|| {
            Linear::with_weight(
                store,
                "decoder.bridge",
                ParamGroup::Decoder,
                Mat::identity_like(text_width, vision_width),
            )
        });
        let cost_embedding = Conv3x3::new(store, init, "decoder.cost_embedding", 1, d);
        let guidance_width = config.guidance.then_some(vision_width);
        let block = |shift: usize, name: &str, store: &mut ParamStore<T>, init: &mut Init| {
            SwinBlock::new(
                SwinSpec {
                    width: d,
                    guidance_width,
                    heads: config.num_heads,
                    window: config.window,
                    shift,
                    mlp_ratio: config.mlp_ratio,
                },
                name,
                store,
                init,
            )
        };
        let blocks = [
            block(0, "decoder.aggregate0", store, init),
            block(config.window / 2, "decoder.aggregate1", store, init),
        ];
        let ch = config.stage_channels();
        let stage = |r: usize, store: &mut ParamStore<T>, init: &mut Init| UpStage {
            skip_projection: Linear::new(
                store,
                init,
                &format!("decoder.up{r}.skip_projection"),
                ParamGroup::Decoder,
                vision_width,
                ch[r],
            ),
            conv: Conv3x3::new(store, init, &format!("decoder.up{r}.conv"), ch[r], ch[r + 1]),
            norm: LayerNorm::new(store, &format!("decoder.up{r}.norm"), ParamGroup::Decoder, ch[r + 1]),
        };
        let stages = [stage(0, store, init), stage(1, store, init)];
        // near-zero weights: the initial map is close to the uniform bias
        // and every cell starts above the ReLU threshold
        let head_weight = init.normal(ch[2], 1, HEAD_WEIGHT_STD);
        let head = Linear::with_weight(store, "head", ParamGroup::Head, head_weight);
        *store.value_mut(head.bias) = Mat::scalar(T::of(config.head_bias));
        Self {
            config,
            bridge,
            cost_embedding,
            blocks,
            stages,
            head,
        }
    }

    pub fn blocks(&self) -> &[SwinBlock; 2] {
        &self.blocks
    }

    pub fn stages(&self) -> &[UpStage; 2] {
        &self.stages
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn bridge(&self) -> Option<Linear> {
        self.bridge
    }

    /// Text embedding mapped into the visual width.
    pub fn bridge_text<T: Real>(&self, ctx: &Ctx<T>, text: Var) -> Var {
        match self.bridge {
            Some(b) => b.forward(ctx, text),
            None => text,
        }
    }

    /// Cosine similarity of every dense feature with the (bridged) text
    /// embedding, `[h*w, 1]` in `[-1, 1]`.
    pub fn similarity_map<T: Real>(&self, ctx: &Ctx<T>, dense: Var, text: Var) -> Result<Var> {
        let t = self.bridge_text(ctx, text);
        let (dw, tw) = (ctx.graph.shape(dense).1, ctx.graph.shape(t).1);
        if dw != tw {
            return Err(QicaError::Shape {
                what: "text embedding for similarity".into(),
                expected: (1, dw),
                got: (1, tw),
            });
        }
        Ok(ctx.graph.cosine_rows(dense, t, COSINE_EPS))
    }

    /// `[h*w, 1]` similarity to `[h*w, d_g]` cost features.
    pub fn embed_cost<T: Real>(&self, ctx: &Ctx<T>, similarity: Var, grid: (usize, usize)) -> Var {
        self.cost_embedding.forward(ctx, similarity, grid)
    }

    /// Two windowed blocks (plain, then shifted by half a window).
    pub fn aggregate<T: Real>(
        &self,
        ctx: &Ctx<T>,
        cost: Var,
        dense: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let rows = grid.0 * grid.1;
        for (what, v) in [("cost features", cost), ("dense features", dense)] {
            let got = ctx.graph.shape(v);
            if got.0 != rows {
                return Err(QicaError::Resolution(format!("{what} have {} rows for a {grid:?} grid", got.0)));
            }
        }
        let mut x = cost;
        for b in &self.blocks {
            x = b.forward(ctx, x, Some(dense), grid);
        }
        Ok(x)
    }

    /// Upsamples `features` 2x and adds the projected encoder skip gated by
    /// `sigmoid(similarity)`, both resized to the new resolution, then
    /// applies the stage convolution block.
    #[allow(clippy::too_many_arguments)]
    pub fn upsample_stage<T: Real>(
        &self,
        ctx: &Ctx<T>,
        stage: usize,
        features: Var,
        grid: (usize, usize),
        skip: Var,
        similarity: Var,
        skip_grid: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let g = ctx.graph;
        let st = &self.stages[stage];
        let out_grid = (grid.0 * 2, grid.1 * 2);
        let rows = out_grid.0 * out_grid.1;
        let up = g.resample(features, Rc::new(ResamplePlan::bilinear(grid, out_grid)));
        let skip_plan = Rc::new(ResamplePlan::bilinear(skip_grid, out_grid));
        let projected = st.skip_projection.forward(ctx, skip);
        let projected = g.resample(projected, skip_plan.clone());
        let gate = g.resample(similarity, skip_plan);
        let gate = g.sigmoid(gate);
        for (what, v) in [("upsampled features", up), ("skip features", projected), ("gate", gate)] {
            if g.shape(v).0 != rows {
                return Err(QicaError::Resolution(format!("{what} not at {out_grid:?}")));
            }
        }
        if g.shape(up).1 != g.shape(projected).1 {
            return Err(QicaError::Resolution("skip projection width differs from features".into()));
        }
        let gated = g.mul_col(projected, gate);
        let mixed = g.add(up, gated);
        Ok((st.conv_block(ctx, mixed, out_grid), out_grid))
    }

    /// 1x1 convolution to one channel and a ReLU.
    pub fn predict_density<T: Real>(&self, ctx: &Ctx<T>, features: Var) -> Var {
        let d = self.head.forward(ctx, features);
        ctx.graph.relu(d)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, visual: &DenseVisual, text: Var) -> Result<DecoderOutput> {
        let g = ctx.graph;
        let grid = visual.grid;
        if visual.stages.len() != 2 {
            return Err(QicaError::Config("decoder needs two encoder skip stages".into()));
        }
        let similarity = self.similarity_map(ctx, visual.dense, text)?;
        let cost = self.embed_cost(ctx, similarity, grid);
        let mut x = self.aggregate(ctx, cost, visual.dense, grid)?;
        let mut cur = grid;
        // deeper encoder stage feeds the first (coarsest) upsampling
        for (r, &skip) in visual.stages.iter().rev().enumerate() {
            let (next, next_grid) = self.upsample_stage(ctx, r, x, cur, skip, similarity, grid)?;
            x = next;
            cur = next_grid;
        }
        let density = self.predict_density(ctx, x);
        let count = g.sum(density);
        Ok(DecoderOutput {
            similarity,
            density,
            count,
            out_grid: cur,
        })
    }
}

/// Copies a `[h*w, 1]` density node into a [`DensityMap`].
pub fn to_density_map<T: Real>(values: &Mat<T>, grid: (usize, usize)) -> DensityMap {
    DensityMap {
        height: grid.0,
        width: grid.1,
        data: values.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}
