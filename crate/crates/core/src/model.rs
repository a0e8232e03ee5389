//! The assembled counting model and its two forward paths.

use qica_autograd::{Graph, Mat, Real, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    TextEncoder, TextEncoderConfig, TokenSeq, VisionEncoder, VisionEncoderConfig, VocabTokenizer,
};
use crate::data::{Category, Image};
use crate::decoder::{to_density_map, CostDecoder, DecoderConfig, DecoderOutput, DensityMap};
use crate::error::{QicaError, Result};
use crate::loss::{self, LossBreakdown, LossWeights};
use crate::params::{Ctx, ForwardProbe, Init, ParamStore};
use crate::prompting::{CategoryProjector, CouplingStack, EncodedPair, PromptBank};
use crate::quantity::{make_hypotheses, validate_k, QuantityEmbedder, QuantityHypothesisSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub vision: VisionEncoderConfig,
    pub decoder: DecoderConfig,
    pub categories: Vec<String>,
    /// Largest integer with a number token and a quantity embedding.
    pub max_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            vision: VisionEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            categories: Category::ALL.iter().map(|c| c.name().to_string()).collect(),
            max_count: 512,
        }
    }
}

impl ModelConfig {
    /// Shallow encoders for fast experiments: 2 text layers, 4 vision
    /// layers with skips after layers 2 and 3, prompts in the first 2.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.text.num_layers = 2;
        c.text.prompt_depth = 2;
        c.vision.num_layers = 4;
        c.vision.skip_stage_indices = vec![2, 3];
        c.max_count = 128;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.vision.validate()?;
        self.decoder.validate()?;
        if self.text.prompt_depth > self.vision.num_layers {
            return Err(QicaError::Config(format!(
                "prompt depth {} exceeds {} vision layers",
                self.text.prompt_depth, self.vision.num_layers
            )));
        }
        if self.categories.is_empty() {
            return Err(QicaError::Config("no categories".into()));
        }
        Ok(())
    }

    /// Density resolution: four times the patch grid.
    pub fn density_hw(&self) -> (usize, usize) {
        let (h, w) = self.vision.grid();
        (4 * h, 4 * w)
    }
}

/// How a training example is turned into a loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingObjective {
    pub k: usize,
    pub weights: LossWeights,
    /// Score every hypothesis against one class token computed with
    /// unconditioned prompts.
    pub shared_vg: bool,
}

impl TrainingObjective {
    /// `K = 1` with both quantity weights at zero: plain density
    /// regression on the category-only path.
    pub fn is_plain_regression(&self) -> bool {
        self.k == 1 && self.weights.lambda_enc == 0.0 && self.weights.lambda_dec == 0.0
    }
}

/// Ground truth for one training example.
pub struct Target<'a> {
    pub image: &'a Image,
    pub density: &'a DensityMap,
    pub count: usize,
    pub category: &'a str,
}

pub struct TrainingForward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub hypotheses: Option<QuantityHypothesisSet>,
    pub counts: Vec<f64>,
    pub alignment: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QicaModel<T> {
    pub config: ModelConfig,
    pub tokenizer: VocabTokenizer,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub quantity: QuantityEmbedder,
    pub prompts: PromptBank,
    pub coupling: CouplingStack,
    pub category: CategoryProjector,
    pub decoder: CostDecoder,
    pub params: ParamStore<T>,
}

impl<T: Real> QicaModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let tokenizer = VocabTokenizer::new(&config.categories, config.max_count, config.text.max_seq_len);
        let (dt, dv) = (config.text.width, config.vision.width);
        let depth = config.text.prompt_depth;
        let text = TextEncoder::new(config.text.clone(), tokenizer.vocab_size(), &mut params, &mut init);
        let vision = VisionEncoder::new(config.vision.clone(), &mut params, &mut init);
        let quantity = QuantityEmbedder::new(config.max_count, dt, &mut params, &mut init);
        let prompts = PromptBank::new(depth, config.text.prompt_length, dt, &mut params, &mut init);
        let coupling = CouplingStack::new(depth, dt, dv, &mut params, &mut init);
        let category = CategoryProjector::new(dt, &mut params);
        let decoder = CostDecoder::new(config.decoder.clone(), dt, dv, &mut params, &mut init);
        Ok(Self {
            config,
            tokenizer,
            text,
            vision,
            quantity,
            prompts,
            coupling,
            category,
            decoder,
            params,
        })
    }

    pub fn density_hw(&self) -> (usize, usize) {
        self.config.density_hw()
    }

    /// Shared pipeline of both paths. `quantity` conditions the prompts
    /// (`None` keeps the raw grids); `project` applies the category
    /// projection to the text output.
    pub fn forward_conditioned(
        &self,
        ctx: &Ctx<T>,
        patches: Var,
        tokens: &TokenSeq,
        quantity: Option<Var>,
        project: bool,
    ) -> Result<EncodedPair> {
        let text_prompts = match quantity {
            Some(eps) => self.prompts.condition(ctx, eps)?,
            None => self.prompts.raw(ctx),
        };
        let text_out = self.text.encode(ctx, tokens, &text_prompts)?;
        let vision_prompts = self.coupling.couple(ctx, &text_prompts)?;
        let visual = self.vision.encode_embedded(ctx, patches, &vision_prompts)?;
        let (text_full, text_category) = if project {
            ForwardProbe::bump(&ctx.probe.category_project);
            (Some(text_out), self.category.project(ctx, text_out))
        } else {
            (None, text_out)
        };
        Ok(EncodedPair {
            text_full,
            text_category,
            visual,
            hypothesis: None,
        })
    }

    /// Training path for hypothesis `index` with count `q`.
    pub fn forward_hypothesis(
        &self,
        ctx: &Ctx<T>,
        patches: Var,
        category: &str,
        q: usize,
        index: usize,
    ) -> Result<EncodedPair> {
        let tokens = self.tokenizer.tokenize(&VocabTokenizer::training_text(category, q))?;
        ForwardProbe::bump(&ctx.probe.embed_quantity);
        let eps = self.quantity.embed(ctx, q)?;
        let mut pair = self.forward_conditioned(ctx, patches, &tokens, Some(eps), true)?;
        pair.hypothesis = Some(index);
        Ok(pair)
    }

    /// Inference path: number-free text, raw prompts, no category
    /// projection.
    pub fn forward_inference(&self, ctx: &Ctx<T>, patches: Var, text: &str) -> Result<EncodedPair> {
        let tokens = self.tokenizer.tokenize_inference(text)?;
        self.forward_conditioned(ctx, patches, &tokens, None, false)
    }

    pub fn decode(&self, ctx: &Ctx<T>, pair: &EncodedPair) -> Result<DecoderOutput> {
        self.decoder.forward(ctx, &pair.visual, pair.text_category)
    }

    /// Builds the training loss of one example inside `ctx`.
    pub fn training_forward(
        &self,
        ctx: &Ctx<T>,
        target: &Target,
        objective: &TrainingObjective,
    ) -> Result<TrainingForward> {
        validate_k(objective.k)?;
        let g = ctx.graph;
        let (dh, dw) = self.density_hw();
        if (target.density.height, target.density.width) != (dh, dw) {
            return Err(QicaError::Resolution(format!(
                "ground truth is {}x{}, decoder produces {dh}x{dw}",
                target.density.height, target.density.width
            )));
        }
        let gt = g.constant(Mat::from_vec(
            dh * dw,
            1,
            target.density.data.iter().map(|&v| T::of(v as f64)).collect(),
        ));
        let patches = self.vision.embed_patches(ctx, target.image)?;

        if objective.is_plain_regression() {
            let pair = self.forward_inference(ctx, patches, &VocabTokenizer::inference_text(target.category))?;
            let out = self.decode(ctx, &pair)?;
            let density = loss::density_loss(g, out.density, gt)?;
            let zero = g.constant(Mat::scalar(T::zero()));
            let (loss, breakdown) = loss::total_loss(g, density, zero, zero, objective.weights);
            return Ok(TrainingForward {
                loss,
                breakdown,
                hypotheses: None,
                counts: vec![g.value(out.count).item().as_f64()],
                alignment: Vec::new(),
            });
        }

        let hyp = make_hypotheses(target.count, objective.k)?;
        let mut pairs = Vec::with_capacity(hyp.len());
        let mut outputs = Vec::with_capacity(hyp.len());
        for (i, &q) in hyp.quantities.iter().enumerate() {
            let pair = self.forward_hypothesis(ctx, patches, target.category, q, i)?;
            outputs.push(self.decode(ctx, &pair)?);
            pairs.push(pair);
        }
        let shared = if objective.shared_vg {
            let prompts = self.prompts.raw(ctx);
            let vision_prompts = self.coupling.couple(ctx, &prompts)?;
            Some(self.vision.encode_embedded(ctx, patches, &vision_prompts)?.global)
        } else {
            None
        };
        let alphas = loss::alignment_scores(ctx, &self.decoder, &pairs, shared)?;
        let counts: Vec<Var> = outputs.iter().map(|o| o.count).collect();
        let density = loss::density_loss(g, outputs[0].density, gt)?;
        let enc = loss::enc_quantity_loss(g, &alphas, &hyp);
        let dec = loss::dec_quantity_loss(g, &counts, &hyp, objective.weights.beta);
        let (loss, breakdown) = loss::total_loss(g, density, enc, dec, objective.weights);
        Ok(TrainingForward {
            loss,
            breakdown,
            counts: counts.iter().map(|&c| g.value(c).item().as_f64()).collect(),
            alignment: alphas.iter().map(|&a| g.value(a).item().as_f64()).collect(),
            hypotheses: Some(hyp),
        })
    }

    /// Inference-only density prediction.
    pub fn predict(&self, image: &Image, text: &str) -> Result<DensityMap> {
        let g = Graph::new();
        let ctx = Ctx::no_grad(&g, &self.params);
        let patches = self.vision.embed_patches(&ctx, image)?;
        let pair = self.forward_inference(&ctx, patches, text)?;
        let out = self.decode(&ctx, &pair)?;
        Ok(to_density_map(&g.value(out.density), out.out_grid))
    }

    pub fn cast<U: Real>(&self) -> QicaModel<U> {
        QicaModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            text: self.text.clone(),
            vision: self.vision.clone(),
            quantity: self.quantity.clone(),
            prompts: self.prompts.clone(),
            coupling: self.coupling.clone(),
            category: self.category.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
        }
    }
}
