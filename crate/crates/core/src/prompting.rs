//! Quantity-conditioned prompting: conditioning, category projection,
//! text-to-vision coupling and the two forward paths.

use qica_autograd::{Mat, Real, Var};

use crate::backbone::DenseVisual;
use crate::error::{QicaError, Result};
pub use crate::params::ForwardProbe;
use crate::params::{Ctx, Init, Linear, ParamGroup, ParamId, ParamStore};

/// Learnable text prompt grids `[m, d_t]`, one per prompted layer.
#[derive(Clone, Debug)]
pub struct PromptBank {
    grids: Vec<ParamId>,
}

impl PromptBank {
    pub fn new<T: Real>(depth: usize, length: usize, width: usize, store: &mut ParamStore<T>, init: &mut Init) -> Self {
        let grids = (0..depth)
            .map(|j| store.add(format!("prompt.text.{j}"), ParamGroup::Prompts, init.normal(length, width, 0.02)))
            .collect();
        Self { grids }
    }

    pub fn depth(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, layer: usize) -> ParamId {
        self.grids[layer]
    }

    /// Raw grids, no conditioning.
    pub fn raw<T: Real>(&self, ctx: &Ctx<T>) -> Vec<Var> {
        self.grids.iter().map(|&id| ctx.p(id)).collect()
    }

    /// Adds `quantity` (`[1, d_t]`) to every row of every grid.
    pub fn condition<T: Real>(&self, ctx: &Ctx<T>, quantity: Var) -> Result<Vec<Var>> {
        let width = ctx.params.value(self.grids[0]).cols();
        let got = ctx.graph.shape(quantity);
        if got != (1, width) {
            return Err(QicaError::Shape {
                what: "quantity embedding".into(),
                expected: (1, width),
                got,
            });
        }
        Ok(self
            .grids
            .iter()
            .map(|&id| ctx.graph.add_row(ctx.p(id), quantity))
            .collect())
    }
}

/// Per-layer linear maps from text prompts (`d_t`) to vision prompts (`d_v`).
#[derive(Clone, Debug)]
pub struct CouplingStack {
    maps: Vec<Linear>,
}

impl CouplingStack {
    pub fn new<T: Real>(
        depth: usize,
        text_width: usize,
        vision_width: usize,
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Self {
        let maps = (0..depth)
            .map(|j| {
                let w = init.normal(text_width, vision_width, 0.02);
                Linear::with_weight(store, &format!("coupling.{j}"), ParamGroup::Coupling, w)
            })
            .collect();
        Self { maps }
    }

    pub fn map(&self, layer: usize) -> Linear {
        self.maps[layer]
    }

    pub fn couple<T: Real>(&self, ctx: &Ctx<T>, text_prompts: &[Var]) -> Result<Vec<Var>> {
        if text_prompts.len() != self.maps.len() {
            return Err(QicaError::Config(format!(
                "{} prompt grids for {} coupling maps",
                text_prompts.len(),
                self.maps.len()
            )));
        }
        text_prompts
            .iter()
            .zip(&self.maps)
            .map(|(&p, map)| {
                let (din, _) = map.dims(ctx.params);
                let got = ctx.graph.shape(p);
                if got.1 != din {
                    return Err(QicaError::Shape {
                        what: "text prompt grid".into(),
                        expected: (got.0, din),
                        got,
                    });
                }
                Ok(map.forward(ctx, p))
            })
            .collect()
    }
}

/// Square map on the text width that strips quantity content from the
/// full text embedding. Starts as the identity.
#[derive(Clone, Debug)]
pub struct CategoryProjector {
    linear: Linear,
}

impl CategoryProjector {
    pub fn new<T: Real>(width: usize, store: &mut ParamStore<T>) -> Self {
        Self {
            linear: Linear::with_weight(
                store,
                "category_projection",
                ParamGroup::CategoryProjection,
                Mat::identity_like(width, width),
            ),
        }
    }

    pub fn linear(&self) -> Linear {
        self.linear
    }

    pub fn project<T: Real>(&self, ctx: &Ctx<T>, full: Var) -> Var {
        self.linear.forward(ctx, full)
    }
}

/// Encoder outputs for one hypothesis (or the inference path).
#[derive(Clone, Debug)]
pub struct EncodedPair {
    /// Full text embedding `[1, d_t]`; absent on the inference path.
    pub text_full: Option<Var>,
    /// Category embedding `[1, d_t]`.
    pub text_category: Var,
    pub visual: DenseVisual,
    /// Hypothesis index; `None` on the inference path.
    pub hypothesis: Option<usize>,
}
