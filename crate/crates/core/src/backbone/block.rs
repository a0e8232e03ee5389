use std::rc::Rc;

use qica_autograd::{Real, Var};

use crate::params::{Ctx, Init, LayerNorm, Linear, ParamGroup, ParamStore};

/// Pre-norm transformer encoder layer with a GELU MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_mlp: LayerNorm,
    fc_in: Linear,
    fc_out: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), group, width),
            query: Linear::new(store, init, &format!("{name}.attn.query"), group, width, width),
            key: Linear::new(store, init, &format!("{name}.attn.key"), group, width, width),
            value: Linear::new(store, init, &format!("{name}.attn.value"), group, width, width),
            out: Linear::new(store, init, &format!("{name}.attn.out"), group, width, width),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), group, width),
            fc_in: Linear::new(store, init, &format!("{name}.mlp.fc_in"), group, width, hidden),
            fc_out: Linear::new(store, init, &format!("{name}.mlp.fc_out"), group, hidden, width),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var, mask: Option<Rc<Vec<T>>>) -> Var {
        let g = ctx.graph;
        let h = self.ln_attn.forward(ctx, x);
        let q = self.query.forward(ctx, h);
        let k = self.key.forward(ctx, h);
        let v = self.value.forward(ctx, h);
        let a = g.attention(q, k, v, self.heads, 1, None, mask);
        let a = self.out.forward(ctx, a);
        let x = g.add(x, a);
        let h = self.ln_mlp.forward(ctx, x);
        let h = self.fc_in.forward(ctx, h);
        let h = g.gelu(h);
        let h = self.fc_out.forward(ctx, h);
        g.add(x, h)
    }
}
