//! Factual/counterfactual quantity hypotheses and the learned quantity
//! embedding.

use std::ops::Range;
use std::rc::Rc;

use qica_autograd::{Real, Var};

use crate::error::{QicaError, Result};
use crate::params::{Ctx, Init, Linear, ParamGroup, ParamId, ParamStore};

/// Validates the hypothesis count: odd and at least 1.
pub fn validate_k(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(QicaError::Config(format!("K must be odd and at least 1, got {k}")));
    }
    Ok(())
}

/// Counterfactual spacing for a ground-truth count.
///
/// Roughly 20% of the count, capped so the symmetric set stays
/// nonnegative, never below 1.
pub fn make_delta(n_gt: usize, k: usize) -> Result<usize> {
    validate_k(k)?;
    if k < 3 {
        return Err(QicaError::Config("spacing needs at least three hypotheses".into()));
    }
    let half = (k - 1) / 2;
    if n_gt < half {
        return Ok(1);
    }
    let relative = (0.2 * n_gt as f64).round() as usize;
    let cap = 2 * n_gt / (k - 1);
    Ok(relative.min(cap).max(1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantityHypothesisSet {
    pub n_gt: usize,
    pub delta: usize,
    /// `[n_gt, below near..far, above near..far]`.
    pub quantities: Vec<usize>,
    /// Index range of the below chain (empty when one-sided).
    pub below: Range<usize>,
    /// Index range of the above chain.
    pub above: Range<usize>,
    /// Set when the count is too small for a below chain; every
    /// counterfactual then sits above `n_gt`.
    pub one_sided: bool,
}

impl QuantityHypothesisSet {
    pub fn len(&self) -> usize {
        self.quantities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quantities.is_empty()
    }

    /// Index ranges of the counterfactual chains, each ordered near to far.
    pub fn chains(&self) -> Vec<Range<usize>> {
        [self.below.clone(), self.above.clone()]
            .into_iter()
            .filter(|r| !r.is_empty())
            .collect()
    }
}

pub fn make_hypotheses(n_gt: usize, k: usize) -> Result<QuantityHypothesisSet> {
    validate_k(k)?;
    if k == 1 {
        return Ok(QuantityHypothesisSet {
            n_gt,
            delta: 1,
            quantities: vec![n_gt],
            below: 1..1,
            above: 1..1,
            one_sided: false,
        });
    }
    let half = (k - 1) / 2;
    let mut delta = make_delta(n_gt, k)?;
    if n_gt < half * delta {
        delta = 2 * n_gt / (k - 1);
    }
    if delta == 0 {
        let quantities = (0..k).map(|i| n_gt + i).collect();
        return Ok(QuantityHypothesisSet {
            n_gt,
            delta: 1,
            quantities,
            below: 1..1,
            above: 1..k,
            one_sided: true,
        });
    }
    let mut quantities = vec![n_gt];
    quantities.extend((1..=half).map(|i| n_gt - i * delta));
    quantities.extend((1..=half).map(|i| n_gt + i * delta));
    Ok(QuantityHypothesisSet {
        n_gt,
        delta,
        quantities,
        below: 1..1 + half,
        above: 1 + half..k,
        one_sided: false,
    })
}

/// Learned table over integer counts followed by a linear projection to
/// the text width.
#[derive(Clone, Debug)]
pub struct QuantityEmbedder {
    table: ParamId,
    projection: Linear,
    max_count: usize,
}

impl QuantityEmbedder {
    pub fn new<T: Real>(max_count: usize, width: usize, store: &mut ParamStore<T>, init: &mut Init) -> Self {
        let group = ParamGroup::Quantity;
        let table = store.add("quantity.table", group, init.normal(max_count + 1, width, 0.02));
        let projection = Linear::new(store, init, "quantity.projection", group, width, width);
        Self {
            table,
            projection,
            max_count,
        }
    }

    pub fn max_count(&self) -> usize {
        self.max_count
    }

    pub fn projection(&self) -> Linear {
        self.projection
    }

    /// `[1, d_t]` embedding of `q`.
    pub fn embed<T: Real>(&self, ctx: &Ctx<T>, q: usize) -> Result<Var> {
        if q > self.max_count {
            return Err(QicaError::QuantityOutOfRange { q, max: self.max_count });
        }
        let row = ctx.graph.gather_rows(ctx.p(self.table), Rc::new(vec![q]));
        Ok(self.projection.forward(ctx, row))
    }
}
