//! Multi-level quantity alignment objective.
//!
//! Hinges have zero margin and use the subgradient `relu'(0) = 0`.

use qica_autograd::{Graph, Mat, Real, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::{CostDecoder, COSINE_EPS};
use crate::error::{QicaError, Result};
use crate::params::Ctx;
use crate::prompting::EncodedPair;
use crate::quantity::QuantityHypothesisSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the encoder ranking loss.
    pub lambda_enc: f64,
    /// Weight of the decoder count loss.
    pub lambda_dec: f64,
    /// Weight of the counterfactual terms inside the decoder count loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_enc: 0.1,
            lambda_dec: 0.05,
            beta: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub density: f64,
    pub enc_qty: f64,
    pub dec_qty: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn combine(density: f64, enc_qty: f64, dec_qty: f64, weights: LossWeights) -> Self {
        Self {
            density,
            enc_qty,
            dec_qty,
            total: density + weights.lambda_enc * enc_qty + weights.lambda_dec * dec_qty,
            weights,
        }
    }
}

/// Cosine between each hypothesis' class token and its full text
/// embedding (mapped into the visual width), in hypothesis order.
///
/// `shared_global` replaces every per-hypothesis class token.
pub fn alignment_scores<T: Real>(
    ctx: &Ctx<T>,
    decoder: &CostDecoder,
    pairs: &[EncodedPair],
    shared_global: Option<Var>,
) -> Result<Vec<Var>> {
    pairs
        .iter()
        .map(|p| {
            let full = p
                .text_full
                .ok_or_else(|| QicaError::Config("alignment scores need training-path pairs".into()))?;
            let t = decoder.bridge_text(ctx, full);
            let v = shared_global.unwrap_or(p.visual.global);
            Ok(ctx.graph.cosine_rows(v, t, COSINE_EPS))
        })
        .collect()
}

/// Ranking hinge over alignment scores: the factual score must dominate,
/// and each counterfactual chain must not increase with distance.
pub fn enc_quantity_loss<T: Real>(g: &Graph<T>, alphas: &[Var], hyp: &QuantityHypothesisSet) -> Var {
    let k = hyp.len();
    assert_eq!(alphas.len(), k, "one score per hypothesis");
    if k < 3 {
        return g.constant(Mat::scalar(T::zero()));
    }
    let hinge = |lo: Var, hi: Var| {
        let d = g.sub(hi, lo);
        g.relu(d)
    };
    let dominance: Vec<Var> = (1..k).map(|i| hinge(alphas[0], alphas[i])).collect();
    let mut total = g.scale(sum_all(g, &dominance), T::of(1.0 / (k - 1) as f64));

    let mut chain_terms = Vec::new();
    for chain in hyp.chains() {
        for i in chain.start..chain.end.saturating_sub(1) {
            chain_terms.push(hinge(alphas[i], alphas[i + 1]));
        }
    }
    if !chain_terms.is_empty() {
        let norm = (k - 3).max(1) as f64;
        let chain = g.scale(sum_all(g, &chain_terms), T::of(1.0 / norm));
        total = g.add(total, chain);
    }
    total
}

/// `(n_0 - n_gt)^2 + beta * sum_k (n_k - q_k)^2`.
pub fn dec_quantity_loss<T: Real>(g: &Graph<T>, counts: &[Var], hyp: &QuantityHypothesisSet, beta: f64) -> Var {
    assert_eq!(counts.len(), hyp.len(), "one count per hypothesis");
    let term = |c: Var, q: usize| {
        let d = g.add_scalar(c, T::of(-(q as f64)));
        g.square(d)
    };
    let factual = term(counts[0], hyp.n_gt);
    if counts.len() == 1 {
        return factual;
    }
    let aux: Vec<Var> = counts[1..]
        .iter()
        .zip(&hyp.quantities[1..])
        .map(|(&c, &q)| term(c, q))
        .collect();
    let aux = g.scale(sum_all(g, &aux), T::of(beta));
    g.add(factual, aux)
}

/// Sum of squared per-cell differences.
pub fn density_loss<T: Real>(g: &Graph<T>, predicted: Var, target: Var) -> Result<Var> {
    let (p, t) = (g.shape(predicted), g.shape(target));
    if p != t {
        return Err(QicaError::Resolution(format!("density {p:?} vs ground truth {t:?}")));
    }
    let d = g.sub(predicted, target);
    Ok(g.sum_squares(d))
}

/// In-graph weighted total together with the scalar breakdown.
pub fn total_loss<T: Real>(
    g: &Graph<T>,
    density: Var,
    enc_qty: Var,
    dec_qty: Var,
    weights: LossWeights,
) -> (Var, LossBreakdown) {
    let e = g.scale(enc_qty, T::of(weights.lambda_enc));
    let d = g.scale(dec_qty, T::of(weights.lambda_dec));
    let sum = g.add(density, e);
    let total = g.add(sum, d);
    let breakdown = LossBreakdown::combine(
        g.value(density).item().as_f64(),
        g.value(enc_qty).item().as_f64(),
        g.value(dec_qty).item().as_f64(),
        weights,
    );
    (total, breakdown)
}

fn sum_all<T: Real>(g: &Graph<T>, terms: &[Var]) -> Var {
    let stacked = g.concat_rows(terms);
    g.sum(stacked)
}

/// Scalar evaluation of [`enc_quantity_loss`] on plain scores.
pub fn enc_quantity_loss_value(alphas: &[f64], hyp: &QuantityHypothesisSet) -> f64 {
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = alphas.iter().map(|&a| g.constant(Mat::scalar(a))).collect();
    let l = enc_quantity_loss(&g, &vars, hyp);
    g.value(l).item()
}

/// Scalar evaluation of [`dec_quantity_loss`] on plain counts.
pub fn dec_quantity_loss_value(counts: &[f64], hyp: &QuantityHypothesisSet, beta: f64) -> f64 {
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = counts.iter().map(|&c| g.constant(Mat::scalar(c))).collect();
    let l = dec_quantity_loss(&g, &vars, hyp, beta);
    g.value(l).item()
}
