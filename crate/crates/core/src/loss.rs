//! Training objectives: the L2 gaze loss on the full ensemble, the per-subset
//! losses, the stochastic μ-weighted combinatory loss and the total loss
//! `L0 + ν·L_comb`.

use std::collections::BTreeMap;

use rand::Rng;
use rand::distr::Open01;
use serde::{Deserialize, Serialize};

use crate::ensemble::subset_key;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Mean over the batch of (γ̂−γ*)² + (β̂−β*)², everything in normalised units.
pub fn l2_gaze_loss(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    g.squared_error_mean(pred, truth)
}

/// Random convex weights over the strict subsets, redrawn for every batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuWeights {
    pub weights: Vec<(Vec<usize>, f64)>,
    pub batch_id: u64,
}

impl MuWeights {
    pub fn get(&self, subset: &[usize]) -> Option<f64> {
        self.weights.iter().find(|(s, _)| s == subset).map(|(_, w)| *w)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|(_, w)| w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Puts all mass on one subset.
    pub fn concentrated(subsets: &[Vec<usize>], on: &[usize], batch_id: u64) -> Self {
        Self {
            weights: subsets
                .iter()
                .map(|s| (s.clone(), if s == on { 1.0 } else { 0.0 }))
                .collect(),
            batch_id,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.weights.iter().map(|(s, w)| (subset_key(s), *w)).collect()
    }
}

/// u^I ~ U(0, 1) independently, μ^I = u^I / Σ u. No subsets gives no weights.
pub fn sample_mu<R: Rng + ?Sized>(rng: &mut R, subsets: &[Vec<usize>], batch_id: u64) -> MuWeights {
    let raw: Vec<f64> = subsets.iter().map(|_| rng.sample(Open01)).collect();
    let total: f64 = raw.iter().sum();
    MuWeights {
        weights: subsets
            .iter()
            .cloned()
            .zip(raw.iter().map(|u| u / total))
            .collect(),
        batch_id,
    }
}

/// Graph nodes of the combinatory loss.
#[derive(Debug, Clone)]
pub struct CombinatoryTerms {
    pub l_comb: Var,
    pub per_subset: Vec<(Vec<usize>, Var)>,
}

/// L_comb = Σ_I μ^I · L^I, where L^I is the L2 gaze loss of subset I.
pub fn combinatory_loss(
    g: &mut Graph,
    per_subset_preds: &[(Vec<usize>, Var)],
    truth: &Tensor,
    mu: &MuWeights,
) -> Result<CombinatoryTerms> {
    if per_subset_preds.len() != mu.weights.len() {
        return Err(Error::usage(format!(
            "combinatory_loss: {} subset predictions but {} weights",
            per_subset_preds.len(),
            mu.weights.len()
        )));
    }
    let mut per_subset = Vec::with_capacity(per_subset_preds.len());
    let mut terms = Vec::with_capacity(per_subset_preds.len());
    for (subset, pred) in per_subset_preds {
        let w = mu.get(subset).ok_or_else(|| {
            Error::usage(format!(
                "combinatory_loss: no weight for subset {{{}}}",
                subset_key(subset)
            ))
        })?;
        let l = l2_gaze_loss(g, *pred, truth)?;
        per_subset.push((subset.clone(), l));
        terms.push((l, w));
    }
    let l_comb = g.linear_combination(&terms)?;
    Ok(CombinatoryTerms { l_comb, per_subset })
}

/// L_tot = L0 + ν · L_comb.
pub fn total_loss(g: &mut Graph, l0: Var, l_comb: Var, nu: f64) -> Result<Var> {
    if !(nu >= 0.0) {
        return Err(Error::config(format!("nu must be non-negative, got {nu}")));
    }
    g.linear_combination(&[(l0, 1.0), (l_comb, nu)])
}

/// Scalar values of every loss term of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l0: f64,
    pub per_subset: BTreeMap<String, f64>,
    pub l_comb: f64,
    pub l_tot: f64,
    pub nu: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, l0: Var, terms: &CombinatoryTerms, l_tot: Var, nu: f64) -> Result<Self> {
        Ok(Self {
            l0: g.value(l0).item()?,
            per_subset: terms
                .per_subset
                .iter()
                .map(|(s, v)| Ok((subset_key(s), g.value(*v).item()?)))
                .collect::<Result<_>>()?,
            l_comb: g.value(terms.l_comb).item()?,
            l_tot: g.value(l_tot).item()?,
            nu,
        })
    }
}
