//! Heatmap ensembling and decoding.
//!
//! An [`EnsembleModel`] owns N branches and 2^N − 1 linear combiners: one
//! for the full set and one for every strict non-empty subset. Each combiner
//! mixes its members' raw heatmaps pixelwise, the mix goes through a
//! spatial softmax, and the first moments of the resulting probability map
//! give the normalised (yaw, pitch) or screen estimate.

use crate::branches::{BranchConfig, Mode, StatUpdate, WeakPredictor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// All strict non-empty subsets of `{0, …, n−1}`, ordered by size and then
/// lexicographically. There are 2^n − 2 of them.
pub fn enumerate_subsets(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 1..n {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            out.push(combo.clone());
            // Advance to the next combination in lexicographic order.
            let mut i = size;
            while i > 0 && combo[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    out
}

/// Canonical text key of a subset, e.g. `"0,2"`.
pub fn subset_key(subset: &[usize]) -> String {
    subset
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Learned 1×1 mix of the heatmaps of one subset of branches (no bias).
#[derive(Debug, Clone)]
pub struct SubsetCombiner {
    pub subset: Vec<usize>,
    pub lambdas: ParamId,
    pub is_full: bool,
}

impl SubsetCombiner {
    pub fn key(&self) -> String {
        subset_key(&self.subset)
    }
}

/// Pixelwise Σ λ_j H_j over the combiner's members. `heatmaps` is indexed by branch.
pub fn merge_heatmaps(
    g: &mut Graph,
    store: &ParamStore,
    combiner: &SubsetCombiner,
    heatmaps: &[Var],
) -> Result<Var> {
    let members = combiner
        .subset
        .iter()
        .map(|&i| {
            heatmaps.get(i).copied().ok_or_else(|| {
                Error::usage(format!(
                    "merge_heatmaps: no heatmap for branch {i} (have {})",
                    heatmaps.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lambdas = g.param(store, combiner.lambdas);
    g.weighted_sum(&members, lambdas)
}

/// Probability map and decoded `[B, 2]` coordinates of a merged heatmap.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub merged: Var,
    pub prob: Var,
    pub coords: Var,
}

pub fn decode(g: &mut Graph, merged: Var) -> Result<Decoded> {
    let prob = g.spatial_softmax(merged)?;
    let coords = g.soft_argmax(prob)?;
    Ok(Decoded {
        merged,
        prob,
        coords,
    })
}

/// Spatial softmax of a single S×S map.
pub fn spatial_softmax(h: &Tensor) -> Result<Tensor> {
    let s = h.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("spatial_softmax: expected S×S, got {s:?}")));
    }
    let mut g = Graph::new();
    let v = g.constant(h.reshaped(&[1, s[0], s[1]])?);
    let p = g.spatial_softmax(v)?;
    g.value(p).reshaped(&s)
}

/// First-order moments (x, y) of a single probability map.
pub fn soft_argmax(prob: &Tensor) -> Result<(f64, f64)> {
    let s = prob.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("soft_argmax: expected S×S, got {s:?}")));
    }
    let mut g = Graph::new();
    let v = g.constant(prob.reshaped(&[1, s[0], s[1]])?);
    let c = g.soft_argmax(v)?;
    let d = g.value(c).data();
    Ok((d[0], d[1]))
}

/// Everything one ensemble forward pass produces.
#[derive(Debug)]
pub struct EnsembleOutput {
    /// Raw heatmap of each branch, `[B, S, S]`.
    pub branch_heatmaps: Vec<Var>,
    pub full: Decoded,
    /// One entry per strict subset, in [`enumerate_subsets`] order.
    pub subsets: Vec<(Vec<usize>, Decoded)>,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Debug)]
pub struct EnsembleModel {
    predictors: Vec<WeakPredictor>,
    full: SubsetCombiner,
    subsets: Vec<SubsetCombiner>,
    store: ParamStore,
    heatmap_size: usize,
}

impl EnsembleModel {
    /// Builds the branches and combiners. Combiner weights start uniform:
    /// 1/|I| for every member.
    pub fn build(configs: &[BranchConfig], seed: u64) -> Result<Self> {
        let first = configs
            .first()
            .ok_or_else(|| Error::config("an ensemble needs at least one branch"))?;
        let heatmap_size = first.heatmap_size;
        if configs.iter().any(|c| c.heatmap_size != heatmap_size) {
            return Err(Error::config("all branches must share one heatmap_size"));
        }
        let mut store = ParamStore::new();
        let predictors = configs
            .iter()
            .enumerate()
            .map(|(i, c)| WeakPredictor::build(c.clone(), i, seed, &mut store))
            .collect::<Result<Vec<_>>>()?;
        let n = configs.len();
        let mut make = |subset: Vec<usize>, is_full: bool| -> Result<SubsetCombiner> {
            let k = subset.len();
            let lambdas = store.trainable(
                format!("combiner/{}/lambda", subset_key(&subset)),
                Tensor::full(&[k], 1.0 / k as f64),
            )?;
            Ok(SubsetCombiner {
                subset,
                lambdas,
                is_full,
            })
        };
        let full = make((0..n).collect(), true)?;
        let subsets = enumerate_subsets(n)
            .into_iter()
            .map(|s| make(s, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            predictors,
            full,
            subsets,
            store,
            heatmap_size,
        })
    }

    pub fn predictors(&self) -> &[WeakPredictor] {
        &self.predictors
    }

    pub fn n_branches(&self) -> usize {
        self.predictors.len()
    }

    pub fn heatmap_size(&self) -> usize {
        self.heatmap_size
    }

    pub fn full_combiner(&self) -> &SubsetCombiner {
        &self.full
    }

    pub fn subset_combiners(&self) -> &[SubsetCombiner] {
        &self.subsets
    }

    /// The full combiner followed by all subset combiners.
    pub fn combiners(&self) -> impl Iterator<Item = &SubsetCombiner> {
        std::iter::once(&self.full).chain(&self.subsets)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Runs every branch once and decodes the full ensemble and every subset.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mode: Mode) -> Result<EnsembleOutput> {
        self.forward_with(g, &self.store, batch, mode)
    }

    /// Forward pass reading parameters from `store` instead of the model's own
    /// (same layout); used for finite-difference checks.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, batch: &Batch, mode: Mode) -> Result<EnsembleOutput> {
        let mut stat_updates = Vec::new();
        let branch_heatmaps = self
            .predictors
            .iter()
            .map(|p| p.forward(g, store, batch, mode, &mut stat_updates))
            .collect::<Result<Vec<_>>>()?;
        let merged = merge_heatmaps(g, store, &self.full, &branch_heatmaps)?;
        let full = decode(g, merged)?;
        let mut subsets = Vec::with_capacity(self.subsets.len());
        for c in &self.subsets {
            let merged = merge_heatmaps(g, store, c, &branch_heatmaps)?;
            subsets.push((c.subset.clone(), decode(g, merged)?));
        }
        Ok(EnsembleOutput {
            branch_heatmaps,
            full,
            subsets,
            stat_updates,
        })
    }

    /// Standalone decode of every branch heatmap (λ-free), for per-branch errors.
    pub fn decode_branches(&self, g: &mut Graph, out: &EnsembleOutput) -> Result<Vec<Decoded>> {
        out.branch_heatmaps.iter().map(|h| decode(g, *h)).collect()
    }
}
