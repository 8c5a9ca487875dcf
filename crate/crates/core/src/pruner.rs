//! Per-layer NMI matrices, the IQR-based redundancy limit and the iterative
//! expert elimination that turns them into a pruning plan.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensor_f64, resolve_expert_blocks, ExpertBlock, ModelManifest};
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::nmi::{redundancy_between, DiscretizedTensor};
use crate::scalar::Scalar;

/// Symmetric matrix of pairwise expert redundancy for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmiMatrix<T> {
    pub layer_index: usize,
    pub values: Vec<Vec<T>>,
    pub degenerate_pairs: Vec<(usize, usize)>,
    /// Number of expert-pair redundancy computations performed.
    #[serde(skip)]
    pub pair_evaluations: usize,
}

impl<T: Scalar> NmiMatrix<T> {
    /// Build from an explicit square matrix. The diagonal is forced to 1.
    pub fn from_values(layer_index: usize, mut values: Vec<Vec<T>>) -> Result<Self> {
        let e = values.len();
        for (i, row) in values.iter_mut().enumerate() {
            if row.len() != e {
                return Err(Error::InvalidInput("NMI matrix must be square".into()));
            }
            row[i] = T::one();
        }
        if let Some((i, j)) = (0..e)
            .flat_map(|i| (i + 1..e).map(move |j| (i, j)))
            .find(|&(i, j)| values[i][j] != values[j][i])
        {
            return Err(Error::InvalidInput(format!(
                "NMI matrix is not symmetric at ({i}, {j})"
            )));
        }
        Ok(Self {
            layer_index,
            values,
            degenerate_pairs: Vec::new(),
            pair_evaluations: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    /// Strict upper triangle restricted to `active` (ascending indices).
    pub fn off_diagonal(&self, active: &[usize]) -> Vec<T> {
        let mut out = Vec::with_capacity(active.len() * active.len().saturating_sub(1) / 2);
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a + 1..] {
                out.push(self.values[i][j]);
            }
        }
        out
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted<T: Scalar>(mut v: Vec<T>) -> Vec<T> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

/// Summary of a matrix's off-diagonal entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonalStats<T> {
    pub mean: T,
    pub q1: T,
    pub q3: T,
    pub max: T,
}

pub fn off_diagonal_stats<T: Scalar>(values: Vec<T>) -> Option<OffDiagonalStats<T>> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().copied().sum::<T>() / T::of_usize(values.len());
    let s = sorted(values);
    Some(OffDiagonalStats {
        mean,
        q1: quantile_sorted(&s, 0.25),
        q3: quantile_sorted(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// ρ = mean + IQR·τ over the off-diagonal entries of all experts.
pub fn redundancy_limit<T: Scalar>(m: &NmiMatrix<T>, tau: T) -> Result<T> {
    let all: Vec<usize> = (0..m.size()).collect();
    redundancy_limit_over(m, &all, tau)
}

/// ρ restricted to the `active` experts.
pub fn redundancy_limit_over<T: Scalar>(m: &NmiMatrix<T>, active: &[usize], tau: T) -> Result<T> {
    let stats = off_diagonal_stats(m.off_diagonal(active)).ok_or_else(|| {
        Error::InvalidInput("redundancy limit needs at least two active experts".into())
    })?;
    Ok(stats.mean + (stats.q3 - stats.q1) * tau)
}

/// One elimination step: `removed` lost to `partner` at redundancy `nmi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal<T> {
    pub removed: usize,
    pub partner: usize,
    pub nmi: T,
}

/// Selection result for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan<T> {
    pub layer: usize,
    pub num_experts: usize,
    /// `None` only when the layer has a single expert.
    pub rho: Option<T>,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    pub removal_order: Vec<Removal<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn row_mean<T: Scalar>(m: &NmiMatrix<T>, row: usize, active: &[usize]) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for &k in active.iter().filter(|&&k| k != row) {
        sum = sum + m.values[row][k];
        n += 1;
    }
    sum / T::of_usize(n.max(1))
}

/// Iteratively drop the most redundant expert of the most similar pair while
/// that pair's redundancy strictly exceeds ρ. ρ is fixed from the initial
/// matrix. Among equal maxima the lexicographically first pair is taken;
/// among equal row means the larger index is removed.
pub fn prune_block<T: Scalar>(m: &NmiMatrix<T>, tau: T, min_keep: usize) -> Result<LayerPlan<T>> {
    if min_keep == 0 {
        return Err(Error::InvalidInput("min_keep must be at least 1".into()));
    }
    let e = m.size();
    let mut active: Vec<usize> = (0..e).collect();
    let rho = (e >= 2).then(|| redundancy_limit(m, tau)).transpose()?;

    let mut plan = LayerPlan {
        layer: m.layer_index,
        num_experts: e,
        rho,
        kept: Vec::new(),
        removed: Vec::new(),
        removal_order: Vec::new(),
        note: None,
    };
    if e <= min_keep {
        plan.kept = active;
        plan.note = Some(format!(
            "skipped: {e} expert(s), floor of {min_keep} leaves nothing to prune"
        ));
        return Ok(plan);
    }
    let rho = rho.expect("e > min_keep >= 1 implies e >= 2");

    while active.len() > min_keep {
        let mut best: Option<(usize, usize, T)> = None;
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a + 1..] {
                let v = m.values[i][j];
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, v) = best.expect("at least two active experts");
        if v <= rho {
            break;
        }
        let mean_i = row_mean(m, i, &active);
        let mean_j = row_mean(m, j, &active);
        let (removed, partner) = match mean_i.partial_cmp(&mean_j) {
            Some(Ordering::Greater) => (i, j),
            Some(Ordering::Less) => (j, i),
            _ => (j.max(i), j.min(i)),
        };
        plan.removal_order.push(Removal {
            removed,
            partner,
            nmi: v,
        });
        active.retain(|&k| k != removed);
    }

    plan.removed = plan.removal_order.iter().map(|r| r.removed).collect();
    plan.removed.sort_unstable();
    plan.kept = active;
    Ok(plan)
}

/// Discretize every sublayer of every expert of a block.
pub fn discretize_block<T: Scalar>(
    block: &ExpertBlock,
    manifest: &ModelManifest,
    bins: usize,
) -> Result<Vec<Vec<DiscretizedTensor<T>>>> {
    block
        .expert_tensor_names
        .par_iter()
        .map(|row| {
            row.iter()
                .map(|name| {
                    let values = load_tensor_f64(manifest, name)?;
                    DiscretizedTensor::from_f64(&values, bins)
                })
                .collect()
        })
        .collect()
}

/// Pairwise redundancy over discretized experts, computing each unordered
/// pair exactly once.
pub fn nmi_matrix_from_experts<T: Scalar>(
    layer_index: usize,
    experts: &[Vec<DiscretizedTensor<T>>],
    bins: usize,
) -> Result<NmiMatrix<T>> {
    let e = experts.len();
    let pairs: Vec<(usize, usize)> = (0..e)
        .flat_map(|i| (i + 1..e).map(move |j| (i, j)))
        .collect();
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| redundancy_between(&experts[i], &experts[j], bins))
        .collect::<Result<Vec<_>>>()?;

    let mut values = vec![vec![T::zero(); e]; e];
    let mut degenerate_pairs = Vec::new();
    for (i, row) in values.iter_mut().enumerate() {
        row[i] = T::one();
    }
    for (&(i, j), s) in pairs.iter().zip(&scores) {
        values[i][j] = s.mean;
        values[j][i] = s.mean;
        if s.degenerate {
            degenerate_pairs.push((i, j));
        }
    }
    Ok(NmiMatrix {
        layer_index,
        values,
        degenerate_pairs,
        pair_evaluations: pairs.len(),
    })
}

pub fn build_nmi_matrix<T: Scalar>(
    block: &ExpertBlock,
    manifest: &ModelManifest,
    bins: usize,
) -> Result<NmiMatrix<T>> {
    let experts = discretize_block(block, manifest, bins)?;
    nmi_matrix_from_experts(block.layer_index, &experts, bins)
}

/// NMI matrices for every MoE block, in layer order.
pub fn compute_nmi_matrices(
    manifest: &ModelManifest,
    blocks: &[ExpertBlock],
    bins: usize,
) -> Result<Vec<NmiMatrix<f64>>> {
    blocks
        .par_iter()
        .map(|b| build_nmi_matrix(b, manifest, bins))
        .collect()
}

/// Expert selection for a whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub tau: f64,
    pub bins: usize,
    pub min_keep: usize,
    /// SHA-256 of the checkpoint shards the plan was computed from.
    pub source_hash: String,
    pub layers: Vec<LayerPlan<f64>>,
}

impl PruningPlan {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("plan serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_json_bytes())
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerPlan<f64>> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn total_kept(&self) -> usize {
        self.layers.iter().map(|l| l.kept.len()).sum()
    }

    pub fn total_removed(&self) -> usize {
        self.layers.iter().map(|l| l.removed.len()).sum()
    }
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::InvalidInput(format!("tau must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

/// Select experts from precomputed matrices. ρ depends only on τ, so sweeps
/// reuse the same matrices for every τ.
pub fn plan_from_matrices(
    matrices: &[NmiMatrix<f64>],
    tau: f64,
    bins: usize,
    min_keep: usize,
    source_hash: String,
) -> Result<PruningPlan> {
    validate_tau(tau)?;
    let layers = matrices
        .iter()
        .map(|m| prune_block(m, tau, min_keep))
        .collect::<Result<Vec<_>>>()?;
    for l in &layers {
        log::debug!(
            "layer {}: rho {:?}, keeping {} of {} experts",
            l.layer,
            l.rho,
            l.kept.len(),
            l.num_experts
        );
    }
    Ok(PruningPlan {
        tau,
        bins,
        min_keep,
        source_hash,
        layers,
    })
}

/// Default floor: the router must still have K candidates.
pub fn default_min_keep(manifest: &ModelManifest) -> usize {
    manifest.config.num_experts_per_tok
}

pub fn make_plan(
    manifest: &ModelManifest,
    tau: f64,
    bins: usize,
    min_keep: Option<usize>,
) -> Result<PruningPlan> {
    validate_tau(tau)?;
    let blocks = resolve_expert_blocks(manifest)?;
    if blocks.is_empty() {
        return Err(Error::InvalidInput("checkpoint has no MoE blocks".into()));
    }
    let matrices = compute_nmi_matrices(manifest, &blocks, bins)?;
    plan_from_matrices(
        &matrices,
        tau,
        bins,
        min_keep.unwrap_or_else(|| default_min_keep(manifest)),
        manifest.source_hash()?,
    )
}
