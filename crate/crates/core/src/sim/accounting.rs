use serde::{Deserialize, Serialize};

use crate::checkpoint::{resolve_expert_blocks, ModelManifest};
use crate::error::Result;

/// Parameter counts by class. Shared experts count as `other`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub expert_params: u64,
    pub router_params: u64,
    pub other_params: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.expert_params + self.router_params + self.other_params
    }
}

pub fn count_params(manifest: &ModelManifest) -> Result<ParamCounts> {
    let blocks = resolve_expert_blocks(manifest)?;
    let expert_params = blocks
        .iter()
        .map(|b| b.num_experts() as u64 * b.params_per_expert())
        .sum();
    let router_params = blocks.iter().map(|b| b.router_params()).sum();
    let total: u64 = manifest.records().map(|r| r.num_elements()).sum();
    Ok(ParamCounts {
        expert_params,
        router_params,
        other_params: total - expert_params - router_params,
    })
}

/// Percentage of expert parameters removed going from `before` to `after`.
pub fn expert_reduction_pct(before: &ParamCounts, after: &ParamCounts) -> f64 {
    if before.expert_params == 0 {
        return 0.0;
    }
    (before.expert_params as f64 - after.expert_params as f64) / before.expert_params as f64 * 100.0
}

/// FLOPs per token for the routed part of the model: two per multiply-add
/// over each router plus the `min(k, e)` active experts of every layer.
pub fn flops_per_token(manifest: &ModelManifest, k: usize) -> Result<u64> {
    let blocks = resolve_expert_blocks(manifest)?;
    let macs: u64 = blocks
        .iter()
        .map(|b| b.router_params() + k.min(b.num_experts()) as u64 * b.params_per_expert())
        .sum();
    Ok(2 * macs)
}
