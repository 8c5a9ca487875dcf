use std::collections::BTreeMap;
use std::time::Instant;

use moeits_core::pruner::{off_diagonal_stats, NmiMatrix, OffDiagonalStats};
use moeits_core::{ExpertBlock, ParamCounts, PruningPlan};
use serde::{Deserialize, Serialize};

/// Parameter counts implied by applying `plan` to a checkpoint with `source`
/// counts and `blocks`: removed experts and their router rows disappear.
pub fn predicted_counts(source: &ParamCounts, blocks: &[ExpertBlock], plan: &PruningPlan) -> ParamCounts {
    let mut out = *source;
    for b in blocks {
        if let Some(l) = plan.layer(b.layer_index) {
            let n = l.removed.len() as u64;
            out.expert_params -= n * b.params_per_expert();
            out.router_params -= n * b.router_shape[1] as u64;
        }
    }
    out
}

/// FLOPs per token implied by the plan, with top-k clamped to each layer's survivors.
pub fn predicted_flops(blocks: &[ExpertBlock], plan: &PruningPlan, k: usize) -> u64 {
    blocks
        .iter()
        .map(|b| {
            let e = plan.layer(b.layer_index).map_or(b.num_experts(), |l| l.kept.len());
            2 * (e as u64 * b.router_shape[1] as u64 + k.min(e) as u64 * b.params_per_expert())
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub num_experts: usize,
    pub kept: usize,
    pub rho: Option<f64>,
    pub nmi_stats: Option<OffDiagonalStats<f64>>,
}

pub fn layer_summaries(matrices: &[NmiMatrix<f64>], plan: &PruningPlan) -> Vec<LayerSummary> {
    matrices
        .iter()
        .zip(&plan.layers)
        .map(|(m, l)| {
            let all: Vec<usize> = (0..m.size()).collect();
            LayerSummary {
                layer: l.layer,
                num_experts: l.num_experts,
                kept: l.kept.len(),
                rho: l.rho,
                nmi_stats: off_diagonal_stats(m.off_diagonal(&all)),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flops {
    /// `2 · Σ_layers (router MACs + min(K, e) · MACs per expert)`.
    pub formula: String,
    pub top_k: usize,
    pub source: u64,
    pub simplified: u64,
}

impl Flops {
    pub fn new(top_k: usize, source: u64, simplified: u64) -> Self {
        Flops {
            formula: "2 * sum over layers of (router MACs + min(K, experts) * MACs per expert)".into(),
            top_k,
            source,
            simplified,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub architecture: String,
    pub source: ParamCounts,
    pub simplified: ParamCounts,
    pub plan: PruningPlan,
    pub plan_hash: String,
    pub reduction_pct: f64,
    pub flops_per_token: Flops,
    pub per_layer: Vec<LayerSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<Timing>,
}

impl Report {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        pretty(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub per_stage_ms: BTreeMap<String, f64>,
}

/// Stage stopwatch; only materialized into the report when requested.
pub struct Stopwatch {
    enabled: bool,
    last: Instant,
    stages: Vec<(String, f64)>,
}

impl Stopwatch {
    pub fn new(enabled: bool) -> Self {
        Stopwatch {
            enabled,
            last: Instant::now(),
            stages: Vec::new(),
        }
    }

    pub fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        let ms = now.duration_since(self.last).as_secs_f64() * 1e3;
        log::debug!("{stage}: {ms:.1} ms");
        self.stages.push((stage.to_owned(), ms));
        self.last = now;
    }

    pub fn finish(self) -> Option<Timing> {
        self.enabled.then(|| Timing {
            per_stage_ms: self.stages.into_iter().collect(),
        })
    }
}

pub fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

/// One matrix as CSV with an index column and a header of expert indices.
pub fn matrix_csv(m: &NmiMatrix<f64>) -> String {
    let mut s = String::from("expert");
    for j in 0..m.size() {
        s.push_str(&format!(",{j}"));
    }
    s.push('\n');
    for (i, row) in m.values.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}
