//! Materializes a pruned checkpoint from a plan: drops removed experts,
//! renumbers survivors densely, slices router rows, rewrites the config and
//! emits the manifest of tensors a downstream trainer should heal.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    resolve_expert_blocks, write_checkpoint_streaming, ConfigDoc, ExpertBlock, ModelManifest, ShardLayout,
    TensorRole, TensorSpec, EXPERTS_PER_LAYER_KEY,
};
use crate::error::{Error, Result};
use crate::pruner::PruningPlan;

pub const PLAN_FILE_NAME: &str = "pruning_plan.json";
pub const HEALING_FILE_NAME: &str = "healing_manifest.json";

/// LoRA settings published for the healing phase.
pub const LORA_RANK: u32 = 64;
pub const LORA_ALPHA: u32 = 16;
pub const LORA_DROPOUT: f64 = 0.1;

/// Auxiliary files copied verbatim when present next to the source weights.
const PASSTHROUGH_FILES: &[&str] = &[
    "tokenizer.json",
    "tokenizer.model",
    "tokenizer_config.json",
    "special_tokens_map.json",
    "generation_config.json",
    "vocab.json",
    "merges.txt",
];

/// Dense, order-preserving old→new expert index map per layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexRemap {
    pub per_layer: BTreeMap<usize, BTreeMap<usize, usize>>,
}

impl IndexRemap {
    pub fn from_plan(plan: &PruningPlan) -> Self {
        let per_layer = plan
            .layers
            .iter()
            .map(|l| {
                let map = l.kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
                (l.layer, map)
            })
            .collect();
        Self { per_layer }
    }

    pub fn new_index(&self, layer: usize, old: usize) -> Option<usize> {
        self.per_layer.get(&layer)?.get(&old).copied()
    }
}

/// Keep the rows of a row-major `[rows, cols]` matrix listed in `kept`.
///
/// Works on any element type; slicing raw bytes with `cols` set to the row
/// width in bytes keeps stored values bit-identical.
pub fn slice_router<T: Copy>(router: &[T], shape: [usize; 2], kept: &[usize]) -> Result<Vec<T>> {
    let [rows, cols] = shape;
    if router.len() != rows * cols {
        return Err(Error::InvalidInput(format!(
            "router holds {} values, shape {shape:?} needs {}",
            router.len(),
            rows * cols
        )));
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput("router slice must keep at least one row".into()));
    }
    let mut out = Vec::with_capacity(kept.len() * cols);
    for &r in kept {
        if r >= rows {
            return Err(Error::IndexOutOfRange { index: r, len: rows });
        }
        out.extend_from_slice(&router[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

/// Rewrite expert counts in the config. Layers keeping different counts are
/// recorded under an extension key; everything else passes through.
pub fn adjust_config(config: &ConfigDoc, plan: &PruningPlan) -> Result<ConfigDoc> {
    let mut out = config.clone();
    let counts: BTreeMap<usize, usize> =
        plan.layers.iter().map(|l| (l.layer, l.kept.len())).collect();
    let (Some(&max), Some(&min)) = (counts.values().max(), counts.values().min()) else {
        return Ok(out);
    };
    let keys = config.architecture.config_keys();

    out.num_routed_experts = max;
    out.set_raw(keys.num_routed_experts, &max)?;
    if min == max {
        out.experts_per_layer = None;
        out.remove_raw(EXPERTS_PER_LAYER_KEY);
    } else {
        let mut ext = serde_json::Map::new();
        for (layer, n) in &counts {
            ext.insert(layer.to_string(), (*n).into());
        }
        out.set_raw(EXPERTS_PER_LAYER_KEY, &ext)?;
        out.experts_per_layer = Some(counts);
    }
    let k = config.num_experts_per_tok.min(min);
    if k != config.num_experts_per_tok {
        out.num_experts_per_tok = k;
        out.set_raw(keys.num_experts_per_tok, &k)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tau: f64,
    pub plan_hash: String,
    pub source_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdvisory {
    pub lora_r: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
}

impl Default for LoraAdvisory {
    fn default() -> Self {
        Self {
            lora_r: LORA_RANK,
            lora_alpha: LORA_ALPHA,
            lora_dropout: LORA_DROPOUT,
        }
    }
}

/// Hand-off document for the healing fine-tune.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealingManifest {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub provenance: Provenance,
    pub advisory: LoraAdvisory,
}

impl HealingManifest {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

/// Trainable = every routed-expert tensor and every router of the output
/// model, whether or not its layer changed; everything else is frozen.
pub fn emit_healing_manifest(out: &ModelManifest, plan: &PruningPlan) -> Result<HealingManifest> {
    let blocks = resolve_expert_blocks(out)?;
    let trainable: BTreeSet<String> = blocks
        .iter()
        .flat_map(|b| {
            b.expert_tensor_names
                .iter()
                .flatten()
                .chain(std::iter::once(&b.router_tensor_name))
                .cloned()
        })
        .collect();
    let frozen: Vec<String> = out
        .tensor_names()
        .filter(|n| !trainable.contains(*n))
        .map(str::to_owned)
        .collect();
    Ok(HealingManifest {
        trainable: trainable.into_iter().collect(),
        frozen,
        provenance: Provenance {
            tau: plan.tau,
            plan_hash: plan.hash(),
            source_hash: plan.source_hash.clone(),
        },
        advisory: LoraAdvisory::default(),
    })
}

/// Expert parameters the plan removes, from block shapes.
pub fn planned_expert_params_removed(blocks: &[ExpertBlock], plan: &PruningPlan) -> u64 {
    blocks
        .iter()
        .filter_map(|b| {
            plan.layer(b.layer_index)
                .map(|l| l.removed.len() as u64 * b.params_per_expert())
        })
        .sum()
}

/// Fail unless `dir` is absent or an empty directory.
pub fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    if entries.next().is_some() {
        return Err(Error::OutputNotEmpty(dir.to_owned()));
    }
    Ok(())
}

enum Action {
    Copy,
    Rename(String),
    SliceRouter { kept: Vec<usize>, cols: usize },
    Drop,
}

fn check_plan(blocks: &[ExpertBlock], plan: &PruningPlan) -> Result<()> {
    if blocks.len() != plan.layers.len() {
        return Err(Error::InvalidInput(format!(
            "plan covers {} layers, checkpoint has {} MoE blocks",
            plan.layers.len(),
            blocks.len()
        )));
    }
    for b in blocks {
        let l = plan.layer(b.layer_index).ok_or_else(|| {
            Error::InvalidInput(format!("plan has no entry for layer {}", b.layer_index))
        })?;
        let e = b.num_experts();
        if l.num_experts != e || b.router_shape[0] != e {
            return Err(Error::InconsistentBlock {
                layer: b.layer_index,
                reason: format!(
                    "plan expects {} experts, block has {e} and router has {} rows",
                    l.num_experts, b.router_shape[0]
                ),
            });
        }
        if l.kept.is_empty() || l.kept.iter().chain(&l.removed).any(|&i| i >= e) {
            return Err(Error::InvalidInput(format!(
                "plan for layer {} references experts outside 0..{e}",
                b.layer_index
            )));
        }
    }
    Ok(())
}

/// Write the simplified checkpoint, its config, the plan and the healing
/// manifest into the fresh directory `out_dir`.
pub fn build_simplified(
    manifest: &ModelManifest,
    plan: &PruningPlan,
    out_dir: &Path,
) -> Result<(ModelManifest, HealingManifest)> {
    let actual = manifest.source_hash()?;
    if actual != plan.source_hash {
        return Err(Error::PlanMismatch {
            plan: plan.source_hash.clone(),
            actual,
        });
    }
    ensure_fresh_dir(out_dir)?;
    let blocks = resolve_expert_blocks(manifest)?;
    check_plan(&blocks, plan)?;
    let remap = IndexRemap::from_plan(plan);
    let naming = manifest.naming();

    let mut actions: BTreeMap<&str, Action> = BTreeMap::new();
    for name in manifest.tensor_names() {
        let action = match naming.classify(name) {
            TensorRole::Expert { layer, expert, .. } => match remap.new_index(layer, expert) {
                Some(new) => naming
                    .rename_expert(name, new)
                    .map(Action::Rename)
                    .ok_or_else(|| Error::PatternMismatch(name.to_owned()))?,
                None => Action::Drop,
            },
            TensorRole::Router { layer } if remap.per_layer.contains_key(&layer) => {
                let record = manifest.record(name).expect("listed name has a record");
                let row_bytes = record.shape[1] * record.dtype.size();
                Action::SliceRouter {
                    kept: plan.layer(layer).expect("checked").kept.clone(),
                    cols: row_bytes,
                }
            }
            _ => Action::Copy,
        };
        actions.insert(name, action);
    }

    let mut layout: Vec<ShardLayout> = Vec::new();
    for shard in &manifest.shards {
        let mut tensors = Vec::new();
        for r in &shard.records {
            let spec = match &actions[r.name.as_str()] {
                Action::Drop => continue,
                Action::Copy => TensorSpec {
                    name: r.name.clone(),
                    dtype: r.dtype,
                    shape: r.shape.clone(),
                },
                Action::Rename(new) => TensorSpec {
                    name: new.clone(),
                    dtype: r.dtype,
                    shape: r.shape.clone(),
                },
                Action::SliceRouter { kept, .. } => TensorSpec {
                    name: r.name.clone(),
                    dtype: r.dtype,
                    shape: vec![kept.len(), r.shape[1]],
                },
            };
            tensors.push(spec);
        }
        if !tensors.is_empty() {
            layout.push(ShardLayout {
                file_name: shard.file_name.clone(),
                tensors,
                metadata: shard.metadata.clone(),
            });
        }
    }

    // output name -> (source name, action)
    let sources: BTreeMap<String, (&str, &Action)> = actions
        .iter()
        .filter_map(|(&name, action)| match action {
            Action::Drop => None,
            Action::Rename(new) => Some((new.clone(), (name, action))),
            _ => Some((name.to_owned(), (name, action))),
        })
        .collect();
    let fetch = |t: &TensorSpec| -> Result<Cow<'static, [u8]>> {
        let (src, action) = sources[&t.name];
        let bytes = manifest.load_bytes(src)?;
        Ok(Cow::Owned(match action {
            Action::SliceRouter { kept, cols } => {
                let rows = bytes.len() / cols;
                slice_router(&bytes, [rows, *cols], kept)?
            }
            _ => bytes,
        }))
    };

    let config = adjust_config(&manifest.config, plan)?;
    log::info!("writing {} tensors to {}", sources.len(), out_dir.display());
    let out_manifest = write_checkpoint_streaming(&layout, &config, out_dir, fetch)?;

    let plan_path = out_dir.join(PLAN_FILE_NAME);
    std::fs::write(&plan_path, plan.to_json_bytes()).map_err(|e| Error::io(&plan_path, e))?;
    let healing = emit_healing_manifest(&out_manifest, plan)?;
    let healing_path = out_dir.join(HEALING_FILE_NAME);
    std::fs::write(&healing_path, healing.to_json_bytes())
        .map_err(|e| Error::io(&healing_path, e))?;

    for f in PASSTHROUGH_FILES {
        let src = manifest.root.join(f);
        if src.is_file() {
            std::fs::copy(&src, out_dir.join(f)).map_err(|e| Error::io(&src, e))?;
        }
    }

    Ok((out_manifest, healing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::LayerPlan;

    #[test]
    fn slice_router_examples() {
        let r = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(slice_router(&r, [3, 2], &[0, 2]).unwrap(), vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(slice_router(&r, [3, 2], &[0, 1, 2]).unwrap(), r.to_vec());
        assert!(matches!(
            slice_router(&r, [3, 2], &[5]),
            Err(Error::IndexOutOfRange { index: 5, len: 3 })
        ));
    }

    fn plan_with(kept: &[&[usize]], e: usize) -> PruningPlan {
        PruningPlan {
            tau: 1.0,
            bins: 64,
            min_keep: 1,
            source_hash: String::new(),
            layers: kept
                .iter()
                .enumerate()
                .map(|(l, k)| LayerPlan {
                    layer: l,
                    num_experts: e,
                    rho: Some(0.5),
                    kept: k.to_vec(),
                    removed: (0..e).filter(|i| !k.contains(i)).collect(),
                    removal_order: vec![],
                    note: None,
                })
                .collect(),
        }
    }

    fn toy_config(e: usize, k: usize) -> ConfigDoc {
        let doc = format!(
            r#"{{"model_type":"moeits-toy","num_hidden_layers":2,"num_local_experts":{e},
            "num_experts_per_tok":{k},"hidden_size":8,"intermediate_size":16,"note":"keep me"}}"#
        );
        ConfigDoc::parse(doc.as_bytes(), None).unwrap()
    }

    #[test]
    fn uniform_plan_rewrites_expert_count() {
        let c = adjust_config(&toy_config(8, 2), &plan_with(&[&[0, 1, 2, 3], &[4, 5, 6, 7]], 8))
            .unwrap();
        assert_eq!(c.num_routed_experts, 4);
        assert!(c.experts_per_layer.is_none());
        let text = String::from_utf8(c.to_json_bytes()).unwrap();
        assert!(!text.contains(EXPERTS_PER_LAYER_KEY));
        assert!(text.contains("\"note\": \"keep me\""));
    }

    #[test]
    fn uneven_plan_records_per_layer_counts() {
        let c = adjust_config(&toy_config(4, 2), &plan_with(&[&[0, 1, 2, 3], &[0, 1, 3]], 4))
            .unwrap();
        assert_eq!(c.num_routed_experts, 4);
        assert_eq!(
            c.experts_per_layer,
            Some(BTreeMap::from([(0, 4), (1, 3)]))
        );
        let re = ConfigDoc::parse(&c.to_json_bytes(), None).unwrap();
        assert_eq!(re.experts_per_layer, c.experts_per_layer);
    }

    #[test]
    fn top_k_lowered_to_smallest_layer() {
        let c = adjust_config(&toy_config(4, 2), &plan_with(&[&[0, 1, 2], &[3]], 4)).unwrap();
        assert_eq!(c.num_experts_per_tok, 1);
    }

    #[test]
    fn remap_is_dense_and_ordered() {
        let r = IndexRemap::from_plan(&plan_with(&[&[0, 1, 3]], 4));
        assert_eq!(r.new_index(0, 3), Some(2));
        assert_eq!(r.new_index(0, 2), None);
        assert_eq!(r.new_index(0, 0), Some(0));
    }
}
