//! Checkpoint access: safetensors containers (single file or sharded with an
//! index), the config document, and resolution of expert/router tensors via
//! per-architecture naming adapters.

mod adapter;
mod config;
mod dtype;
pub mod safetensors;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adapter::{Architecture, ConfigKeys, NamingAdapter, SharedExperts, TensorRole};
pub use config::{ConfigDoc, EXPERTS_PER_LAYER_KEY};
pub use dtype::Dtype;
pub use safetensors::Shard;

use crate::error::{Error, Result};

pub const SINGLE_FILE_NAME: &str = "model.safetensors";
pub const INDEX_FILE_NAME: &str = "model.safetensors.index.json";
pub const CONFIG_FILE_NAME: &str = "config.json";

/// A named tensor and its byte extent inside one shard's data region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorRecord {
    pub fn num_elements(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Fully resolved checkpoint. Only headers are held in memory.
#[derive(Clone, Debug)]
pub struct ModelManifest {
    pub root: PathBuf,
    pub shards: Vec<Shard>,
    pub config: ConfigDoc,
    pub architecture: Architecture,
    /// Whether the checkpoint was opened through an index document.
    pub indexed: bool,
    lookup: BTreeMap<String, (usize, usize)>,
}

#[derive(Deserialize)]
struct IndexDoc {
    weight_map: BTreeMap<String, String>,
}

pub fn open_checkpoint(root: &Path) -> Result<ModelManifest> {
    open_checkpoint_as(root, None)
}

/// Open a checkpoint directory (or a `.safetensors` / index file inside
/// one), optionally forcing the naming adapter.
pub fn open_checkpoint_as(root: &Path, arch_override: Option<Architecture>) -> Result<ModelManifest> {
    let (dir, entry) = if root.is_dir() {
        (root.to_owned(), None)
    } else if root.is_file() {
        let dir = root.parent().map(Path::to_owned).unwrap_or_default();
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        (dir, Some(name))
    } else {
        return Err(Error::NoCheckpoint(root.to_owned()));
    };

    let config = ConfigDoc::from_path(&dir.join(CONFIG_FILE_NAME), arch_override)?;

    let index_name = match &entry {
        Some(n) if n.ends_with(".index.json") => Some(n.clone()),
        Some(_) => None,
        None => dir
            .join(INDEX_FILE_NAME)
            .is_file()
            .then(|| INDEX_FILE_NAME.to_owned()),
    };

    let (shards, indexed) = if let Some(index_name) = index_name {
        (read_indexed(&dir, &index_name)?, true)
    } else {
        let file_name = match entry {
            Some(n) => n,
            None => single_safetensors(&dir)?,
        };
        let shard = safetensors::read_header(&dir.join(&file_name), &file_name)?;
        (vec![shard], false)
    };

    let mut lookup = BTreeMap::new();
    for (si, shard) in shards.iter().enumerate() {
        for (ri, r) in shard.records.iter().enumerate() {
            if lookup.insert(r.name.clone(), (si, ri)).is_some() {
                return Err(Error::malformed(
                    &shard.path,
                    format!("tensor `{}` appears in more than one shard", r.name),
                ));
            }
        }
    }

    Ok(ModelManifest {
        root: dir,
        shards,
        architecture: config.architecture,
        config,
        indexed,
        lookup,
    })
}

fn single_safetensors(dir: &Path) -> Result<String> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".safetensors") && entry.path().is_file() {
            found.push(name);
        }
    }
    found.sort();
    match found.len() {
        0 => Err(Error::NoCheckpoint(dir.to_owned())),
        1 => Ok(found.remove(0)),
        _ => Err(Error::InvalidInput(format!(
            "{} holds {} .safetensors files but no {INDEX_FILE_NAME}",
            dir.display(),
            found.len()
        ))),
    }
}

fn read_indexed(dir: &Path, index_name: &str) -> Result<Vec<Shard>> {
    let index_path = dir.join(index_name);
    let bytes = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: IndexDoc = serde_json::from_slice(&bytes)
        .map_err(|e| Error::malformed(&index_path, format!("bad index document: {e}")))?;

    let files: BTreeSet<&String> = index.weight_map.values().collect();
    let mut shards = Vec::with_capacity(files.len());
    for file in files {
        let shard = safetensors::read_header(&dir.join(file), file)?;
        for r in &shard.records {
            if index.weight_map.get(&r.name) != Some(file) {
                return Err(Error::malformed(
                    &index_path,
                    format!("tensor `{}` in {file} is not mapped to it by the index", r.name),
                ));
            }
        }
        shards.push(shard);
    }
    let listed: usize = shards.iter().map(|s| s.records.len()).sum();
    if listed != index.weight_map.len() {
        return Err(Error::malformed(
            &index_path,
            "index names tensors that are missing from their shards",
        ));
    }
    Ok(shards)
}

impl ModelManifest {
    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.lookup
            .get(name)
            .map(|&(s, r)| &self.shards[s].records[r])
    }

    pub fn shard_of(&self, name: &str) -> Option<&Shard> {
        self.lookup.get(name).map(|&(s, _)| &self.shards[s])
    }

    /// All records in shard order, then byte order.
    pub fn records(&self) -> impl Iterator<Item = &TensorRecord> {
        self.shards.iter().flat_map(|s| s.records.iter())
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.lookup.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    pub fn naming(&self) -> NamingAdapter {
        self.architecture.naming()
    }

    pub fn load_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let &(s, r) = self
            .lookup
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_owned()))?;
        safetensors::read_payload(&self.shards[s], &self.shards[s].records[r])
    }

    pub fn load_tensor_f64(&self, name: &str) -> Result<Vec<f64>> {
        load_tensor_f64(self, name)
    }

    /// SHA-256 over every shard file in shard order.
    pub fn source_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 20];
        for shard in &self.shards {
            let mut f = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
            loop {
                let n = f.read(&mut buf).map_err(|e| Error::io(&shard.path, e))?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// The shard layout of this manifest, ready to be edited and written.
    pub fn layout(&self) -> Vec<ShardLayout> {
        self.shards
            .iter()
            .map(|s| ShardLayout {
                file_name: s.file_name.clone(),
                metadata: s.metadata.clone(),
                tensors: s
                    .records
                    .iter()
                    .map(|r| TensorSpec {
                        name: r.name.clone(),
                        dtype: r.dtype,
                        shape: r.shape.clone(),
                    })
                    .collect(),
            })
            .collect()
    }
}

/// Row-major values of a tensor widened to f64.
pub fn load_tensor_f64(manifest: &ModelManifest, name: &str) -> Result<Vec<f64>> {
    let record = manifest
        .record(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_owned()))?;
    if !record.dtype.is_decodable() {
        return Err(Error::UnsupportedDtype {
            name: name.to_owned(),
            dtype: record.dtype.to_string(),
        });
    }
    let bytes = manifest.load_bytes(name)?;
    let mut out = Vec::new();
    record.dtype.decode_into(&bytes, &mut out);
    Ok(out)
}

/// One layer's routed experts (an e×k grid of tensor names) plus its router.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertBlock {
    pub layer_index: usize,
    /// `expert_tensor_names[i][j]` is sublayer `j` of expert `i`.
    pub expert_tensor_names: Vec<Vec<String>>,
    pub sublayer_names: Vec<String>,
    pub sublayer_shapes: Vec<Vec<usize>>,
    pub router_tensor_name: String,
    pub router_shape: Vec<usize>,
    pub shared_expert_tensor_names: Vec<String>,
}

impl ExpertBlock {
    pub fn num_experts(&self) -> usize {
        self.expert_tensor_names.len()
    }

    pub fn num_sublayers(&self) -> usize {
        self.sublayer_names.len()
    }

    /// Parameter count of a single expert.
    pub fn params_per_expert(&self) -> u64 {
        self.sublayer_shapes
            .iter()
            .map(|s| s.iter().map(|&d| d as u64).product::<u64>())
            .sum()
    }

    pub fn router_params(&self) -> u64 {
        self.router_shape.iter().map(|&d| d as u64).product()
    }
}

/// Group expert and router tensors into per-layer blocks. Layers without
/// routed experts are omitted; shared experts are listed but never gridded.
pub fn resolve_expert_blocks(manifest: &ModelManifest) -> Result<Vec<ExpertBlock>> {
    let naming = manifest.naming();
    type Grid = BTreeMap<usize, BTreeMap<String, String>>;
    let mut experts: BTreeMap<usize, Grid> = BTreeMap::new();
    let mut routers: BTreeMap<usize, String> = BTreeMap::new();
    let mut shared: BTreeMap<usize, Vec<String>> = BTreeMap::new();

    for name in manifest.tensor_names() {
        match naming.classify(name) {
            TensorRole::Expert {
                layer,
                expert,
                sublayer,
            } => {
                experts
                    .entry(layer)
                    .or_default()
                    .entry(expert)
                    .or_default()
                    .insert(sublayer, name.to_owned());
            }
            TensorRole::Router { layer } => {
                routers.insert(layer, name.to_owned());
            }
            TensorRole::Shared { layer } => shared.entry(layer).or_default().push(name.to_owned()),
            TensorRole::Malformed => {
                return Err(Error::PatternMismatch(format!(
                    "`{name}` sits under an experts path but does not match the {} pattern",
                    manifest.architecture
                )))
            }
            TensorRole::Other => {}
        }
    }

    let sublayers = manifest.architecture.sublayers();
    let mut blocks = Vec::with_capacity(experts.len());
    for (layer, grid) in experts {
        let inconsistent = |reason: String| Error::InconsistentBlock { layer, reason };
        let e = grid.len();
        if grid.keys().copied().ne(0..e) {
            return Err(inconsistent(format!(
                "expert indices {:?} are not contiguous from 0",
                grid.keys().collect::<Vec<_>>()
            )));
        }

        let mut names = Vec::with_capacity(e);
        for (expert, subs) in &grid {
            let mut row = Vec::with_capacity(sublayers.len());
            for sub in sublayers {
                let n = subs.get(*sub).ok_or_else(|| {
                    Error::PatternMismatch(format!(
                        "layer {layer} expert {expert} is missing sublayer `{sub}`"
                    ))
                })?;
                row.push(n.clone());
            }
            names.push(row);
        }

        let shape_of = |n: &str| manifest.record(n).map(|r| r.shape.clone()).unwrap_or_default();
        let sublayer_shapes: Vec<Vec<usize>> = names[0].iter().map(|n| shape_of(n)).collect();
        for (i, row) in names.iter().enumerate().skip(1) {
            for (j, n) in row.iter().enumerate() {
                let s = shape_of(n);
                if s != sublayer_shapes[j] {
                    return Err(inconsistent(format!(
                        "expert {i} sublayer `{}` has shape {s:?}, expert 0 has {:?}",
                        sublayers[j], sublayer_shapes[j]
                    )));
                }
            }
        }

        let router = routers.remove(&layer).ok_or_else(|| {
            Error::PatternMismatch(format!("layer {layer} has experts but no router tensor"))
        })?;
        let router_shape = shape_of(&router);
        if router_shape.len() != 2 || router_shape[0] != e {
            return Err(inconsistent(format!(
                "router shape {router_shape:?} does not have {e} rows"
            )));
        }

        blocks.push(ExpertBlock {
            layer_index: layer,
            expert_tensor_names: names,
            sublayer_names: sublayers.iter().map(|s| s.to_string()).collect(),
            sublayer_shapes,
            router_tensor_name: router,
            router_shape,
            shared_expert_tensor_names: shared.remove(&layer).unwrap_or_default(),
        });
    }
    Ok(blocks)
}

/// Tensor entry of a layout to be written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn byte_length(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product::<u64>() * self.dtype.size() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardLayout {
    pub file_name: String,
    pub tensors: Vec<TensorSpec>,
    pub metadata: Option<BTreeMap<String, String>>,
}

fn check_unique(layout: &[ShardLayout]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in layout.iter().flat_map(|s| &s.tensors) {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::InvalidInput(format!(
                "tensor `{}` listed in more than one shard",
                t.name
            )));
        }
    }
    Ok(())
}

fn check_length(t: &TensorSpec, payload: &[u8]) -> Result<()> {
    if payload.len() as u64 != t.byte_length() {
        return Err(Error::LengthMismatch {
            name: t.name.clone(),
            expected: t.byte_length(),
            actual: payload.len() as u64,
        });
    }
    Ok(())
}

/// Write shards, the index (when there is more than one shard) and the
/// config into `out_dir`, then reopen the result.
///
/// Every payload length is checked before any file is created.
pub fn write_checkpoint(
    layout: &[ShardLayout],
    config: &ConfigDoc,
    payloads: &BTreeMap<String, Vec<u8>>,
    out_dir: &Path,
) -> Result<ModelManifest> {
    check_unique(layout)?;
    for t in layout.iter().flat_map(|s| &s.tensors) {
        let payload = payloads
            .get(&t.name)
            .ok_or_else(|| Error::UnknownTensor(t.name.clone()))?;
        check_length(t, payload)?;
    }
    write_checkpoint_streaming(layout, config, out_dir, |t| {
        Ok(Cow::Borrowed(payloads[&t.name].as_slice()))
    })
}

/// Like [`write_checkpoint`], but payloads are fetched one shard at a time
/// (in parallel within the shard), so at most one shard is held in memory.
/// A length error aborts before that shard's file is created.
pub fn write_checkpoint_streaming<'a, F>(
    layout: &[ShardLayout],
    config: &ConfigDoc,
    out_dir: &Path,
    fetch: F,
) -> Result<ModelManifest>
where
    F: Fn(&TensorSpec) -> Result<Cow<'a, [u8]>> + Sync,
{
    check_unique(layout)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut weight_map = BTreeMap::new();
    let mut total_size = 0u64;
    for shard in layout {
        let payloads: Vec<Cow<'a, [u8]>> = shard
            .tensors
            .par_iter()
            .map(|t| {
                let p = fetch(t)?;
                check_length(t, &p)?;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        let entries: Vec<(&str, Dtype, &[usize], &[u8])> = shard
            .tensors
            .iter()
            .zip(&payloads)
            .map(|(t, p)| (t.name.as_str(), t.dtype, t.shape.as_slice(), p.as_ref()))
            .collect();
        total_size +=
            safetensors::write_file(&out_dir.join(&shard.file_name), &entries, shard.metadata.as_ref())?;
        for t in &shard.tensors {
            weight_map.insert(t.name.clone(), shard.file_name.clone());
        }
    }

    if layout.len() > 1 {
        let index = serde_json::json!({
            "metadata": { "total_size": total_size },
            "weight_map": weight_map,
        });
        let path = out_dir.join(INDEX_FILE_NAME);
        let mut text = serde_json::to_string_pretty(&index)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    let cfg_path = out_dir.join(CONFIG_FILE_NAME);
    std::fs::write(&cfg_path, config.to_json_bytes()).map_err(|e| Error::io(&cfg_path, e))?;

    let entry = if layout.len() == 1 {
        out_dir.join(&layout[0].file_name)
    } else {
        out_dir.to_owned()
    };
    open_checkpoint_as(&entry, Some(config.architecture))
}
