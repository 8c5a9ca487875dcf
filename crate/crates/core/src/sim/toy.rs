use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    write_checkpoint, Architecture, ConfigDoc, Dtype, ModelManifest, ShardLayout, TensorSpec,
    SINGLE_FILE_NAME,
};
use crate::error::{Error, Result};

/// Per-layer redundancy directive, applied after random initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Independent,
    /// Expert `to` (weights and router row) becomes an exact copy of `from`.
    Duplicate { from: usize, to: usize },
    /// Expert `target` becomes `lambda·W_source + (1−lambda)·W_target`.
    Interpolate {
        source: usize,
        target: usize,
        lambda: f64,
    },
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

fn default_shards() -> usize {
    1
}

/// Shape and redundancy script of a synthetic gated-FFN MoE model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub intermediate: usize,
    /// Either empty or one directive list per layer.
    #[serde(default)]
    pub redundancy: Vec<Vec<Directive>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    #[serde(default = "default_shards")]
    pub shards: usize,
}

const VOCAB: usize = 32;
const SUBLAYERS: [&str; 3] = ["gate_proj", "up_proj", "down_proj"];

impl ToySpec {
    pub fn new(layers: usize, experts: usize, top_k: usize, hidden: usize, intermediate: usize) -> Self {
        Self {
            layers,
            experts,
            top_k,
            hidden,
            intermediate,
            redundancy: Vec::new(),
            seed: 0,
            dtype: Dtype::F32,
            shards: 1,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Apply the same directives to every layer.
    pub fn with_every_layer(mut self, directives: Vec<Directive>) -> Self {
        self.redundancy = vec![directives; self.layers];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if [self.layers, self.experts, self.top_k, self.hidden, self.intermediate].contains(&0) {
            return bad("toy dimensions must all be at least 1".into());
        }
        if self.top_k > self.experts {
            return bad(format!("top_k {} exceeds experts {}", self.top_k, self.experts));
        }
        if !self.redundancy.is_empty() && self.redundancy.len() != self.layers {
            return bad(format!(
                "redundancy script has {} entries for {} layers",
                self.redundancy.len(),
                self.layers
            ));
        }
        if self.shards == 0 || self.shards > self.layers {
            return bad(format!("shards must be in 1..={}", self.layers));
        }
        if !matches!(self.dtype, Dtype::F32 | Dtype::F16 | Dtype::BF16 | Dtype::F64) {
            return bad(format!("toy dtype {} is not a float type", self.dtype));
        }
        for d in self.redundancy.iter().flatten() {
            match *d {
                Directive::Independent => {}
                Directive::Duplicate { from, to } => {
                    if from >= self.experts || to >= self.experts || from == to {
                        return bad(format!("invalid duplicate({from} -> {to})"));
                    }
                }
                Directive::Interpolate {
                    source,
                    target,
                    lambda,
                } => {
                    if source >= self.experts
                        || target >= self.experts
                        || source == target
                        || !(0.0..=1.0).contains(&lambda)
                    {
                        return bad(format!("invalid interpolate({source}, {target}, {lambda})"));
                    }
                }
            }
        }
        Ok(())
    }

    fn config_json(&self) -> String {
        let torch_dtype = match self.dtype {
            Dtype::F16 => "float16",
            Dtype::BF16 => "bfloat16",
            Dtype::F64 => "float64",
            _ => "float32",
        };
        format!(
            "{{\"model_type\": \"{}\", \"architectures\": [\"MoeitsToyForCausalLM\"], \
             \"num_hidden_layers\": {}, \"num_local_experts\": {}, \"num_experts_per_tok\": {}, \
             \"hidden_size\": {}, \"intermediate_size\": {}, \"vocab_size\": {VOCAB}, \
             \"torch_dtype\": \"{torch_dtype}\", \"moeits_toy_seed\": {}}}",
            Architecture::Toy.model_type(),
            self.layers,
            self.experts,
            self.top_k,
            self.hidden,
            self.intermediate,
            self.seed,
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Generate a toy checkpoint in `out_dir`. Identical specs produce
/// byte-identical files.
pub fn gen_toy(spec: &ToySpec, out_dir: &Path) -> Result<ModelManifest> {
    spec.validate()?;
    let (h, f, e) = (spec.hidden, spec.intermediate, spec.experts);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let naming = Architecture::Toy.naming();

    let mut values: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    values.insert(
        "model.embed_tokens.weight".into(),
        (vec![VOCAB, h], gaussian(&mut rng, VOCAB * h, 1.0)),
    );

    for layer in 0..spec.layers {
        let mut router = gaussian(&mut rng, e * h, 1.0 / (h as f64).sqrt());
        let mut experts: Vec<[Vec<f64>; 3]> = (0..e)
            .map(|_| {
                [
                    gaussian(&mut rng, f * h, 1.0 / (h as f64).sqrt()),
                    gaussian(&mut rng, f * h, 1.0 / (h as f64).sqrt()),
                    gaussian(&mut rng, h * f, 1.0 / (f as f64).sqrt()),
                ]
            })
            .collect();

        for d in spec.redundancy.get(layer).into_iter().flatten() {
            match *d {
                Directive::Independent => {}
                Directive::Duplicate { from, to } => {
                    experts[to] = experts[from].clone();
                    let row = router[from * h..(from + 1) * h].to_vec();
                    router[to * h..(to + 1) * h].copy_from_slice(&row);
                }
                Directive::Interpolate {
                    source,
                    target,
                    lambda,
                } => {
                    let src = experts[source].clone();
                    for (dst, s) in experts[target].iter_mut().zip(&src) {
                        for (d, &s) in dst.iter_mut().zip(s) {
                            *d = lambda * s + (1.0 - lambda) * *d;
                        }
                    }
                }
            }
        }

        values.insert(naming.router_name(layer), (vec![e, h], router));
        for (i, subs) in experts.into_iter().enumerate() {
            for (sub, w) in SUBLAYERS.iter().zip(subs) {
                let shape = if *sub == "down_proj" { vec![h, f] } else { vec![f, h] };
                values.insert(naming.expert_name(layer, i, sub), (shape, w));
            }
        }
        values.insert(
            format!("model.layers.{layer}.post_moe_norm.weight"),
            (vec![h], vec![1.0; h]),
        );
    }
    values.insert("model.norm.weight".into(), (vec![h], vec![1.0; h]));

    let shard_of = |name: &str| -> usize {
        let layer = name
            .strip_prefix("model.layers.")
            .and_then(|r| r.split('.').next())
            .and_then(|l| l.parse::<usize>().ok());
        match layer {
            Some(l) => l * spec.shards / spec.layers,
            None if name.starts_with("model.embed") => 0,
            None => spec.shards - 1,
        }
    };
    let file_name = |s: usize| {
        if spec.shards == 1 {
            SINGLE_FILE_NAME.to_owned()
        } else {
            format!("model-{:05}-of-{:05}.safetensors", s + 1, spec.shards)
        }
    };

    let mut layout: Vec<ShardLayout> = (0..spec.shards)
        .map(|s| ShardLayout {
            file_name: file_name(s),
            tensors: Vec::new(),
            metadata: Some(BTreeMap::from([("format".to_owned(), "pt".to_owned())])),
        })
        .collect();
    let mut payloads = BTreeMap::new();
    for (name, (shape, data)) in values {
        layout[shard_of(&name)].tensors.push(TensorSpec {
            name: name.clone(),
            dtype: spec.dtype,
            shape,
        });
        payloads.insert(name, spec.dtype.encode(&data));
    }

    let config = ConfigDoc::parse(spec.config_json().as_bytes(), None)?;
    write_checkpoint(&layout, &config, &payloads, out_dir)
}
