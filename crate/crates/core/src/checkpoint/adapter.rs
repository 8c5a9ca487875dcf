//! Table-driven tensor naming conventions per MoE architecture family.

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Supported checkpoint families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MixtralLike,
    QwenMoeLike,
    DeepseekMoeLike,
    Toy,
}

/// How the number of shared experts is read from a config.
#[derive(Clone, Copy, Debug)]
pub enum SharedExperts {
    None,
    /// Present (count 1) when this intermediate size key is positive.
    FlagBySize(&'static str),
    Count(&'static str),
}

/// Config keys each family uses for the fields the pruner needs.
#[derive(Clone, Copy, Debug)]
pub struct ConfigKeys {
    pub num_layers: &'static str,
    pub num_routed_experts: &'static str,
    pub num_experts_per_tok: &'static str,
    pub hidden_size: &'static str,
    /// First key present wins.
    pub intermediate_size: &'static [&'static str],
    pub shared: SharedExperts,
}

#[derive(Clone, Copy, Debug)]
struct Table {
    model_types: &'static [&'static str],
    /// Path segment holding the MoE block under `layers.{i}`.
    moe_path: &'static str,
    sublayers: &'static [&'static str],
    router: &'static str,
    shared_paths: &'static [&'static str],
    keys: ConfigKeys,
}

const GATED: &[&str] = &["gate_proj", "up_proj", "down_proj"];

const MIXTRAL: Table = Table {
    model_types: &["mixtral"],
    moe_path: "block_sparse_moe",
    sublayers: &["w1", "w2", "w3"],
    router: "gate.weight",
    shared_paths: &[],
    keys: ConfigKeys {
        num_layers: "num_hidden_layers",
        num_routed_experts: "num_local_experts",
        num_experts_per_tok: "num_experts_per_tok",
        hidden_size: "hidden_size",
        intermediate_size: &["intermediate_size"],
        shared: SharedExperts::None,
    },
};

const QWEN: Table = Table {
    model_types: &["qwen2_moe", "qwen_moe", "qwen3_moe"],
    moe_path: "mlp",
    sublayers: GATED,
    router: "gate.weight",
    shared_paths: &["shared_expert", "shared_expert_gate"],
    keys: ConfigKeys {
        num_layers: "num_hidden_layers",
        num_routed_experts: "num_experts",
        num_experts_per_tok: "num_experts_per_tok",
        hidden_size: "hidden_size",
        intermediate_size: &["moe_intermediate_size", "intermediate_size"],
        shared: SharedExperts::FlagBySize("shared_expert_intermediate_size"),
    },
};

const DEEPSEEK: Table = Table {
    model_types: &["deepseek_v2", "deepseek", "deepseek_moe"],
    moe_path: "mlp",
    sublayers: GATED,
    router: "gate.weight",
    shared_paths: &["shared_experts"],
    keys: ConfigKeys {
        num_layers: "num_hidden_layers",
        num_routed_experts: "n_routed_experts",
        num_experts_per_tok: "num_experts_per_tok",
        hidden_size: "hidden_size",
        intermediate_size: &["moe_intermediate_size", "intermediate_size"],
        shared: SharedExperts::Count("n_shared_experts"),
    },
};

const TOY: Table = Table {
    model_types: &["moeits-toy"],
    moe_path: "moe",
    sublayers: GATED,
    router: "router.weight",
    shared_paths: &[],
    keys: ConfigKeys {
        num_layers: "num_hidden_layers",
        num_routed_experts: "num_local_experts",
        num_experts_per_tok: "num_experts_per_tok",
        hidden_size: "hidden_size",
        intermediate_size: &["intermediate_size"],
        shared: SharedExperts::None,
    },
};

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::MixtralLike,
        Architecture::QwenMoeLike,
        Architecture::DeepseekMoeLike,
        Architecture::Toy,
    ];

    fn table(self) -> &'static Table {
        match self {
            Architecture::MixtralLike => &MIXTRAL,
            Architecture::QwenMoeLike => &QWEN,
            Architecture::DeepseekMoeLike => &DEEPSEEK,
            Architecture::Toy => &TOY,
        }
    }

    /// Look up the family from a config `model_type` value.
    pub fn from_model_type(model_type: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.table().model_types.contains(&model_type))
    }

    /// The canonical `model_type` written by this crate.
    pub fn model_type(self) -> &'static str {
        self.table().model_types[0]
    }

    pub fn config_keys(self) -> &'static ConfigKeys {
        &self.table().keys
    }

    pub fn sublayers(self) -> &'static [&'static str] {
        self.table().sublayers
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::MixtralLike => "mixtral-like",
            Architecture::QwenMoeLike => "qwen-moe-like",
            Architecture::DeepseekMoeLike => "deepseek-moe-like",
            Architecture::Toy => "toy",
        }
    }

    pub fn naming(self) -> NamingAdapter {
        NamingAdapter::new(self)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .or_else(|| Self::from_model_type(s))
            .ok_or_else(|| {
                format!("unknown architecture `{s}` (expected mixtral-like, qwen-moe-like, deepseek-moe-like or toy)")
            })
    }
}

/// A tensor name classified by the adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Expert {
        layer: usize,
        expert: usize,
        sublayer: String,
    },
    Router {
        layer: usize,
    },
    Shared {
        layer: usize,
    },
    /// Name lives under an experts path but does not fit the pattern.
    Malformed,
    Other,
}

/// Compiled name patterns for one architecture.
#[derive(Clone, Debug)]
pub struct NamingAdapter {
    arch: Architecture,
    expert: Regex,
    experts_scope: Regex,
    router: Regex,
    shared: Option<Regex>,
}

impl NamingAdapter {
    fn new(arch: Architecture) -> Self {
        let t = arch.table();
        let moe = regex::escape(t.moe_path);
        let expert = Regex::new(&format!(
            r"^(?:.*\.)?layers\.(?P<layer>\d+)\.{moe}\.experts\.(?P<expert>\d+)\.(?P<sub>[A-Za-z0-9_]+)\.weight$"
        ))
        .unwrap();
        let experts_scope =
            Regex::new(&format!(r"^(?:.*\.)?layers\.\d+\.{moe}\.experts\.")).unwrap();
        let router = Regex::new(&format!(
            r"^(?:.*\.)?layers\.(?P<layer>\d+)\.{moe}\.{}$",
            regex::escape(t.router)
        ))
        .unwrap();
        let shared = (!t.shared_paths.is_empty()).then(|| {
            let alts: Vec<String> = t.shared_paths.iter().map(|p| regex::escape(p)).collect();
            Regex::new(&format!(
                r"^(?:.*\.)?layers\.(?P<layer>\d+)\.{moe}\.(?:{})\.",
                alts.join("|")
            ))
            .unwrap()
        });
        Self {
            arch,
            expert,
            experts_scope,
            router,
            shared,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn classify(&self, name: &str) -> TensorRole {
        if let Some(c) = self.expert.captures(name) {
            let sub = &c["sub"];
            if !self.arch.sublayers().contains(&sub) {
                return TensorRole::Malformed;
            }
            return TensorRole::Expert {
                layer: c["layer"].parse().unwrap_or(usize::MAX),
                expert: c["expert"].parse().unwrap_or(usize::MAX),
                sublayer: sub.to_owned(),
            };
        }
        if self.experts_scope.is_match(name) {
            return TensorRole::Malformed;
        }
        if let Some(c) = self.router.captures(name) {
            return TensorRole::Router {
                layer: c["layer"].parse().unwrap_or(usize::MAX),
            };
        }
        if let Some(c) = self.shared.as_ref().and_then(|r| r.captures(name)) {
            return TensorRole::Shared {
                layer: c["layer"].parse().unwrap_or(usize::MAX),
            };
        }
        TensorRole::Other
    }

    /// Rewrite the expert index inside an expert tensor name.
    pub fn rename_expert(&self, name: &str, new_index: usize) -> Option<String> {
        let c = self.expert.captures(name)?;
        let m = c.name("expert")?;
        Some(format!("{}{}{}", &name[..m.start()], new_index, &name[m.end()..]))
    }

    /// Canonical names, used by the toy generator.
    pub fn expert_name(&self, layer: usize, expert: usize, sublayer: &str) -> String {
        format!(
            "model.layers.{layer}.{}.experts.{expert}.{sublayer}.weight",
            self.arch.table().moe_path
        )
    }

    pub fn router_name(&self, layer: usize) -> String {
        format!(
            "model.layers.{layer}.{}.{}",
            self.arch.table().moe_path,
            self.arch.table().router
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixtral_expert_name() {
        let a = Architecture::MixtralLike.naming();
        assert_eq!(
            a.classify("model.layers.3.block_sparse_moe.experts.5.w2.weight"),
            TensorRole::Expert {
                layer: 3,
                expert: 5,
                sublayer: "w2".into()
            }
        );
        assert_eq!(
            a.classify("model.layers.3.block_sparse_moe.gate.weight"),
            TensorRole::Router { layer: 3 }
        );
        assert_eq!(
            a.classify("model.layers.3.self_attn.q_proj.weight"),
            TensorRole::Other
        );
        assert_eq!(
            a.classify("model.layers.3.block_sparse_moe.experts.5.w9.weight"),
            TensorRole::Malformed
        );
    }

    #[test]
    fn deepseek_dense_and_shared() {
        let a = Architecture::DeepseekMoeLike.naming();
        assert_eq!(a.classify("model.layers.0.mlp.gate_proj.weight"), TensorRole::Other);
        assert_eq!(
            a.classify("model.layers.1.mlp.shared_experts.up_proj.weight"),
            TensorRole::Shared { layer: 1 }
        );
        assert_eq!(
            a.classify("model.layers.1.mlp.gate.weight"),
            TensorRole::Router { layer: 1 }
        );
    }

    #[test]
    fn qwen_shared_gate_is_shared() {
        let a = Architecture::QwenMoeLike.naming();
        assert_eq!(
            a.classify("model.layers.2.mlp.shared_expert_gate.weight"),
            TensorRole::Shared { layer: 2 }
        );
        assert_eq!(
            a.classify("model.layers.2.mlp.shared_expert.down_proj.weight"),
            TensorRole::Shared { layer: 2 }
        );
    }

    #[test]
    fn rename_keeps_prefix() {
        let a = Architecture::MixtralLike.naming();
        assert_eq!(
            a.rename_expert("lm.model.layers.12.block_sparse_moe.experts.7.w1.weight", 2)
                .unwrap(),
            "lm.model.layers.12.block_sparse_moe.experts.2.w1.weight"
        );
    }

    #[test]
    fn parse_arch_tags() {
        assert_eq!("toy".parse::<Architecture>().unwrap(), Architecture::Toy);
        assert_eq!("mixtral".parse::<Architecture>().unwrap(), Architecture::MixtralLike);
        assert!("llama".parse::<Architecture>().is_err());
    }
}
