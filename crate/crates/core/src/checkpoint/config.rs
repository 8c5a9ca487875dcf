use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde_json::value::RawValue;

use super::adapter::{Architecture, SharedExperts};
use crate::error::{Error, Result};

/// Extension key recording per-layer expert counts after a non-uniform prune.
pub const EXPERTS_PER_LAYER_KEY: &str = "moeits_experts_per_layer";

/// Model config document.
///
/// The typed fields are views onto `extra`, which keeps every key of the
/// source document in its original order with its original value bytes.
#[derive(Clone, Debug)]
pub struct ConfigDoc {
    pub architecture: Architecture,
    pub num_layers: usize,
    pub num_routed_experts: usize,
    pub num_experts_per_tok: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_shared_experts: usize,
    /// Per-layer expert counts when a prune left layers uneven.
    pub experts_per_layer: Option<BTreeMap<usize, usize>>,
    pub extra: IndexMap<String, Box<RawValue>>,
}

fn model_type(raw: &IndexMap<String, Box<RawValue>>) -> Option<String> {
    raw.get("model_type")
        .and_then(|v| serde_json::from_str::<String>(v.get()).ok())
}

impl ConfigDoc {
    pub fn from_path(path: &Path, arch_override: Option<Architecture>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingConfig(path.to_owned())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&bytes, arch_override)
    }

    pub fn parse(bytes: &[u8], arch_override: Option<Architecture>) -> Result<Self> {
        let extra: IndexMap<String, Box<RawValue>> = serde_json::from_slice(bytes)
            .map_err(|e| Error::InvalidConfig(format!("config is not a JSON object: {e}")))?;
        let architecture = match arch_override {
            Some(a) => a,
            None => {
                let mt = model_type(&extra).unwrap_or_default();
                Architecture::from_model_type(&mt).ok_or(Error::UnknownArchitecture(mt))?
            }
        };
        let keys = architecture.config_keys();

        let int = |key: &str| -> Result<Option<usize>> {
            match extra.get(key) {
                None => Ok(None),
                Some(raw) => match serde_json::from_str::<serde_json::Value>(raw.get())? {
                    serde_json::Value::Null => Ok(None),
                    v => v.as_u64().map(|n| Some(n as usize)).ok_or_else(|| {
                        Error::InvalidConfig(format!("`{key}` must be a non-negative integer"))
                    }),
                },
            }
        };
        let required = |key: &str| -> Result<usize> {
            int(key)?.ok_or_else(|| Error::InvalidConfig(format!("missing key `{key}`")))
        };

        let num_layers = required(keys.num_layers)?;
        let num_routed_experts = required(keys.num_routed_experts)?;
        let num_experts_per_tok = required(keys.num_experts_per_tok)?;
        let hidden_size = required(keys.hidden_size)?;
        let mut intermediate_size = None;
        for k in keys.intermediate_size {
            if let Some(v) = int(k)? {
                intermediate_size = Some(v);
                break;
            }
        }
        let intermediate_size = intermediate_size.ok_or_else(|| {
            Error::InvalidConfig(format!("missing key `{}`", keys.intermediate_size[0]))
        })?;
        let num_shared_experts = match keys.shared {
            SharedExperts::None => 0,
            SharedExperts::FlagBySize(k) => usize::from(int(k)?.unwrap_or(0) > 0),
            SharedExperts::Count(k) => int(k)?.unwrap_or(0),
        };
        let experts_per_layer = match extra.get(EXPERTS_PER_LAYER_KEY) {
            None => None,
            Some(raw) => {
                let m: BTreeMap<String, usize> = serde_json::from_str(raw.get())?;
                let mut out = BTreeMap::new();
                for (k, v) in m {
                    let layer = k.parse().map_err(|_| {
                        Error::InvalidConfig(format!("bad layer key `{k}` in {EXPERTS_PER_LAYER_KEY}"))
                    })?;
                    out.insert(layer, v);
                }
                Some(out)
            }
        };

        for (what, v) in [
            (keys.num_layers, num_layers),
            (keys.num_routed_experts, num_routed_experts),
            (keys.num_experts_per_tok, num_experts_per_tok),
            (keys.hidden_size, hidden_size),
            (keys.intermediate_size[0], intermediate_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("`{what}` must be positive")));
            }
        }
        if num_experts_per_tok > num_routed_experts {
            return Err(Error::InvalidConfig(format!(
                "num_experts_per_tok ({num_experts_per_tok}) exceeds routed experts ({num_routed_experts})"
            )));
        }

        Ok(Self {
            architecture,
            num_layers,
            num_routed_experts,
            num_experts_per_tok,
            hidden_size,
            intermediate_size,
            num_shared_experts,
            experts_per_layer,
            extra,
        })
    }

    /// Overwrite (or add) a key, keeping its position when it already exists.
    pub fn set_raw<T: serde::Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let raw = serde_json::value::to_raw_value(value)?;
        self.extra.insert(key.to_owned(), raw);
        Ok(())
    }

    pub fn remove_raw(&mut self, key: &str) {
        self.extra.shift_remove(key);
    }

    /// Serialize with two-space indentation. Values are emitted verbatim.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = String::from("{\n");
        let n = self.extra.len();
        for (i, (k, v)) in self.extra.iter().enumerate() {
            out.push_str("  ");
            out.push_str(&serde_json::to_string(k).expect("string keys serialize"));
            out.push_str(": ");
            out.push_str(v.get());
            if i + 1 < n {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("}\n");
        out.into_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIXTRAL: &str = r#"{"model_type": "mixtral", "num_hidden_layers": 32,
        "num_local_experts": 8, "num_experts_per_tok": 2, "hidden_size": 4096,
        "intermediate_size": 14336, "rope_theta": 1e6, "rms_norm_eps": 1.0e-05}"#;

    #[test]
    fn parses_mixtral_keys() {
        let c = ConfigDoc::parse(MIXTRAL.as_bytes(), None).unwrap();
        assert_eq!(c.architecture, Architecture::MixtralLike);
        assert_eq!(c.num_layers, 32);
        assert_eq!(c.num_routed_experts, 8);
        assert_eq!(c.num_experts_per_tok, 2);
        assert_eq!(c.num_shared_experts, 0);
    }

    #[test]
    fn unrelated_values_pass_through_verbatim() {
        let mut c = ConfigDoc::parse(MIXTRAL.as_bytes(), None).unwrap();
        c.set_raw("num_local_experts", &4).unwrap();
        let text = String::from_utf8(c.to_json_bytes()).unwrap();
        assert!(text.contains("\"rope_theta\": 1e6"), "{text}");
        assert!(text.contains("\"rms_norm_eps\": 1.0e-05"), "{text}");
        assert!(text.contains("\"num_local_experts\": 4"));
        let re = ConfigDoc::parse(text.as_bytes(), None).unwrap();
        assert_eq!(re.num_routed_experts, 4);
    }

    #[test]
    fn deepseek_shared_count() {
        let doc = r#"{"model_type":"deepseek_v2","num_hidden_layers":27,"n_routed_experts":64,
            "num_experts_per_tok":6,"hidden_size":2048,"moe_intermediate_size":1408,
            "intermediate_size":10944,"n_shared_experts":2}"#;
        let c = ConfigDoc::parse(doc.as_bytes(), None).unwrap();
        assert_eq!(c.intermediate_size, 1408);
        assert_eq!(c.num_shared_experts, 2);
    }

    #[test]
    fn unknown_architecture_needs_override() {
        let doc = r#"{"model_type":"llama","num_hidden_layers":2,"num_local_experts":4,
            "num_experts_per_tok":2,"hidden_size":8,"intermediate_size":16}"#;
        assert!(matches!(
            ConfigDoc::parse(doc.as_bytes(), None),
            Err(Error::UnknownArchitecture(_))
        ));
        let c = ConfigDoc::parse(doc.as_bytes(), Some(Architecture::Toy)).unwrap();
        assert_eq!(c.architecture, Architecture::Toy);
    }

    #[test]
    fn top_k_above_expert_count_rejected() {
        let doc = r#"{"model_type":"moeits-toy","num_hidden_layers":2,"num_local_experts":2,
            "num_experts_per_tok":3,"hidden_size":8,"intermediate_size":16}"#;
        assert!(ConfigDoc::parse(doc.as_bytes(), None).is_err());
    }
}
