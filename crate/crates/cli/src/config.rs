//! Run configuration: defaults, then a JSON file, then dotted-key flags.

use std::path::{Path, PathBuf};

use cerberus::backbone::BackboneConfig;
use cerberus::engine::DecodeConfig;
use cerberus::gate::{EntropySource, GateConfig};
use cerberus::heads::{HeadConfig, Paradigm, ResblockVariant};
use cerberus::trainer::TrainConfig;
use cerberus::TokenId;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParadigmChoice {
    Vanilla,
    Medusa,
    Cerberus,
}

impl ParadigmChoice {
    pub fn heads(self) -> Option<Paradigm> {
        match self {
            ParadigmChoice::Vanilla => None,
            ParadigmChoice::Medusa => Some(Paradigm::Medusa),
            ParadigmChoice::Cerberus => Some(Paradigm::Cerberus),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsSection {
    pub n_heads: usize,
    pub resblocks_per_head: usize,
    pub special_position: usize,
    pub variant: ResblockVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSection {
    /// Path budget for decode and calibrate-gate.
    pub paths: usize,
    pub top_k: usize,
    /// Explicit template file; otherwise templates are selected from the heads' rank statistics.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSection {
    pub enabled: bool,
    /// Bits. `null` takes the calibrated value stored with the heads, or never gates.
    pub threshold: Option<f64>,
    pub source: EntropySource,
    /// Cost of one parallel step beyond a plain forward, used by calibrate-gate.
    pub parallel_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSection {
    pub max_tokens: usize,
    pub stop_token: Option<TokenId>,
    pub begin_token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub corpus: PathBuf,
    pub eval_fraction: f64,
    /// Prompt suite JSON; the built-in suite when `null`.
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub paradigms: Vec<ParadigmChoice>,
    pub tree_paths: Vec<usize>,
    /// Also run each configuration with the gate on, when a threshold is known.
    pub gated: bool,
    /// Positions of the train split used for rank statistics and of the eval split for top-k accuracy.
    pub topk_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsSection {
    pub backbone: Option<PathBuf>,
    pub medusa_heads: Option<PathBuf>,
    pub cerberus_heads: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paradigm: ParadigmChoice,
    pub backbone: BackboneConfig,
    pub heads: HeadsSection,
    pub tree: TreeSection,
    pub gate: GateSection,
    pub decode: DecodeSection,
    pub train_backbone: TrainConfig,
    pub train_heads: TrainConfig,
    pub data: DataSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

/// Keys present in the serialized defaults but owned by another key.
const DERIVED_KEYS: &[&str] = &[
    "train_backbone.seed",
    "train_backbone.eval_fraction",
    "train_heads.seed",
    "train_heads.eval_fraction",
];

impl Default for RunConfig {
    fn default() -> Self {
        let h = HeadConfig::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            paradigm: ParadigmChoice::Cerberus,
            backbone: BackboneConfig::default(),
            heads: HeadsSection {
                n_heads: h.n_heads,
                resblocks_per_head: h.resblocks_per_head,
                special_position: h.special_position,
                variant: h.variant,
            },
            tree: TreeSection {
                paths: 63,
                top_k: h.top_k,
                templates: None,
            },
            gate: GateSection {
                enabled: true,
                threshold: None,
                source: EntropySource::Hidden,
                parallel_overhead: 0.5,
            },
            decode: DecodeSection {
                max_tokens: 64,
                stop_token: None,
                begin_token: 0,
            },
            train_backbone: TrainConfig {
                lr: 3e-3,
                ..Default::default()
            },
            train_heads: TrainConfig::default(),
            data: DataSection {
                corpus: PathBuf::from("data/toy_corpus.txt"),
                eval_fraction: 0.1,
                prompts: None,
            },
            bench: BenchSection {
                paradigms: vec![ParadigmChoice::Medusa, ParadigmChoice::Cerberus],
                tree_paths: vec![63, 120, 150],
                gated: true,
                topk_positions: 8000,
            },
            paths: PathsSection {
                backbone: None,
                medusa_heads: None,
                cerberus_heads: None,
            },
        }
    }
}

impl RunConfig {
    /// Merges `file` and `overrides` over the defaults. Keys are dotted paths;
    /// `-` in a key is read as `_`. Override values are JSON, falling back to a
    /// bare string.
    pub fn resolve(file: Option<&Value>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        for key in DERIVED_KEYS {
            let (section, leaf) = key.split_once('.').expect("dotted");
            tree[section].as_object_mut().expect("section").remove(leaf);
        }
        if let Some(file) = file {
            if !file.is_object() {
                return Err(CliError::Config("config file must hold a JSON object".into()));
            }
            merge(&mut tree, file, "")?;
        }
        for (key, raw) in overrides {
            set_dotted(&mut tree, key, raw)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))?;
        for t in [&mut cfg.train_backbone, &mut cfg.train_heads] {
            t.seed = cfg.seed;
            t.eval_fraction = cfg.data.eval_fraction;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(e, p))?;
                let v: Value =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Some(v)
            }
            None => None,
        };
        Self::resolve(file.as_ref(), overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.backbone.validate()?;
        self.head_config(Paradigm::Cerberus).validate()?;
        self.train_backbone.validate()?;
        self.train_heads.validate()?;
        if self.tree.paths == 0 || self.bench.tree_paths.contains(&0) {
            return Err(CliError::Config("tree.paths and bench.tree_paths must be ≥ 1".into()));
        }
        if let Some(t) = self.gate.threshold {
            if t.is_nan() || t < 0.0 {
                return Err(CliError::Config(format!("gate.threshold must be ≥ 0, got {t}")));
            }
        }
        if !(self.gate.parallel_overhead >= 0.0) {
            return Err(CliError::Config("gate.parallel_overhead must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return Err(CliError::Config("data.eval_fraction must be in [0, 1)".into()));
        }
        if self.decode.max_tokens == 0 {
            return Err(CliError::Config("decode.max_tokens must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn head_config(&self, paradigm: Paradigm) -> HeadConfig {
        HeadConfig {
            paradigm,
            n_heads: self.heads.n_heads,
            resblocks_per_head: self.heads.resblocks_per_head,
            special_position: self.heads.special_position,
            top_k: self.tree.top_k,
            variant: self.heads.variant,
        }
    }

    pub fn decode_config(&self, gate: GateConfig) -> DecodeConfig {
        DecodeConfig {
            max_tokens: self.decode.max_tokens,
            stop_token: self.decode.stop_token,
            begin_token: self.decode.begin_token,
            gate,
            seed: self.seed,
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.paths
            .backbone
            .clone()
            .unwrap_or_else(|| self.out_dir.join("backbone.crbs"))
    }

    pub fn heads_path(&self, p: Paradigm) -> PathBuf {
        let explicit = match p {
            Paradigm::Medusa => &self.paths.medusa_heads,
            Paradigm::Cerberus => &self.paths.cerberus_heads,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.out_dir.join(format!("heads-{p}.crbs")))
    }
}

fn merge(base: &mut Value, over: &Value, prefix: &str) -> Result<(), CliError> {
    let (Some(base), Some(over)) = (base.as_object_mut(), over.as_object()) else {
        unreachable!("merge is only called on objects");
    };
    for (k, v) in over {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let slot = base
            .get_mut(k)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        if slot.is_object() {
            if !v.is_object() {
                return Err(CliError::Config(format!("config key {key:?} must be an object")));
            }
            merge(slot, v, &key)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

fn set_dotted(tree: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let norm = key.replace('-', "_");
    let mut slot = &mut *tree;
    for part in norm.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
    }
    if slot.is_object() {
        return Err(CliError::Config(format!(
            "config key {key:?} is a section, not a value"
        )));
    }
    let parsed = match serde_json::from_str::<Value>(raw) {
        Ok(v) if !(slot.is_string() && !v.is_string()) => v,
        _ => Value::String(raw.to_string()),
    };
    *slot = parsed;
    Ok(())
}
