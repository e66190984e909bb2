//! Run configuration: defaults, JSON files with flat dotted keys, and
//! command-line overrides, applied in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::head::{GraphKind, HeadConfig, HeadMode};
use crate::synthgen::SynthConfig;
use crate::training::{EpisodeConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// word2vec text file; synthetic clustered embeddings when absent.
    pub path: Option<String>,
    pub dim: usize,
    /// Latent dimension of synthetic clustered embeddings.
    pub latent_dim: usize,
    /// Per-row jitter of synthetic clustered embeddings, relative to row scale.
    pub jitter: f64,
    pub background_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Registry JSON; the 15/5 VOC-named split when absent.
    pub registry: Option<String>,
    /// Training records (base, background and novel classes); synthetic when absent.
    pub train: Option<String>,
    pub test: Option<String>,
    /// `{"labels": [...]}` lines for the heuristic graph; synthetic when absent.
    pub cooccurrence: Option<String>,
    /// Number of synthetic label sets.
    pub cooccurrence_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of consecutive seeds used by sweeps, starting at `seed`.
    pub seeds: usize,
    pub head: HeadConfig,
    pub embeddings: EmbeddingSection,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub episode: EpisodeConfig,
    /// Apply the relation graph during base training as well as fine-tuning.
    pub graph_in_base: bool,
    /// Split the trunk into independent classification and regression copies
    /// before fine-tuning.
    pub decouple: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 20,
            head: HeadConfig {
                mode: HeadMode::Srr,
                graph: GraphKind::Dynamic,
                ..HeadConfig::default()
            },
            embeddings: EmbeddingSection {
                path: None,
                dim: crate::embeddings::DEFAULT_EMBEDDING_DIM,
                latent_dim: 6,
                jitter: 0.3,
                background_seed: crate::embeddings::DEFAULT_BACKGROUND_SEED,
            },
            data: DataSection {
                registry: None,
                train: None,
                test: None,
                cooccurrence: None,
                cooccurrence_images: 400,
            },
            synth: SynthConfig::default(),
            train: TrainConfig::base_default(),
            finetune: TrainConfig::finetune_default(),
            episode: EpisodeConfig::default(),
            graph_in_base: true,
            decouple: false,
        }
    }
}

/// `{"a": {"b": 1}}` becomes `{"a.b": 1}`. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

/// Sets `path` (dot separated) inside `root`, creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty segment in key `{path}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("key `{path}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

impl RunConfig {
    /// Overlays dotted keys from `layer` onto this configuration. Unknown
    /// keys are rejected.
    pub fn merged(&self, layer: &Map<String, Value>) -> Result<RunConfig> {
        let mut base = serde_json::to_value(self)?;
        for (k, v) in layer {
            let nested = match v {
                Value::Object(m) if !m.is_empty() => flatten(v).into_iter().map(|(sub, x)| (format!("{k}.{sub}"), x)).collect(),
                _ => vec![(k.clone(), v.clone())],
            };
            for (key, x) in nested {
                set_path(&mut base, &key, x)?;
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Accepts a flat or nested JSON object, or a run metadata document
    /// holding the configuration under `"config"`.
    pub fn from_json_str(&self, text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text)?;
        let obj = match value {
            Value::Object(mut m) => match m.remove("config") {
                Some(Value::Object(inner)) => inner,
                Some(_) => return Err(Error::Config("`config` must be an object".into())),
                None => m,
            },
            _ => return Err(Error::Config("configuration must be a JSON object".into())),
        };
        self.merged(&obj)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::default().from_json_str(&text)
    }

    /// Flat dotted-key view, as written into run metadata.
    pub fn to_flat(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("configuration serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        self.synth.validate()?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.episode.k == 0 || self.episode.shots.contains(&0) {
            return Err(Error::Config("shot counts must be at least 1".into()));
        }
        if self.data.train.is_none() && self.head.d_in != self.synth.d_in {
            return Err(Error::Config(format!(
                "head.d_in ({}) must equal synth.d_in ({}) for synthetic data",
                self.head.d_in, self.synth.d_in
            )));
        }
        if self.head.mode != HeadMode::Srr && self.head.graph != GraphKind::None {
            return Err(Error::Config(format!(
                "head.graph `{}` requires head.mode srr",
                self.head.graph
            )));
        }
        Ok(())
    }
}
