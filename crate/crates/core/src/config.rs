//! Run configuration as flat JSON with dotted keys.
//!
//! ```
//! use protomargin::config::RunConfig;
//! let cfg = RunConfig::from_json_str(r#"{"seed": 7, "train.lambda_f": 0.0, "model.k": 1}"#).unwrap();
//! assert_eq!(cfg.seed, 7);
//! assert_eq!(cfg.train.lambda_f, 0.0);
//! assert_eq!(cfg.model.k, 1);
//! assert!(RunConfig::from_json_str(r#"{"train.lamda_f": 0.0}"#).is_err());
//! ```
//!
//! Precedence, lowest first: built-in defaults, the config file, command-line
//! flags. The master `seed` also seeds training and bootstrap resampling, so
//! those sections have no seed key of their own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::classes::NUM_CLASSES;
use crate::error::{Error, IoContext, Result};
use crate::metrics::EvalOptions;
use crate::protonet::ArchConfig;
use crate::synthgen::{CorpusConfig, SplitSpec, DEFAULT_MALIGNANCY_PRIOR};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    pub samples_per_class: [usize; NUM_CLASSES],
    pub image_size: usize,
    pub confounder_strength: f64,
    pub malignancy_prior: [f64; NUM_CLASSES],
    /// Train / val / test sizes; must add up to the corpus size.
    pub split: [usize; 3],
    pub fine_annotated: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            samples_per_class: [275; NUM_CLASSES],
            image_size: 112,
            confounder_strength: 0.9,
            malignancy_prior: DEFAULT_MALIGNANCY_PRIOR,
            split: [600, 100, 125],
            fine_annotated: 30,
        }
    }
}

impl DatasetConfig {
    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            samples_per_class: self.samples_per_class,
            image_size: self.image_size,
            confounder_strength: self.confounder_strength,
            malignancy_prior: self.malignancy_prior,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::Counts(self.split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory: checkpoints, logs, reports.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Keys filled from other keys rather than set directly.
const DERIVED: [&str; 3] = ["model.image_size", "train.seed", "eval.seed"];

/// Every settable key with its meaning.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for data, initialization, batching, augmentation and bootstrap"),
    ("out", "run directory for checkpoints, logs and reports"),
    ("dataset.dir", "dataset directory written by generate and read by the other commands"),
    ("dataset.samples_per_class", "corpus size per class [circumscribed, indistinct, spiculated]"),
    ("dataset.image_size", "image side length in pixels (multiple of 8)"),
    ("dataset.confounder_strength", "probability that an image carries its class glyph"),
    ("dataset.malignancy_prior", "P(malignant | class) per class"),
    ("dataset.split", "train, val and test sizes; must add up to the corpus size"),
    ("dataset.fine_annotated", "training images that keep fine masks (D')"),
    ("model.block_channels", "output channels of the three conv blocks"),
    ("model.latent_channels", "channels of the latent grid and of each prototype"),
    ("model.prototypes_per_class", "prototypes per margin class"),
    ("model.k", "cells averaged by top-k pooling and by the cluster/separation distances"),
    ("model.epsilon", "epsilon in the log similarity ln((d+1)/(d+eps))"),
    ("train.lambda_c", "cluster cost weight"),
    ("train.lambda_s", "separation cost weight"),
    ("train.lambda_f", "fine-annotation cost weight"),
    ("train.fine_normalization", "scaling of the fine term: none, sqrt_pixels or pixels"),
    ("train.epochs_per_cycle", "A1 epochs per cycle"),
    ("train.max_cycles", "upper bound on A1-A2-A3 cycles"),
    ("train.convergence_tol", "stop cycling when post-A3 cross entropy improves by less than this (relative)"),
    ("train.coarse_per_batch", "items from D per A1 batch"),
    ("train.fine_per_batch", "items from D' per A1 batch"),
    ("train.lr_a1", "Adam learning rate for backbone and prototypes"),
    ("train.lr_a3", "Adam learning rate for the class-connection layer"),
    ("train.lr_b", "Adam learning rate for the malignancy head"),
    ("train.a3_steps", "full-batch steps per A3 stage"),
    ("train.b_steps", "full-batch steps of stage B"),
    ("train.augment", "random flip, rotation and crop of A1 batch items"),
    ("train.prune", "drop prototypes that duplicate another's class and source patch"),
    ("eval.tau", "activation precision keeps the top (1 - tau) of each map"),
    ("eval.resamples", "bootstrap resamples per confidence interval"),
    ("eval.level", "confidence level of the bootstrap intervals"),
];

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    /// The config as flat dotted keys, derived keys omitted.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut flat = Map::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        for k in DERIVED {
            flat.remove(k);
        }
        flat
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes");
        s.push('\n');
        s
    }

    /// Overrides `self` with the keys of a flat JSON object.
    pub fn apply_flat(&mut self, overrides: &Map<String, Value>) -> Result<()> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            if !flat.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            flat.insert(k.clone(), v.clone());
        }
        let mut next: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))?;
        next.sync_derived();
        *self = next;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut cfg = RunConfig::default();
        cfg.apply_flat(&map)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the master seed and image size into the sections that use them.
    pub fn sync_derived(&mut self) {
        self.model.image_size = self.dataset.image_size;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.dataset.samples_per_class.iter().sum();
        let split: usize = self.dataset.split.iter().sum();
        if total != split {
            return Err(Error::Config(format!(
                "dataset.split adds up to {split} but the corpus has {total} samples"
            )));
        }
        if !(0.0..=1.0).contains(&self.dataset.confounder_strength) {
            return Err(Error::Config(format!(
                "dataset.confounder_strength must lie in [0, 1], got {}",
                self.dataset.confounder_strength
            )));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()
    }
}

/// Help text listing every key with its default.
pub fn describe_keys() -> String {
    let flat = RunConfig::default().to_flat();
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, doc) in KEY_DOCS {
        let default = flat.get(*k).map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("  {k:<width$}  {doc} [default: {default}]\n"));
    }
    s
}
