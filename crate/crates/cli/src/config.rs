//! Run configuration: one JSON document, layered as
//! built-in defaults ← config file ← `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use exuseg::gradcheck::GradcheckOptions;
use exuseg::inference::InferenceMode;
use exuseg::nn::ModelConfig;
use exuseg::training::{AdamConfig, TrainSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory of fundus images.
    pub images: PathBuf,
    /// Directory of hard-exudate masks.
    pub masks: PathBuf,
    /// Mask file stem = image stem + this suffix.
    pub mask_suffix: String,
    /// Text files with one image id (file stem) per line.
    pub train_list: PathBuf,
    pub test_list: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extraction {
    pub per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inference {
    pub mode: InferenceMode,
    /// Patches per forward pass.
    pub batch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    /// Crop 256×256 ground truth to the valid-mode window before counting.
    pub align_truth: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub extraction: Extraction,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub inference: Inference,
    pub metrics: Metrics,
    pub gradcheck: GradcheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths {
                images: "data/images".into(),
                masks: "data/masks".into(),
                mask_suffix: "_EX".into(),
                train_list: "data/train.txt".into(),
                test_list: "data/test.txt".into(),
                output_dir: "runs/default".into(),
            },
            extraction: Extraction {
                per_class: 2500,
                seed: 0,
            },
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            adam: AdamConfig::default(),
            inference: Inference {
                mode: InferenceMode::Valid,
                batch: 1024,
            },
            metrics: Metrics { align_truth: true },
            gradcheck: GradcheckOptions::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key;
/// anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string, so `--set paths.output_dir=runs/x` needs no quoting.
fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("--set expects key=value, got {assignment:?}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("--set {key}: {} is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

impl RunConfig {
    /// Loads defaults, the optional config file and overrides. Relative paths
    /// in the file resolve against the file's directory.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut root = serde_json::to_value(RunConfig::default())?;
        let base_dir = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let patch: Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
                merge(&mut root, patch);
                path.parent().map(Path::to_path_buf)
            }
            None => None,
        };
        for s in overrides {
            set_path(&mut root, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
        if let Some(seed) = seed {
            cfg.extraction.seed = seed;
            cfg.schedule.seed = seed;
            cfg.gradcheck.seed = seed;
        }
        if let Some(dir) = base_dir.filter(|d| !d.as_os_str().is_empty()) {
            for p in [
                &mut cfg.paths.images,
                &mut cfg.paths.masks,
                &mut cfg.paths.train_list,
                &mut cfg.paths.test_list,
                &mut cfg.paths.output_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.extraction.per_class == 0 {
            bail!("extraction.per_class must be positive");
        }
        if self.inference.batch == 0 {
            bail!("inference.batch must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back.schedule, TrainSchedule::default());
    }

    #[test]
    fn overrides_parse_json_then_string() {
        let cfg = RunConfig::load(
            None,
            &[
                "schedule.shard_size=100".into(),
                "schedule.batch_size=10".into(),
                "paths.output_dir=runs/x".into(),
                "inference.mode=\"padded\"".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.schedule.shard_size, 100);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("runs/x"));
        assert_eq!(cfg.inference.mode, InferenceMode::Padded);
        assert_eq!((cfg.schedule.seed, cfg.extraction.seed), (9, 9));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::load(None, &["schedule.shards=3".into()], None).is_err());
        assert!(RunConfig::load(None, &["schedule.batch_size=0".into()], None).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()], None).is_err());
    }

    #[test]
    fn file_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"paths": {"output_dir": "out"}, "schedule": {"epochs_per_shard": 2}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &[], None).unwrap();
        assert_eq!(cfg.paths.output_dir, dir.path().join("out"));
        assert_eq!(cfg.schedule.epochs_per_shard, 2);
        assert_eq!(cfg.schedule.shard_size, 40_000);
    }
}
