//! Run configuration: defaults, then a JSON file, then `--section.key=value` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vitprune_core::data::{load_raw, synth_split, Dataset};
use vitprune_core::game::RewardConfig;
use vitprune_core::rl_train::{PretrainConfig, TrainConfig};
use vitprune_core::vit::ViTConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synth,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Directories holding `images.bin` and `labels.csv` when `kind` is raw.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synth,
            seed: 0,
            train_count: 8000,
            test_count: 2000,
            image_size: 16,
            num_classes: 4,
            train_dir: None,
            test_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Checkpoint manifest to start from (`vit.*`, optionally `actor.*` and `critic.*`).
    pub load: Option<PathBuf>,
    /// Save every this many epochs during `train`; 0 saves only at the end.
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// `alpha / beta` grid.
    pub ratios: Vec<f64>,
    pub beta: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.3, 1.0, 3.0],
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Token count including the class token; patch count must be a square.
    pub tokens: usize,
    pub retention: Vec<f64>,
    pub trials: usize,
    pub warmup: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub prune_after: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let v = ViTConfig::throughput_bench();
        Self {
            tokens: v.num_tokens(),
            retention: vec![0.5],
            trials: 20,
            warmup: 3,
            patch_size: v.patch_size,
            embed_dim: v.embed_dim,
            depth: v.depth,
            num_heads: v.num_heads,
            prune_after: v.prune_after,
        }
    }
}

impl BenchConfig {
    pub fn vit_config(&self) -> Result<ViTConfig, CliError> {
        let patches = self.tokens.saturating_sub(1);
        let grid = (patches as f64).sqrt().round() as usize;
        if grid == 0 || grid * grid != patches {
            return Err(CliError::Config(format!(
                "bench.tokens {} is not a square patch count plus the class token",
                self.tokens
            )));
        }
        let cfg = ViTConfig {
            image_size: grid * self.patch_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            prune_after: self.prune_after.clone(),
            ..ViTConfig::throughput_bench()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    /// Number of test images rendered.
    pub count: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self { count: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub checkpoint: CheckpointConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub visualize: VisualizeConfig,
}

impl RunConfig {
    /// Defaults, overlaid by `file` if given, then by `overrides` (`section.key`, raw value).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let from_file: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, from_file);
        }
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.vit.validate()?;
        self.train.validate()?;
        self.reward.validate()?;
        if self.data.image_size != self.vit.image_size && self.data.kind == DataKind::Synth {
            return Err(CliError::Config(format!(
                "data.image_size {} differs from vit.image_size {}",
                self.data.image_size, self.vit.image_size
            )));
        }
        if self.data.num_classes != self.vit.num_classes {
            return Err(CliError::Config(format!(
                "data.num_classes {} differs from vit.num_classes {}",
                self.data.num_classes, self.vit.num_classes
            )));
        }
        if self.pretrain.batch_size == 0 {
            return Err(CliError::Config("pretrain.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Train and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let d = &self.data;
        let (train, test) = match d.kind {
            DataKind::Synth => synth_split(d.seed, d.train_count, d.test_count, d.image_size, d.num_classes)?,
            DataKind::Raw => {
                let dir = |p: &Option<PathBuf>, name: &str| {
                    p.clone()
                        .ok_or_else(|| CliError::Config(format!("data.{name} is required for raw data")))
                };
                (
                    load_raw(&dir(&d.train_dir, "train_dir")?, d.num_classes)?,
                    load_raw(&dir(&d.test_dir, "test_dir")?, d.num_classes)?,
                )
            }
        };
        let v = &self.vit;
        for ds in [&train, &test] {
            if !ds.is_empty() && (ds.channels != v.channels || ds.height != v.image_size || ds.width != v.image_size) {
                return Err(CliError::Config(format!(
                    "dataset images are {}x{}x{}, model expects {}x{}x{}",
                    ds.channels, ds.height, ds.width, v.channels, v.image_size, v.image_size
                )));
            }
        }
        Ok((train, test))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a flag value: JSON when it parses, a policy shorthand for
/// `policy_mode`, otherwise a plain string.
fn parse_value(key: &str, raw: &str) -> Value {
    if key.ends_with("policy_mode") {
        if let Some(p) = raw.strip_prefix("random:") {
            if let Ok(p) = p.parse::<f64>() {
                return serde_json::json!({ "kind": "random", "keep_prob": p });
            }
        }
        if !raw.starts_with('{') {
            return serde_json::json!({ "kind": raw });
        }
    }
    if (key.ends_with("retention") || key.ends_with("ratios") || key.ends_with("prune_after")) && !raw.starts_with('[')
    {
        let items: Vec<Value> = raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| serde_json::from_str(s.trim()).unwrap_or_else(|_| Value::String(s.into())))
            .collect();
        return Value::Array(items);
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let Some((section, field)) = key.split_once('.') else {
        return Err(CliError::Usage(format!(
            "flag --{key} is not of the form --section.key=value"
        )));
    };
    let sec = root
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| CliError::Usage(format!("unknown config section `{section}`")))?;
    if !sec.contains_key(field) {
        return Err(CliError::Usage(format!("unknown config key `{section}.{field}`")));
    }
    sec.insert(field.to_string(), parse_value(key, raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vitprune_core::pruning::PolicyMode;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.into(), v.into())
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"train": {"k": 3, "epochs": 4}, "reward": {"alpha": 0.5}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&file), &[kv("train.k", "7")]).unwrap();
        assert_eq!(cfg.train.k, 7);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.reward.alpha, 0.5);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn policy_shorthand_and_lists() {
        let cfg = RunConfig::resolve(
            None,
            &[kv("train.policy_mode", "random:0.25"), kv("bench.retention", "0.5,0.7")],
        )
        .unwrap();
        assert_eq!(cfg.train.policy_mode, PolicyMode::Random { keep_prob: 0.25 });
        assert_eq!(cfg.bench.retention, vec![0.5, 0.7]);
        let cfg = RunConfig::resolve(None, &[kv("train.policy_mode", "single_agent")]).unwrap();
        assert_eq!(cfg.train.policy_mode, PolicyMode::SingleAgent);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            RunConfig::resolve(None, &[kv("train.nope", "1")]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &[kv("nope.k", "1")]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &[kv("train.k", "\"many\"")]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &[kv("vit.num_heads", "5")]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::resolve(None, &[kv("reward.alpha", "2.5")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("config.json");
        std::fs::write(&file, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&file), &[]).unwrap(), cfg);
    }

    #[test]
    fn bench_geometry_from_token_count() {
        let b = BenchConfig::default();
        assert_eq!(b.vit_config().unwrap().num_tokens(), 197);
        let bad = BenchConfig { tokens: 100, ..b };
        assert!(bad.vit_config().is_err());
    }
}
