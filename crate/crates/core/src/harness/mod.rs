//! Experiment configuration and the command implementations behind the
//! `cfft` binary.
//!
//! A config file is a JSON object with a `preset` field; every other field
//! is deep-merged over the preset (objects merge key by key, everything else
//! replaces). The resolved config is hashed so each output row can name the
//! exact settings that produced it.

mod commands;
mod svg;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::counterfactual::{Masking, Refill, StrategyConfig};
use crate::error::{Error, Result};
use crate::eval::alpha_grid;
use crate::model::{ModelConfig, TeacherRoutine};
use crate::scm::{ScmSpec, Split};
use crate::train::{Counterfactual, TrainConfig};

pub use commands::*;
pub use svg::scatter_svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperConstants,
    /// Scaled-down benchmark that runs the full sweep on one CPU core.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub id_train: usize,
    pub id_val: usize,
    pub id_test: usize,
    pub ood_test: usize,
    pub diverse: usize,
    pub diverse_val: usize,
}

impl DataSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::IdTrain => self.id_train,
            Split::IdVal => self.id_val,
            Split::IdTest => self.id_test,
            Split::OodTest => self.ood_test,
            Split::Diverse => self.diverse,
            Split::DiverseVal => self.diverse_val,
        }
    }
}

/// Architecture knobs; the input and output sizes follow from the SCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub scm: ScmSpec,
    /// `hard_fraction` used for the teacher corpus instead of `scm.hard_fraction`.
    pub teacher_hard_fraction: f64,
    pub sizes: DataSizes,
    pub data_seed: u64,
    pub model: ModelShape,
    pub teacher: TeacherRoutine,
    /// Base fine-tuning config; `seed` and `counterfactual` are replaced per run.
    pub train: TrainConfig,
    pub strategies: Vec<Counterfactual>,
    pub alphas: Vec<f64>,
    pub mask_thresholds: Vec<f64>,
    pub mask_samples: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Vanilla, no-masking and every masking × refilling pair.
pub fn full_sweep(threshold: f64, rate: f64) -> Vec<Counterfactual> {
    let mut out = vec![Counterfactual::Off, Counterfactual::Identity];
    for masking in [
        Masking::Random { rate },
        Masking::Context { threshold },
        Masking::Object { threshold },
    ] {
        for refill in [Refill::None, Refill::Single, Refill::Multi] {
            out.push(Counterfactual::Masked(StrategyConfig::new(masking, refill)));
        }
    }
    out
}

const MASK_THRESHOLDS: [f64; 6] = [0.7, 0.6, 0.5, 0.4, 0.3, 0.2];

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk | Preset::PaperConstants => Self {
                preset,
                scm: ScmSpec::default(),
                teacher_hard_fraction: 0.0,
                sizes: DataSizes {
                    id_train: 20_000,
                    id_val: 2_000,
                    id_test: 4_000,
                    ood_test: 4_000,
                    diverse: 20_000,
                    diverse_val: 2_000,
                },
                data_seed: 0,
                model: ModelShape {
                    embed_dim: 64,
                    num_layers: 2,
                    num_heads: 4,
                    mlp_dim: 128,
                },
                teacher: TeacherRoutine::default(),
                train: if preset == Preset::Desk {
                    TrainConfig::desk()
                } else {
                    TrainConfig::paper_constants()
                },
                strategies: full_sweep(0.5, 0.5),
                alphas: alpha_grid(crate::eval::DEFAULT_GRID_POINTS),
                mask_thresholds: MASK_THRESHOLDS.to_vec(),
                mask_samples: 1000,
                seeds: vec![0, 1, 2],
                out_dir: None,
            },
            Preset::Compact => Self {
                preset,
                scm: ScmSpec {
                    num_classes: 4,
                    num_domains: 4,
                    image_side: 16,
                    hard_fraction: 0.3,
                    ..ScmSpec::default()
                },
                teacher_hard_fraction: 0.0,
                sizes: DataSizes {
                    id_train: 3_000,
                    id_val: 500,
                    id_test: 2_000,
                    ood_test: 2_000,
                    diverse: 6_000,
                    diverse_val: 1_000,
                },
                data_seed: 0,
                model: ModelShape {
                    embed_dim: 32,
                    num_layers: 2,
                    num_heads: 4,
                    mlp_dim: 64,
                },
                teacher: TeacherRoutine {
                    epochs: 30,
                    lr: 4e-3,
                    ..TeacherRoutine::default()
                },
                train: TrainConfig::compact(),
                strategies: full_sweep(0.5, 0.5),
                alphas: alpha_grid(11),
                mask_thresholds: MASK_THRESHOLDS.to_vec(),
                mask_samples: 500,
                seeds: vec![0, 1, 2],
                out_dir: None,
            },
        }
    }

    /// Parses a config document, merging it over its `preset` (default `desk`).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let Value::Object(obj) = &user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let preset: Preset = match obj.get("preset") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        let mut merged = serde_json::to_value(Self::preset(preset))?;
        merge(&mut merged, user);
        let cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scm.validate()?;
        self.teacher_spec().validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for s in &self.strategies {
            TrainConfig {
                counterfactual: *s,
                ..self.train.clone()
            }
            .validate()?;
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
        }
        if let Some(t) = self
            .mask_thresholds
            .iter()
            .find(|t| !(0.0..=1.0).contains(*t))
        {
            return Err(Error::Config(format!("mask threshold {t} outside [0, 1]")));
        }
        for split in Split::ALL {
            if self.sizes.get(split) == 0 {
                return Err(Error::Config(format!("split {split} has size 0")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            num_patches: self.scm.num_patches(),
            patch_len: self.scm.patch_len(),
            num_classes: self.scm.num_classes,
            mlp_dim: self.model.mlp_dim,
        }
    }

    pub fn teacher_spec(&self) -> ScmSpec {
        ScmSpec {
            hard_fraction: self.teacher_hard_fraction,
            ..self.scm.clone()
        }
    }

    /// Generator settings of a split.
    pub fn split_spec(&self, split: Split) -> ScmSpec {
        match split {
            Split::Diverse | Split::DiverseVal => self.teacher_spec(),
            _ => self.scm.clone(),
        }
    }

    /// Fine-tuning config of one sweep cell.
    pub fn run_config(&self, strategy: Counterfactual, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            counterfactual: strategy,
            ..self.train.clone()
        }
    }

    /// First 12 hex digits of the SHA-256 of the resolved config, ignoring
    /// the output directory.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))[..12].to_string()
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Parses a strategy label: `vanilla`, `no-masking` or
/// `<random|context|object>-<value>/<none|single|multi>`.
pub fn parse_strategy(label: &str) -> Result<Counterfactual> {
    let bad = || Error::Config(format!("unknown strategy `{label}`"));
    match label {
        "vanilla" => return Ok(Counterfactual::Off),
        "no-masking" => return Ok(Counterfactual::Identity),
        _ => {}
    }
    let (mask, refill) = label.split_once('/').ok_or_else(bad)?;
    let (kind, value) = mask.split_once('-').ok_or_else(bad)?;
    let v: f64 = value.parse().map_err(|_| bad())?;
    let masking = match kind {
        "random" => Masking::Random { rate: v },
        "context" => Masking::Context { threshold: v },
        "object" => Masking::Object { threshold: v },
        _ => return Err(bad()),
    };
    let refill = match refill {
        "none" => Refill::None,
        "single" => Refill::Single,
        "multi" => Refill::Multi,
        _ => return Err(bad()),
    };
    let s = StrategyConfig::new(masking, refill);
    s.validate()?;
    Ok(Counterfactual::Masked(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::PaperConstants, Preset::Compact] {
            ExperimentConfig::preset(p).validate().unwrap();
        }
        assert_eq!(ExperimentConfig::preset(Preset::Desk).strategies.len(), 11);
    }

    #[test]
    fn overrides_merge_deeply() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"preset": "compact", "train": {"epochs": 2}, "seeds": [7]}"#,
        )
        .unwrap();
        let base = ExperimentConfig::preset(Preset::Compact);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, base.train.lr);
        assert_eq!(cfg.seeds, vec![7]);
        assert_ne!(cfg.hash(), base.hash());
    }

    #[test]
    fn missing_preset_defaults_to_desk() {
        let cfg = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(Preset::Desk));
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"seeds": []}"#,
            r#"{"preset": "huge"}"#,
            r#"{"train": {"epochs": 2, "typo": 1}}"#,
            r#"{"alphas": [1.5]}"#,
            "[]",
        ] {
            match ExperimentConfig::from_json_str(text) {
                Err(e) => assert_eq!(e.exit_code(), 2, "{text}: {e}"),
                Ok(_) => panic!("accepted {text}"),
            }
        }
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = ExperimentConfig::preset(Preset::Compact);
        let b = ExperimentConfig {
            out_dir: Some("/tmp/x".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn strategy_labels_round_trip() {
        for s in full_sweep(0.5, 0.25) {
            assert_eq!(parse_strategy(&s.label()).unwrap(), s);
        }
        assert!(parse_strategy("object-2/single").is_err());
        assert!(parse_strategy("blur-0.5/none").is_err());
    }

    #[test]
    fn teacher_corpus_uses_its_own_hard_fraction() {
        let cfg = ExperimentConfig::preset(Preset::Compact);
        assert_eq!(cfg.split_spec(Split::Diverse).hard_fraction, 0.0);
        assert_eq!(cfg.split_spec(Split::IdTrain).hard_fraction, 0.3);
    }
}
