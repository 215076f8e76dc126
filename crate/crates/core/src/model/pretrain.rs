//! Supervised teacher training on the domain-independent corpus.

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scm::{Dataset, Split};
use crate::train::{fine_tune, Counterfactual, TrainConfig, TrainData, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRoutine {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Minimum held-out accuracy.
    pub floor: f64,
}

impl Default for TeacherRoutine {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 2e-3,
            warmup_steps: 50,
            weight_decay: 0.05,
            clip_norm: 1.0,
            seed: 0,
            floor: 0.9,
        }
    }
}

impl TeacherRoutine {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed: self.seed,
            counterfactual: Counterfactual::Off,
            ..TrainConfig::desk()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherReport {
    pub params: ModelParams,
    pub held_out_accuracy: f64,
    pub log: TrainLog,
}

/// Trains a model from a seeded random init on `corpus` and checks the
/// accuracy on `held_out` against the routine's floor.
pub fn pretrain_teacher(
    config: &ModelConfig,
    corpus: &Dataset,
    held_out: &Dataset,
    routine: &TeacherRoutine,
) -> Result<TeacherReport> {
    for ds in [corpus, held_out] {
        if ds.split.is_confounded() {
            return Err(Error::Config(format!(
                "teacher data must be domain independent, got split {}",
                ds.split
            )));
        }
    }
    if corpus.split != Split::Diverse {
        return Err(Error::Config(format!(
            "teacher corpus must be the diverse split, got {}",
            corpus.split
        )));
    }
    if routine.epochs == 0 {
        return Err(Error::Config(
            "teacher training needs at least one epoch".into(),
        ));
    }
    let init = ModelParams::init(config, routine.seed)?;
    let (params, log) = fine_tune(
        &routine.train_config(),
        &TrainData {
            train: corpus,
            val: held_out,
        },
        None,
        &init,
        None,
    )?;
    let held_out_accuracy = log.selected().map_or(0.0, |e| e.val_accuracy);
    if held_out_accuracy < routine.floor {
        return Err(Error::TeacherFloor {
            achieved: held_out_accuracy,
            floor: routine.floor,
        });
    }
    Ok(TeacherReport {
        params,
        held_out_accuracy,
        log,
    })
}
