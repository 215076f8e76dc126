//! Fine-tuning: configuration presets, the per-step objective with
//! counterfactual construction, AdamW updates and validation-based selection.

mod log;
pub mod objective;
pub mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, GraphError, ParamSet};
use crate::counterfactual::{build_counterfactuals, Refill, RelevanceTarget, StrategyConfig};
use crate::error::{Error, Result};
use crate::eval::{accuracy, argmax};
use crate::model::{build_forward, param_checksum, ModelParams};
use crate::relevance::{batch_scores, normalize, RelevanceMap};
use crate::rng;
use crate::scm::{batch_tensor, Dataset, PatchImage};

pub(crate) use log::csv_err;
pub use log::{EpochRecord, StepRecord, TrainLog, TrainSummary};
pub use objective::{
    append_objective, cross_entropy_only, objective, objective_wise_kd, CfInput, LossNodes,
    LossTerms, LossWeights,
};
pub use optim::{clip_global_norm, global_norm, AdamW, Schedule};

const ORDER_STREAM: u64 = 0x0D;
const CF_STREAM: u64 = 0xCF;

/// How the distillation images are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Counterfactual {
    /// Vanilla fine-tuning: cross-entropy only.
    Off,
    /// Feature distillation on the unmasked images (`x_cf = x`).
    Identity,
    Masked(StrategyConfig),
}

impl Counterfactual {
    pub fn label(&self) -> String {
        match self {
            Counterfactual::Off => "vanilla".into(),
            Counterfactual::Identity => "no-masking".into(),
            Counterfactual::Masked(s) => s.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    #[default]
    IdValTop1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub counterfactual: Counterfactual,
    #[serde(default)]
    pub selection: SelectionMetric,
    #[serde(default)]
    pub normalize_features: bool,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            beta: 30.0,
            gamma: 1.0,
            temperature: 10.0,
            epochs: 30,
            batch_size: 128,
            lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            clip_norm: 1.0,
            seed: 0,
            counterfactual: Counterfactual::Off,
            selection: SelectionMetric::IdValTop1,
            normalize_features: false,
        }
    }

    /// The optimisation constants used for the large-scale runs.
    pub fn paper_constants() -> Self {
        Self {
            epochs: 10,
            batch_size: 512,
            lr: 3e-5,
            warmup_steps: 500,
            ..Self::desk()
        }
    }

    /// Reduced budget that fits a single CPU core.
    pub fn compact() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            warmup_steps: 20,
            normalize_features: true,
            ..Self::desk()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            temperature: self.temperature,
            normalize_features: self.normalize_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return fail(format!(
                "beta and gamma must be >= 0 (got {}, {})",
                self.beta, self.gamma
            ));
        }
        if !(self.temperature > 0.0) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr and clip_norm must be positive, weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if let Counterfactual::Masked(s) = &self.counterfactual {
            s.validate()?;
            if s.refill != Refill::None && self.batch_size < 2 {
                return fail("refilling needs batch_size >= 2".into());
            }
        }
        Ok(())
    }
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

/// Per-step scalars before clipping and the update.
struct StepOutput {
    terms: LossTerms,
    grads: ParamSet<f32>,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    model: &crate::model::ModelConfig,
    params: &ParamSet<f32>,
    teacher: Option<&ParamSet<f32>>,
    ensemble: Option<&ParamSet<f32>>,
    images: &[&PatchImage],
    labels: &[usize],
    step: usize,
) -> Result<StepOutput> {
    let mut g = Graph::<f32>::new();
    let sb = Bindings::trainable(&mut g, params)?;
    let x = g.input(batch_tensor(images)?)?;
    let fwd = build_forward(&mut g, model, &sb, x)?;
    let cf = match &cfg.counterfactual {
        Counterfactual::Off => CfInput::None,
        Counterfactual::Identity => CfInput::SameAsX,
        Counterfactual::Masked(strategy) => {
            let maps = if strategy.needs_relevance() {
                let targets: Vec<usize> = match strategy.target {
                    RelevanceTarget::Label => labels.to_vec(),
                    RelevanceTarget::Predicted => g
                        .value(fwd.logits)
                        .data()
                        .chunks(model.num_classes)
                        .map(argmax)
                        .collect(),
                };
                let raw = batch_scores(&g, fwd.logits, &fwd.attention, &targets, model.num_heads)?;
                let checksum = param_checksum(params);
                Some(
                    raw.iter()
                        .zip(targets)
                        .map(|(r, t)| RelevanceMap {
                            scores: normalize(r),
                            target_class: t,
                            model_checksum: checksum.clone(),
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let seed = rng::derive_seed(cfg.seed, &[CF_STREAM, step as u64]);
            let batch = build_counterfactuals(images, maps.as_deref(), strategy, seed)?;
            let refs: Vec<&PatchImage> = batch.images.iter().collect();
            CfInput::Images(batch_tensor(&refs)?)
        }
    };
    let nodes = append_objective(
        &mut g,
        model,
        &sb,
        x,
        &fwd,
        labels,
        cf,
        teacher,
        ensemble,
        &cfg.weights(),
    )?;
    let grads = g.backward(nodes.total)?;
    Ok(StepOutput {
        terms: nodes.read(&g),
        grads: g.param_grads(&grads),
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Graph(source @ GraphError::NonFinite { .. }) => Error::Diverged { step, source },
        other => other,
    }
}

/// Fine-tunes `init` and returns the epoch checkpoint with the best
/// validation accuracy (earliest on ties) together with the log.
///
/// `teacher` is required whenever a distillation term is active;
/// `ensemble`, when given, adds the softened KL term weighted by `gamma`.
/// Neither is modified.
pub fn fine_tune(
    cfg: &TrainConfig,
    data: &TrainData,
    teacher: Option<&ModelParams>,
    init: &ModelParams,
    ensemble: Option<&ModelParams>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    init.validate()?;
    for (what, other) in [("teacher", teacher), ("ensemble", ensemble)] {
        if let Some(o) = other {
            if o.config != init.config {
                return Err(Error::Incompatible(format!(
                    "{what} config differs from the student"
                )));
            }
        }
    }
    if cfg.counterfactual != Counterfactual::Off && teacher.is_none() {
        return Err(Error::Config("feature distillation needs a teacher".into()));
    }
    if cfg.epochs == 0 {
        return Ok((init.clone(), TrainLog::default()));
    }
    let n = data.train.len();
    let steps_per_epoch = n / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "training split of {n} samples is smaller than one batch of {}",
            cfg.batch_size
        )));
    }
    let schedule = Schedule {
        base: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.epochs * steps_per_epoch,
    };
    let model = &init.config;
    let mut params = init.tensors.clone();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let teacher_t = teacher.map(|t| &t.tensors);
    let ensemble_t = ensemble.map(|e| &e.tensors);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[ORDER_STREAM, epoch as u64]));
        for b in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + b;
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let images: Vec<&PatchImage> =
                idx.iter().map(|&i| &data.train.samples[i].image).collect();
            let labels: Vec<usize> = idx
                .iter()
                .map(|&i| data.train.samples[i].semantics)
                .collect();
            let StepOutput { terms, mut grads } = train_step(
                cfg, model, &params, teacher_t, ensemble_t, &images, &labels, step,
            )
            .map_err(|e| diverged(step, e))?;
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    source: GraphError::NonFinite {
                        op: "grad_norm",
                        node: 0,
                        phase: crate::autodiff::Phase::Backward,
                    },
                });
            }
            let lr = schedule.lr(step);
            opt.update(&mut params, &grads, lr);
            log.steps.push(StepRecord {
                step,
                epoch,
                ce: terms.ce,
                mse: terms.mse,
                kd: terms.kd,
                total: terms.total,
                lr,
                grad_norm,
            });
        }
        let current = ModelParams::from_tensors(model, params.clone()).map_err(|e| match e {
            Error::Incompatible(_) => Error::Diverged {
                step: (epoch + 1) * steps_per_epoch - 1,
                source: GraphError::NonFinite {
                    op: "update",
                    node: 0,
                    phase: crate::autodiff::Phase::Backward,
                },
            },
            other => other,
        })?;
        let val_accuracy = accuracy(&current, data.val)?;
        log.epochs.push(EpochRecord {
            epoch,
            val_accuracy,
            checksum: current.checksum(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, params.clone()));
            log.selected_epoch = Some(epoch);
        }
    }
    let (_, tensors) = best.expect("at least one epoch ran");
    Ok((ModelParams::from_tensors(model, tensors)?, log))
}
