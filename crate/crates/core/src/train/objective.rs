//! Training objectives.
//!
//! `L = CE(g(f(x)), y) + beta * MSE(f_t(x_cf), f(x_cf)) [+ gamma * KL_T]`
//! where `f_t` is the frozen teacher encoder and the optional KL term
//! distills temperature-softened logits of a frozen weight-space ensemble on
//! `x` into the student.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::model::{build_forward, ForwardOutput, ModelConfig, ModelParams};
use crate::scm::{batch_tensor, PatchImage};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Compare centred, unit-norm feature vectors instead of raw features.
    pub normalize_features: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 30.0,
            gamma: 1.0,
            temperature: 10.0,
            normalize_features: false,
        }
    }
}

/// Where the distillation images come from.
pub enum CfInput<T> {
    /// No distillation term.
    None,
    /// `x_cf = x`; the student's forward on `x` is reused.
    SameAsX,
    /// A separate `[batch, patches, patch_len]` tensor.
    Images(Tensor<T>),
}

/// Nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub mse: Option<NodeId>,
    pub kd: Option<NodeId>,
}

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub mse: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> LossTerms {
        let get = |id: Option<NodeId>| id.map_or(0.0, |n| g.value(n).item().as_f64());
        LossTerms {
            ce: get(Some(self.ce)),
            mse: get(self.mse),
            kd: get(self.kd),
            total: get(Some(self.total)),
        }
    }
}

/// Centres each row and scales it to unit L2 norm.
fn unit_rows<T: Scalar>(g: &mut Graph<T>, x: NodeId, dim: usize) -> Result<NodeId> {
    let gain = g.input(Tensor::full(
        &[dim],
        T::from_f64_lossy(1.0 / (dim as f64).sqrt()),
    ))?;
    let bias = g.input(Tensor::zeros(&[dim]))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Appends the objective to a graph that already holds the student forward
/// `student_x` on `x` with `labels`. Teacher and ensemble are bound frozen.
#[allow(clippy::too_many_arguments)]
pub fn append_objective<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    student: &Bindings,
    x: NodeId,
    student_x: &ForwardOutput,
    labels: &[usize],
    cf: CfInput<T>,
    teacher: Option<&ParamSet<T>>,
    ensemble: Option<&ParamSet<T>>,
    w: &LossWeights,
) -> Result<LossNodes> {
    let ce = g.cross_entropy(student_x.logits, labels)?;
    let mut total = ce;

    let student_cf = match cf {
        CfInput::None => None,
        CfInput::SameAsX => Some((x, student_x.features)),
        CfInput::Images(t) => {
            let xcf = g.input(t)?;
            let fwd = build_forward(g, cfg, student, xcf)?;
            Some((xcf, fwd.features))
        }
    };
    let mut mse = None;
    if let Some((xcf, f_student)) = student_cf {
        let teacher =
            teacher.ok_or_else(|| Error::Config("distillation needs a teacher".into()))?;
        let tb = Bindings::frozen(g, teacher)?;
        let f_teacher = build_forward(g, cfg, &tb, xcf)?.features;
        let (a, b) = if w.normalize_features {
            (
                unit_rows(g, f_teacher, cfg.embed_dim)?,
                unit_rows(g, f_student, cfg.embed_dim)?,
            )
        } else {
            (f_teacher, f_student)
        };
        let m = g.mse(a, b)?;
        let weighted = g.scale(m, T::from_f64_lossy(w.beta))?;
        total = g.add(total, weighted)?;
        mse = Some(m);
    }

    let mut kd = None;
    if let Some(ens) = ensemble {
        let eb = Bindings::frozen(g, ens)?;
        let target = build_forward(g, cfg, &eb, x)?.logits;
        let k = g.kl_div(student_x.logits, target, T::from_f64_lossy(w.temperature))?;
        let weighted = g.scale(k, T::from_f64_lossy(w.gamma))?;
        total = g.add(total, weighted)?;
        kd = Some(k);
    }
    Ok(LossNodes { total, ce, mse, kd })
}

fn check_compatible(a: &ModelParams, b: &ModelParams, what: &str) -> Result<()> {
    if a.config != b.config {
        return Err(Error::Incompatible(format!(
            "{what} config differs from the student"
        )));
    }
    Ok(())
}

fn evaluate(
    student: &ModelParams,
    teacher: &ModelParams,
    ensemble: Option<&ModelParams>,
    x: &[&PatchImage],
    y: &[usize],
    x_cf: &[&PatchImage],
    w: &LossWeights,
) -> Result<(LossTerms, ParamSet<f32>)> {
    check_compatible(student, teacher, "teacher")?;
    if let Some(e) = ensemble {
        check_compatible(student, e, "ensemble")?;
    }
    if x.len() != x_cf.len() || x.len() != y.len() {
        return Err(Error::Config(
            "x, y and x_cf must have the same length".into(),
        ));
    }
    let cfg = &student.config;
    let mut g = Graph::<f32>::new();
    let sb = Bindings::trainable(&mut g, &student.tensors)?;
    let xn = g.input(batch_tensor(x)?)?;
    let fwd = build_forward(&mut g, cfg, &sb, xn)?;
    let ens = ensemble.map(|e| e.tensors.clone());
    let nodes = append_objective(
        &mut g,
        cfg,
        &sb,
        xn,
        &fwd,
        y,
        CfInput::Images(batch_tensor(x_cf)?),
        Some(&teacher.tensors),
        ens.as_ref(),
        w,
    )?;
    let grads = g.backward(nodes.total)?;
    Ok((nodes.read(&g), g.param_grads(&grads)))
}

/// Cross-entropy on `x` plus `beta` times the teacher feature match on
/// `x_cf`; gradients for the student only.
pub fn objective(
    student: &ModelParams,
    teacher: &ModelParams,
    x: &[&PatchImage],
    y: &[usize],
    x_cf: &[&PatchImage],
    beta: f64,
) -> Result<(LossTerms, ParamSet<f32>)> {
    let w = LossWeights {
        beta,
        ..LossWeights::default()
    };
    evaluate(student, teacher, None, x, y, x_cf, &w)
}

/// [`objective`] plus `gamma` times the softened KL to a frozen ensemble.
#[allow(clippy::too_many_arguments)]
pub fn objective_wise_kd(
    student: &ModelParams,
    teacher: &ModelParams,
    ensemble: &ModelParams,
    x: &[&PatchImage],
    y: &[usize],
    x_cf: &[&PatchImage],
    beta: f64,
    gamma: f64,
    temperature: f64,
) -> Result<(LossTerms, ParamSet<f32>)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let w = LossWeights {
        beta,
        gamma,
        temperature,
        normalize_features: false,
    };
    evaluate(student, teacher, Some(ensemble), x, y, x_cf, &w)
}

/// Cross-entropy alone, as a reference for the vanishing-term identities.
pub fn cross_entropy_only(
    student: &ModelParams,
    x: &[&PatchImage],
    y: &[usize],
) -> Result<(f64, ParamSet<f32>)> {
    let mut g = Graph::<f32>::new();
    let sb = Bindings::trainable(&mut g, &student.tensors)?;
    let xn = g.input(batch_tensor(x)?)?;
    let fwd = build_forward(&mut g, &student.config, &sb, xn)?;
    let ce = g.cross_entropy(fwd.logits, y)?;
    let grads = g.backward(ce)?;
    Ok((g.value(ce).item().as_f64(), g.param_grads(&grads)))
}
