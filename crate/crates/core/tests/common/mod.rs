#![allow(dead_code)]

use rand::Rng;

use cfft_core::autodiff::{finite_diff_grad, max_relative_error, value_and_grad};
use cfft_core::counterfactual::{build_counterfactuals, Masking, Refill, StrategyConfig};
use cfft_core::model::build_forward;
use cfft_core::relevance::relevance_maps;
use cfft_core::scm::batch_tensor;
use cfft_core::train::{append_objective, CfInput, LossWeights};
use cfft_core::{Bindings, Error, Graph, GraphError, NodeId};

use cfft_core::rng;
use cfft_core::{Dataset, ModelConfig, ModelParams, ParamSet, ScmSpec, Split, Tensor};

pub fn small_spec() -> ScmSpec {
    ScmSpec {
        num_classes: 4,
        num_domains: 4,
        image_side: 16,
        ..ScmSpec::default()
    }
}

pub fn model_config(spec: &ScmSpec, embed_dim: usize, num_layers: usize) -> ModelConfig {
    ModelConfig {
        embed_dim,
        num_layers,
        num_heads: 2,
        num_patches: spec.num_patches(),
        patch_len: spec.patch_len(),
        num_classes: spec.num_classes,
        mlp_dim: 2 * embed_dim,
    }
}

/// Initialised weights with every entry, biases and gains included,
/// jittered so no parameter sits at a special value.
pub fn jittered(cfg: &ModelConfig, seed: u64, scale: f32) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut r = rng::stream(seed, &[0x717]);
    for t in p.tensors.values_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
    p
}

/// `p` with every entry moved by up to `scale`.
pub fn perturbed(p: &ModelParams, seed: u64, scale: f32) -> ModelParams {
    let mut q = p.clone();
    let mut r = rng::stream(seed, &[0x9e7]);
    for t in q.tensors.values_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
    q
}

pub fn to_f64(p: &ModelParams) -> ParamSet<f64> {
    p.cast()
}

pub fn dataset(split: Split, n: usize, seed: u64) -> Dataset {
    Dataset::generate(&small_spec(), split, n, seed).unwrap()
}

fn graph_err(e: Error) -> GraphError {
    match e {
        Error::Graph(g) => g,
        other => panic!("objective failed: {other}"),
    }
}

/// Max relative error between analytic and central-difference gradients of
/// the complete objective (object masking, single fill, teacher features and
/// ensemble KD) on a 2-layer, 16-wide model.
pub fn objective_gradient_error(normalize_features: bool) -> f64 {
    let spec = small_spec();
    let cfg = model_config(&spec, 16, 2);
    let student = jittered(&cfg, 1, 0.05);
    // fine-tuning starts at the teacher, so the student stays near it
    let teacher = to_f64(&perturbed(&student, 2, 0.02));
    let ensemble = to_f64(&perturbed(&student, 3, 0.02));
    let data = dataset(Split::IdTrain, 4, 5);
    let images: Vec<_> = data.samples.iter().map(|s| &s.image).collect();
    let labels = data.labels();
    let maps = relevance_maps(&student, &images, &labels).unwrap();
    let strategy = StrategyConfig::new(Masking::Object { threshold: 0.5 }, Refill::Single);
    let cf = build_counterfactuals(&images, Some(&maps), &strategy, 9).unwrap();
    let cf_refs: Vec<_> = cf.images.iter().collect();
    let x: Tensor<f64> = batch_tensor(&images).unwrap();
    let x_cf: Tensor<f64> = batch_tensor(&cf_refs).unwrap();
    let w = LossWeights {
        beta: 30.0,
        gamma: 1.0,
        temperature: 10.0,
        normalize_features,
    };
    let comp = |g: &mut Graph<f64>, b: &Bindings| -> Result<NodeId, GraphError> {
        let xi = g.input(x.clone())?;
        let fwd = build_forward(g, &cfg, b, xi)?;
        let nodes = append_objective(
            g,
            &cfg,
            b,
            xi,
            &fwd,
            &labels,
            CfInput::Images(x_cf.clone()),
            Some(&teacher),
            Some(&ensemble),
            &w,
        )
        .map_err(graph_err)?;
        Ok(nodes.total)
    };
    let params: ParamSet<f64> = to_f64(&student);
    let (value, analytic) = value_and_grad(&comp, &params).unwrap();
    assert!(value.is_finite() && value > 0.0);
    let numeric = finite_diff_grad(&comp, &params, 1e-5).unwrap();
    // key-bias gradients are exactly zero; their quotients are roundoff
    max_relative_error(&analytic, &numeric, 1e-5)
}
