//! Patch relevance from gradient-weighted attention rollout, and threshold
//! partitions of the patch grid.
//!
//! Per layer `l` the head-averaged map `mean_h (dA_h)+ * A_h` is added to the
//! identity and row-normalised; the layer maps are chained
//! `R = A'_L ... A'_1` and the class-token row of `R` over the patch tokens is
//! the raw score. Scores are min-max normalised per image.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardMode, Bindings, Graph, GraphError, NodeId};
use crate::error::{Error, Result};
use crate::model::{build_forward, ModelParams};
use crate::scm::{batch_tensor, PatchImage};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub scores: Vec<f64>,
    pub target_class: usize,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPartition {
    pub object: BTreeSet<usize>,
    pub context: BTreeSet<usize>,
}

/// Min-max normalisation to `[0, 1]`; all-equal input maps to 0.5.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; raw.len()];
    }
    raw.iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Raw rollout scores for one image.
///
/// `attention[l]` and `grads[l]` are `[heads, tokens, tokens]` row-major
/// slices for layer `l`; token 0 is the class token. Returns `tokens - 1`
/// patch scores.
pub fn rollout(attention: &[&[f64]], grads: &[&[f64]], heads: usize, tokens: usize) -> Vec<f64> {
    let n = tokens;
    let mut r = identity(n);
    for (a, g) in attention.iter().zip(grads) {
        debug_assert_eq!(a.len(), heads * n * n);
        let mut layer = vec![0.0; n * n];
        for h in 0..heads {
            let off = h * n * n;
            for (dst, (&av, &gv)) in layer
                .iter_mut()
                .zip(a[off..off + n * n].iter().zip(&g[off..off + n * n]))
            {
                *dst += gv.max(0.0) * av;
            }
        }
        for i in 0..n {
            let row = &mut layer[i * n..(i + 1) * n];
            for v in row.iter_mut() {
                *v /= heads as f64;
            }
            row[i] += 1.0;
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        r = matmul_square(&layer, &r, n);
    }
    r[1..n].to_vec()
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Reads per-image rollout scores from a graph that already holds a forward
/// pass over a batch. `logits` is `[batch, classes]`, `attention` the
/// per-layer `[batch * heads, tokens, tokens]` nodes. Parameters must be
/// bound as trainable (frozen bindings carry no gradient path).
pub fn batch_scores<T: Scalar>(
    g: &Graph<T>,
    logits: NodeId,
    attention: &[NodeId],
    targets: &[usize],
    heads: usize,
) -> Result<Vec<Vec<f64>>, GraphError> {
    let shape = g.shape(logits).to_vec();
    let (batch, classes) = (shape[0], shape[1]);
    if targets.len() != batch {
        return Err(GraphError::Shape {
            op: "relevance",
            node: logits.index(),
            detail: format!("{} targets for batch {batch}", targets.len()),
        });
    }
    let mut seed = Tensor::zeros(&shape);
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(GraphError::Label { label: t, classes });
        }
        seed.data_mut()[b * classes + t] = T::one();
    }
    let grads = g.backward_with_seed(logits, seed, BackwardMode::ActivationsOnly)?;
    let tokens = g.shape(attention[0])[1];
    let per = heads * tokens * tokens;
    let as_f64 = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.as_f64()).collect() };
    let layers: Vec<(Vec<f64>, Vec<f64>)> = attention
        .iter()
        .map(|&a| {
            let grad = grads
                .get(a)
                .map(as_f64)
                .unwrap_or_else(|| vec![0.0; g.value(a).len()]);
            (as_f64(g.value(a)), grad)
        })
        .collect();
    Ok((0..batch)
        .map(|b| {
            let a: Vec<&[f64]> = layers
                .iter()
                .map(|(a, _)| &a[b * per..(b + 1) * per])
                .collect();
            let d: Vec<&[f64]> = layers
                .iter()
                .map(|(_, d)| &d[b * per..(b + 1) * per])
                .collect();
            rollout(&a, &d, heads, tokens)
        })
        .collect())
}

/// Relevance of every patch of `image` toward `target_class`.
pub fn relevance_map(
    params: &ModelParams,
    image: &PatchImage,
    target_class: usize,
) -> Result<RelevanceMap> {
    Ok(relevance_maps(params, &[image], &[target_class])?.remove(0))
}

/// Batched [`relevance_map`]; one graph for the whole batch.
pub fn relevance_maps(
    params: &ModelParams,
    images: &[&PatchImage],
    targets: &[usize],
) -> Result<Vec<RelevanceMap>> {
    let cfg = &params.config;
    if images.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} images but {} target classes",
            images.len(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cfg.num_classes) {
        return Err(Error::Config(format!(
            "target class {t} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let checksum = params.checksum();
    let mut out = Vec::with_capacity(images.len());
    for (imgs, tgts) in images.chunks(256).zip(targets.chunks(256)) {
        let mut g = Graph::<f32>::new();
        let p = Bindings::trainable(&mut g, &params.tensors)?;
        let x = g.input(batch_tensor(imgs)?)?;
        let fwd = build_forward(&mut g, cfg, &p, x)?;
        let raw = batch_scores(&g, fwd.logits, &fwd.attention, tgts, cfg.num_heads)?;
        out.extend(raw.into_iter().zip(tgts).map(|(r, &t)| RelevanceMap {
            scores: normalize(&r),
            target_class: t,
            model_checksum: checksum.clone(),
        }));
    }
    Ok(out)
}

/// Object = `{i : score_i >= t}`, context = the rest.
pub fn threshold_partition(map: &RelevanceMap, t: f64) -> PatchPartition {
    let (object, context): (Vec<usize>, Vec<usize>) =
        (0..map.scores.len()).partition(|&i| map.scores[i] >= t);
    PatchPartition {
        object: object.into_iter().collect(),
        context: context.into_iter().collect(),
    }
}

/// JSON array of per-sample score vectors.
pub fn dump_json(maps: &[RelevanceMap]) -> Result<String> {
    Ok(serde_json::to_string_pretty(maps)?)
}

/// Plain-text grayscale image (PGM, P2) with one `cell`-pixel block per patch.
pub fn to_pgm(map: &RelevanceMap, grid: usize, cell: usize) -> String {
    let side = grid * cell;
    let mut s = format!("P2\n{side} {side}\n255\n");
    for r in 0..side {
        let row: Vec<String> = (0..side)
            .map(|c| {
                let v = map.scores[(r / cell) * grid + c / cell];
                ((v * 255.0).round() as u8).to_string()
            })
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}
