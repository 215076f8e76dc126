//! Patch-attention classifier shared by the teacher, the fine-tuned student
//! and every weight-space ensemble.
//!
//! Layout: linear patch embedding, a learned class token prepended to the
//! patch sequence, learned position embeddings, pre-norm attention/MLP blocks,
//! a final layer norm on the class token (the image feature), and a linear
//! head producing class logits.

mod checkpoint;
mod pretrain;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Bindings, Graph, GraphError, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::rng;
use crate::scm::{batch_tensor, PatchImage};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use pretrain::{pretrain_teacher, TeacherReport, TeacherRoutine};

/// Images per forward chunk when predicting without gradients.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_patches: usize,
    /// Pixels per patch (patch side squared).
    pub patch_len: usize,
    pub num_classes: usize,
    pub mlp_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            num_patches: 64,
            patch_len: 16,
            num_classes: 8,
            mlp_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_patches", self.num_patches),
            ("patch_len", self.patch_len),
            ("num_classes", self.num_classes),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches + 1
    }

    /// Every parameter name with its shape, in sorted order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, h) = (self.embed_dim, self.mlp_dim);
        let mut shapes = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        put("patch_embed.weight".into(), vec![self.patch_len, d]);
        put("patch_embed.bias".into(), vec![d]);
        put("cls_token".into(), vec![d]);
        put("pos_embed".into(), vec![self.tokens(), d]);
        for l in 0..self.num_layers {
            let p = format!("blocks.{l}");
            for norm in ["ln1", "ln2"] {
                put(format!("{p}.{norm}.gain"), vec![d]);
                put(format!("{p}.{norm}.bias"), vec![d]);
            }
            for proj in ["q", "k", "v", "out"] {
                put(format!("{p}.attn.{proj}.weight"), vec![d, d]);
                put(format!("{p}.attn.{proj}.bias"), vec![d]);
            }
            put(format!("{p}.mlp.fc1.weight"), vec![d, h]);
            put(format!("{p}.mlp.fc1.bias"), vec![h]);
            put(format!("{p}.mlp.fc2.weight"), vec![h, d]);
            put(format!("{p}.mlp.fc2.bias"), vec![d]);
        }
        put("final_norm.gain".into(), vec![d]);
        put("final_norm.bias".into(), vec![d]);
        put("head.weight".into(), vec![d, self.num_classes]);
        put("head.bias".into(), vec![self.num_classes]);
        shapes
    }
}

/// Named parameter arrays for one model. Names and shapes are fixed by the
/// config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ParamSet<f32>,
}

impl ModelParams {
    /// Xavier-uniform matrices, zero biases, unit norm gains and small
    /// uniform token/position embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x1417]);
        let mut tensors = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else if shape.len() == 2 && name.ends_with(".weight") {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt() as f32;
                (0..n).map(|_| r.gen_range(-limit..=limit)).collect()
            } else {
                (0..n).map(|_| r.gen_range(-0.02f32..=0.02)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: ParamSet<f32>) -> Result<Self> {
        let params = Self {
            config: config.clone(),
            tensors,
        };
        params.validate()?;
        Ok(params)
    }

    /// Names, shapes and finiteness agree with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter arrays, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` is not finite"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        param_checksum(&self.tensors)
    }
}

/// Checksum of a bare parameter set; see [`ModelParams::checksum`].
pub fn param_checksum(tensors: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Node handles produced by [`build_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, embed]` normalized class-token embedding.
    pub features: NodeId,
    /// `[batch, classes]`
    pub logits: NodeId,
    /// Per layer, `[batch * heads, tokens, tokens]` attention probabilities.
    pub attention: Vec<NodeId>,
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    x: NodeId,
    name: &str,
) -> Result<NodeId, GraphError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn split_heads<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    batch: usize,
    cfg: &ModelConfig,
) -> Result<NodeId, GraphError> {
    let (n, h, dh) = (cfg.tokens(), cfg.num_heads, cfg.head_dim());
    let x = g.reshape(x, &[batch, n, h, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * h, n, dh])
}

/// Builds the forward pass for `images` (`[batch, patches, patch_len]`).
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bindings,
    images: NodeId,
) -> Result<ForwardOutput, GraphError> {
    let shape = g.shape(images).to_vec();
    if shape.len() != 3 || shape[1] != cfg.num_patches || shape[2] != cfg.patch_len {
        return Err(GraphError::Shape {
            op: "model_input",
            node: images.index(),
            detail: format!(
                "images {shape:?}, model expects [_, {}, {}]",
                cfg.num_patches, cfg.patch_len
            ),
        });
    }
    let batch = shape[0];
    let (n, d) = (cfg.tokens(), cfg.embed_dim);

    let flat = g.reshape(images, &[batch * cfg.num_patches, cfg.patch_len])?;
    let emb = linear(g, p, flat, "patch_embed")?;
    let emb = g.reshape(emb, &[batch, cfg.num_patches, d])?;
    let tokens = g.prepend_row(emb, p.get("cls_token")?)?;
    let mut x = g.add_bias(tokens, p.get("pos_embed")?)?;

    let scale = T::from_f64_lossy(1.0 / (cfg.head_dim() as f64).sqrt());
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let pre = format!("blocks.{l}");
        let h = g.layer_norm(
            x,
            p.get(&format!("{pre}.ln1.gain"))?,
            p.get(&format!("{pre}.ln1.bias"))?,
        )?;
        let h = g.reshape(h, &[batch * n, d])?;
        let q = linear(g, p, h, &format!("{pre}.attn.q"))?;
        let k = linear(g, p, h, &format!("{pre}.attn.k"))?;
        let v = linear(g, p, h, &format!("{pre}.attn.v"))?;
        let (q, k, v) = (
            split_heads(g, q, batch, cfg)?,
            split_heads(g, k, batch, cfg)?,
            split_heads(g, v, batch, cfg)?,
        );
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores)?;
        attention.push(attn);
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, cfg.num_heads, n, cfg.head_dim()])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * n, d])?;
        let out = linear(g, p, ctx, &format!("{pre}.attn.out"))?;
        let out = g.reshape(out, &[batch, n, d])?;
        x = g.add(x, out)?;

        let h = g.layer_norm(
            x,
            p.get(&format!("{pre}.ln2.gain"))?,
            p.get(&format!("{pre}.ln2.bias"))?,
        )?;
        let h = g.reshape(h, &[batch * n, d])?;
        let h = linear(g, p, h, &format!("{pre}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = linear(g, p, h, &format!("{pre}.mlp.fc2"))?;
        let h = g.reshape(h, &[batch, n, d])?;
        x = g.add(x, h)?;
    }

    let cls = g.select_row(x, 0)?;
    let features = g.layer_norm(cls, p.get("final_norm.gain")?, p.get("final_norm.bias")?)?;
    let logits = linear(g, p, features, "head")?;
    Ok(ForwardOutput {
        features,
        logits,
        attention,
    })
}

fn check_image(cfg: &ModelConfig, image: &PatchImage) -> Result<()> {
    if image.num_patches() != cfg.num_patches || image.patch_len() != cfg.patch_len {
        return Err(Error::Config(format!(
            "image grid of {} patches x {} pixels does not match the model ({} x {})",
            image.num_patches(),
            image.patch_len(),
            cfg.num_patches,
            cfg.patch_len
        )));
    }
    Ok(())
}

/// Feature vector of one image plus the attention maps of every layer
/// (`[heads, tokens, tokens]` per layer).
pub fn forward_features(
    params: &ModelParams,
    image: &PatchImage,
) -> Result<(Vec<f32>, Vec<Tensor<f32>>)> {
    check_image(&params.config, image)?;
    let cfg = &params.config;
    let mut g = Graph::<f32>::new();
    let p = Bindings::frozen(&mut g, &params.tensors)?;
    let x = g.input(batch_tensor(&[image])?)?;
    let out = build_forward(&mut g, cfg, &p, x)?;
    let attn = out
        .attention
        .iter()
        .map(|&a| {
            g.value(a)
                .clone()
                .reshape(&[cfg.num_heads, cfg.tokens(), cfg.tokens()])
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((g.value(out.features).data().to_vec(), attn))
}

pub fn forward_logits(params: &ModelParams, image: &PatchImage) -> Result<Vec<f32>> {
    Ok(predict_logits(params, &[image])?.remove(0))
}

/// Logits for many images, evaluated in fixed-size chunks.
pub fn predict_logits(params: &ModelParams, images: &[&PatchImage]) -> Result<Vec<Vec<f32>>> {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        for img in chunk {
            check_image(cfg, img)?;
        }
        let mut g = Graph::<f32>::new();
        let p = Bindings::frozen(&mut g, &params.tensors)?;
        let x = g.input(batch_tensor(chunk)?)?;
        let fwd = build_forward(&mut g, cfg, &p, x)?;
        out.extend(
            g.value(fwd.logits)
                .data()
                .chunks(cfg.num_classes)
                .map(|r| r.to_vec()),
        );
    }
    Ok(out)
}

/// Feature vectors for many images.
pub fn predict_features(params: &ModelParams, images: &[&PatchImage]) -> Result<Vec<Vec<f32>>> {
    let cfg = &params.config;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut g = Graph::<f32>::new();
        let p = Bindings::frozen(&mut g, &params.tensors)?;
        let x = g.input(batch_tensor(chunk)?)?;
        let fwd = build_forward(&mut g, cfg, &p, x)?;
        out.extend(
            g.value(fwd.features)
                .data()
                .chunks(cfg.embed_dim)
                .map(|r| r.to_vec()),
        );
    }
    Ok(out)
}
