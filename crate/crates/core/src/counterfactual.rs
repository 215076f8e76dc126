//! Masked-and-refilled counterfactual images.
//!
//! A strategy picks patches to mask (uniformly at random, or by thresholding
//! a relevance map) and then fills them with zeros, with the patches at the
//! same grid positions of one donor image, or with an independent donor per
//! position. Donors are drawn from the same batch and never equal the anchor.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::relevance::{relevance_maps, threshold_partition, RelevanceMap};
use crate::rng;
use crate::scm::{io, Dataset, PatchImage, SampleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Masking {
    Random {
        rate: f64,
    },
    /// Mask patches scoring below the threshold.
    Context {
        threshold: f64,
    },
    /// Mask patches scoring at or above the threshold.
    Object {
        threshold: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refill {
    None,
    Single,
    Multi,
}

/// Which class the relevance map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceTarget {
    #[default]
    Label,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub masking: Masking,
    pub refill: Refill,
    #[serde(default)]
    pub target: RelevanceTarget,
}

impl StrategyConfig {
    pub fn new(masking: Masking, refill: Refill) -> Self {
        Self {
            masking,
            refill,
            target: RelevanceTarget::Label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.masking {
            Masking::Random { rate } if !(rate > 0.0 && rate < 1.0) => Err(Error::Config(format!(
                "masking rate must lie in (0, 1), got {rate}"
            ))),
            Masking::Context { threshold } | Masking::Object { threshold }
                if !(0.0..=1.0).contains(&threshold) =>
            {
                Err(Error::Config(format!(
                    "threshold must lie in [0, 1], got {threshold}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_relevance(&self) -> bool {
        !matches!(self.masking, Masking::Random { .. })
    }

    /// Short label such as `object-0.5/single`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, v) = match self.masking {
            Masking::Random { rate } => ("random", rate),
            Masking::Context { threshold } => ("context", threshold),
            Masking::Object { threshold } => ("object", threshold),
        };
        let refill = match self.refill {
            Refill::None => "none",
            Refill::Single => "single",
            Refill::Multi => "multi",
        };
        write!(f, "{name}-{v}/{refill}")
    }
}

/// Masked indices of one image and, for refilling strategies, the donor of
/// each masked patch (aligned with `masked`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub masked: Vec<usize>,
    pub donors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualBatch {
    pub images: Vec<PatchImage>,
    pub provenance: Vec<Provenance>,
}

/// `round(rate * patches)` with halves rounded up.
pub fn masked_count(rate: f64, patches: usize) -> usize {
    ((rate * patches as f64 + 0.5).floor() as usize).min(patches)
}

pub fn select_mask(
    image: &PatchImage,
    masking: &Masking,
    relevance: Option<&RelevanceMap>,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<usize>> {
    let p = image.num_patches();
    match (masking, relevance) {
        (Masking::Random { rate }, None) => Ok(index::sample(rng, p, masked_count(*rate, p))
            .into_iter()
            .collect()),
        (Masking::Random { .. }, Some(_)) => Err(Error::Config(
            "random masking takes no relevance map".into(),
        )),
        (Masking::Context { threshold } | Masking::Object { threshold }, Some(map)) => {
            if map.scores.len() != p {
                return Err(Error::Config(format!(
                    "relevance map has {} scores for {p} patches",
                    map.scores.len()
                )));
            }
            let part = threshold_partition(map, *threshold);
            Ok(match masking {
                Masking::Object { .. } => part.object,
                _ => part.context,
            })
        }
        (_, None) => Err(Error::Config(
            "context and object masking need a relevance map".into(),
        )),
    }
}

fn draw_donor(anchor: usize, batch: usize, rng: &mut ChaCha8Rng) -> usize {
    let d = rng.gen_range(0..batch - 1);
    if d >= anchor {
        d + 1
    } else {
        d
    }
}

/// Fills the masked patches of `batch[anchor]`.
pub fn refill(
    anchor: usize,
    masked: &BTreeSet<usize>,
    batch: &[&PatchImage],
    strategy: Refill,
    rng: &mut ChaCha8Rng,
) -> Result<(PatchImage, Provenance)> {
    if anchor >= batch.len() {
        return Err(Error::Config(format!(
            "anchor {anchor} outside batch of {}",
            batch.len()
        )));
    }
    if strategy != Refill::None && batch.len() < 2 {
        return Err(Error::Config(format!(
            "refilling needs a batch of at least 2 images, got {}",
            batch.len()
        )));
    }
    let src = batch[anchor];
    if let Some(&i) = masked.iter().find(|&&i| i >= src.num_patches()) {
        return Err(Error::Config(format!("patch index {i} out of range")));
    }
    let mut out = src.clone();
    let mut donors = Vec::new();
    match strategy {
        Refill::None => {
            for &i in masked {
                out.patch_mut(i).fill(0.0);
            }
        }
        Refill::Single => {
            if !masked.is_empty() {
                let d = draw_donor(anchor, batch.len(), rng);
                for &i in masked {
                    out.patch_mut(i).copy_from_slice(batch[d].patch(i));
                    donors.push(d);
                }
            }
        }
        Refill::Multi => {
            for &i in masked {
                let d = draw_donor(anchor, batch.len(), rng);
                out.patch_mut(i).copy_from_slice(batch[d].patch(i));
                donors.push(d);
            }
        }
    }
    Ok((
        out,
        Provenance {
            masked: masked.iter().copied().collect(),
            donors,
        },
    ))
}

/// Builds one counterfactual per image. `relevance` must be given exactly
/// when the strategy thresholds relevance. Image `i` draws from the stream
/// `(seed, i)`.
pub fn build_counterfactuals(
    images: &[&PatchImage],
    relevance: Option<&[RelevanceMap]>,
    strategy: &StrategyConfig,
    seed: u64,
) -> Result<CounterfactualBatch> {
    strategy.validate()?;
    if let Some(r) = relevance {
        if r.len() != images.len() {
            return Err(Error::Config(format!(
                "{} relevance maps for {} images",
                r.len(),
                images.len()
            )));
        }
    }
    let parts: Vec<(PatchImage, Provenance)> = (0..images.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[i as u64]);
            let masked = select_mask(
                images[i],
                &strategy.masking,
                relevance.map(|m| &m[i]),
                &mut r,
            )?;
            refill(i, &masked, images, strategy.refill, &mut r)
        })
        .collect::<Result<_>>()?;
    let (images, provenance) = parts.into_iter().unzip();
    Ok(CounterfactualBatch { images, provenance })
}

/// Relevance (from `params`, when the strategy needs it), masking and
/// refilling for one batch.
pub fn make_counterfactual_batch(
    images: &[&PatchImage],
    labels: &[usize],
    params: &ModelParams,
    strategy: &StrategyConfig,
    seed: u64,
) -> Result<CounterfactualBatch> {
    if images.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if !strategy.needs_relevance() {
        return build_counterfactuals(images, None, strategy, seed);
    }
    let targets = match strategy.target {
        RelevanceTarget::Label => labels.to_vec(),
        RelevanceTarget::Predicted => crate::model::predict_logits(params, images)?
            .iter()
            .map(|l| crate::eval::argmax(l))
            .collect(),
    };
    let maps = relevance_maps(params, images, &targets)?;
    build_counterfactuals(images, Some(&maps), strategy, seed)
}

/// Writes the counterfactual images as a dataset file (labels and masks
/// copied from `sources`) and the provenance as a JSON sidecar next to it.
pub fn dump_batch(
    template: &Dataset,
    sources: &[&SampleRecord],
    batch: &CounterfactualBatch,
    path: &Path,
) -> Result<()> {
    if sources.len() != batch.images.len() {
        return Err(Error::Config(
            "source records and batch differ in length".into(),
        ));
    }
    let samples = sources
        .iter()
        .zip(&batch.images)
        .map(|(s, img)| SampleRecord {
            image: img.clone(),
            ..(*s).clone()
        })
        .collect();
    let ds = Dataset {
        spec: template.spec.clone(),
        split: template.split,
        seed: template.seed,
        samples,
    };
    io::save(&ds, path)?;
    let sidecar = path.with_extension("provenance.json");
    let json = serde_json::to_string_pretty(&batch.provenance)?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}
