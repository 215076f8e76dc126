//! Synthetic image benchmark generated from a structural causal model.
//!
//! A confounder couples the semantic class `S` with the domain `D` in the
//! in-distribution splits: with probability `correlation` the domain is
//! `S mod M`, otherwise it is drawn uniformly. Out-of-distribution and
//! teacher-corpus splits draw `D` independently of `S`. `S` is rendered as a
//! glyph (`H_s`) and `D` as a textured background (`H_d`); every exogenous
//! draw is kept on the sample so the image can be re-rendered under an
//! intervention on `D`.

mod image;
pub mod io;
pub mod render;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use image::{batch_tensor, PatchImage, PixelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    /// Probability that an in-distribution sample takes the confounded domain.
    pub correlation: f64,
    pub image_side: usize,
    pub patch_side: usize,
    /// Half-width of the uniform per-pixel render noise.
    pub noise: f32,
    /// Probability of dropping each glyph pixel on a normal sample.
    pub stroke_dropout: f64,
    /// Share of samples whose glyph is drawn faint and sparse.
    pub hard_fraction: f64,
    pub hard_ink: f32,
    pub hard_dropout: f64,
}

impl Default for ScmSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_domains: 8,
            correlation: 0.95,
            image_side: 32,
            patch_side: 4,
            noise: 0.1,
            stroke_dropout: 0.1,
            hard_fraction: 0.2,
            hard_ink: 0.7,
            hard_dropout: 0.45,
        }
    }
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > render::MAX_CLASSES {
            return fail(format!(
                "num_classes must be in 2..={}, got {}",
                render::MAX_CLASSES,
                self.num_classes
            ));
        }
        if self.num_domains < 2 {
            return fail(format!(
                "num_domains must be >= 2, got {}",
                self.num_domains
            ));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return fail(format!(
                "correlation must lie in [0, 1], got {}",
                self.correlation
            ));
        }
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return fail(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            ));
        }
        if render::glyph_side(self) >= self.image_side {
            return fail(format!(
                "image side {} leaves no room for the glyph",
                self.image_side
            ));
        }
        for (name, p) in [
            ("stroke_dropout", self.stroke_dropout),
            ("hard_fraction", self.hard_fraction),
            ("hard_dropout", self.hard_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(self.hard_ink > render::background_ceiling()) {
            return fail(format!(
                "hard_ink {} must exceed the brightest background value {}",
                self.hard_ink,
                render::background_ceiling()
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Domain assigned by the confounded mechanism.
    pub fn confounded_domain(&self, semantics: usize) -> usize {
        semantics % self.num_domains
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    IdTrain,
    IdVal,
    IdTest,
    OodTest,
    /// Teacher pre-training corpus (domain independent of class).
    Diverse,
    /// Held-out slice of the teacher corpus distribution.
    DiverseVal,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::IdTrain,
        Split::IdVal,
        Split::IdTest,
        Split::OodTest,
        Split::Diverse,
        Split::DiverseVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::IdTrain => "id-train",
            Split::IdVal => "id-val",
            Split::IdTest => "id-test",
            Split::OodTest => "ood-test",
            Split::Diverse => "diverse",
            Split::DiverseVal => "diverse-val",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Whether `D` follows the confounded assignment.
    pub fn is_confounded(self) -> bool {
        matches!(self, Split::IdTrain | Split::IdVal | Split::IdTest)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Recorded exogenous valuation `u` of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exogenous {
    /// Top-left pixel of the glyph box (pose of H_s).
    pub glyph_row: u16,
    pub glyph_col: u16,
    /// Faint, sparse glyph.
    pub hard: bool,
    /// Seeds the per-pixel stroke dropout.
    pub stroke_seed: u64,
    /// Offset of the background stripes (U_{H_d}).
    pub texture_phase: u32,
    /// Seeds the render noise (U_X).
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub semantics: usize,
    pub domain: usize,
    pub exogenous: Exogenous,
    pub image: PatchImage,
    pub object_mask: PixelMask,
}

/// One generated split with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: ScmSpec,
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn generate(spec: &ScmSpec, split: Split, n: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            split,
            seed,
            samples: generate_split(spec, split, n, seed)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.semantics).collect()
    }
}

fn sample_one(spec: &ScmSpec, split: Split, index: usize, seed: u64) -> SampleRecord {
    let mut r = rng::stream(seed, &[split.tag(), index as u64]);
    let semantics = index % spec.num_classes;
    let domain = if split.is_confounded() && r.gen::<f64>() < spec.correlation {
        spec.confounded_domain(semantics)
    } else {
        r.gen_range(0..spec.num_domains)
    };
    let max_offset = (spec.image_side - render::glyph_side(spec)) as u16;
    let exogenous = Exogenous {
        glyph_row: r.gen_range(0..=max_offset),
        glyph_col: r.gen_range(0..=max_offset),
        hard: r.gen::<f64>() < spec.hard_fraction,
        stroke_seed: r.gen(),
        texture_phase: r.gen_range(0..64),
        noise_seed: r.gen(),
    };
    let (pixels, object_mask) = render::render(spec, semantics, domain, &exogenous);
    let image = PatchImage::from_pixels(spec.image_side, spec.patch_side, &pixels)
        .expect("validated spec yields a patchable image");
    SampleRecord {
        semantics,
        domain,
        exogenous,
        image,
        object_mask,
    }
}

/// Draws `n` samples. Classes cycle so every class count is within one of
/// `n / K`; each sample's randomness depends only on `(seed, split, index)`.
pub fn generate_split(
    spec: &ScmSpec,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config(format!("split {split} needs n > 0")));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| sample_one(spec, split, i, seed))
        .collect())
}

/// Re-renders `sample` under the intervention `do(D = new_domain)`, keeping
/// its exogenous valuation.
pub fn regenerate_counterfactual(
    spec: &ScmSpec,
    sample: &SampleRecord,
    new_domain: usize,
) -> Result<PatchImage> {
    if new_domain >= spec.num_domains {
        return Err(Error::Config(format!(
            "domain {new_domain} out of range for {} domains",
            spec.num_domains
        )));
    }
    let (pixels, _) = render::render(spec, sample.semantics, new_domain, &sample.exogenous);
    PatchImage::from_pixels(spec.image_side, spec.patch_side, &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScmSpec {
        ScmSpec {
            num_classes: 4,
            num_domains: 4,
            image_side: 16,
            ..ScmSpec::default()
        }
    }

    #[test]
    fn full_correlation_follows_confounder() {
        let spec = ScmSpec {
            correlation: 1.0,
            ..small()
        };
        for s in generate_split(&spec, Split::IdTrain, 200, 3).unwrap() {
            assert_eq!(s.domain, s.semantics % spec.num_domains);
        }
    }

    #[test]
    fn classes_are_balanced() {
        let spec = small();
        let samples = generate_split(&spec, Split::OodTest, 103, 1).unwrap();
        let mut counts = vec![0usize; spec.num_classes];
        for s in &samples {
            counts[s.semantics] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn mask_is_proper_subset() {
        let spec = small();
        for s in generate_split(&spec, Split::Diverse, 100, 9).unwrap() {
            let n = s.object_mask.count();
            assert!(n > 0 && n < spec.image_side * spec.image_side);
        }
    }

    #[test]
    fn null_intervention_is_identity() {
        let spec = small();
        let s = &generate_split(&spec, Split::IdTest, 5, 2).unwrap()[4];
        assert_eq!(
            regenerate_counterfactual(&spec, s, s.domain).unwrap(),
            s.image
        );
    }

    #[test]
    fn bad_domain_rejected() {
        let spec = small();
        let s = &generate_split(&spec, Split::IdTest, 1, 2).unwrap()[0];
        assert!(regenerate_counterfactual(&spec, s, 4).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            ScmSpec {
                num_classes: 1,
                ..small()
            },
            ScmSpec {
                num_domains: 1,
                ..small()
            },
            ScmSpec {
                patch_side: 3,
                ..small()
            },
            ScmSpec {
                correlation: 1.5,
                ..small()
            },
            ScmSpec {
                hard_ink: 0.3,
                ..small()
            },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
        }
        assert!(generate_split(&small(), Split::IdTrain, 0, 0).is_err());
    }

    #[test]
    fn split_names_round_trip() {
        for sp in Split::ALL {
            assert_eq!(sp.name().parse::<Split>().unwrap(), sp);
        }
    }
}
