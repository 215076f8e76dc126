//! Accuracy under class-subset restriction, mask-quality ratios and
//! weight-space ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_logits, ModelParams};
use crate::scm::{Dataset, PatchImage, PixelMask, Split};
use crate::tensor::Tensor;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax restricted to `subset` (sorted ascending, so ties go to the lowest
/// class index).
pub fn subset_argmax(logits: &[f32], subset: &[usize]) -> usize {
    let mut best = subset[0];
    for &c in &subset[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

fn check_subset(subset: &[usize], classes: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::Config("class subset is empty".into()));
    }
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&c) = s.iter().find(|&&c| c >= classes) {
        return Err(Error::Config(format!(
            "class {c} out of range for {classes} classes"
        )));
    }
    Ok(s)
}

/// Fraction of samples whose label equals the subset-restricted argmax.
pub fn top1_subset_accuracy(params: &ModelParams, ds: &Dataset, subset: &[usize]) -> Result<f64> {
    let subset = check_subset(subset, params.config.num_classes)?;
    if let Some(s) = ds
        .samples
        .iter()
        .find(|s| subset.binary_search(&s.semantics).is_err())
    {
        return Err(Error::Config(format!(
            "label {} is outside the evaluated class subset",
            s.semantics
        )));
    }
    if ds.is_empty() {
        return Err(Error::Config(format!("split {} is empty", ds.split)));
    }
    let images: Vec<&PatchImage> = ds.samples.iter().map(|s| &s.image).collect();
    let logits = predict_logits(params, &images)?;
    let correct = logits
        .iter()
        .zip(&ds.samples)
        .filter(|(l, s)| subset_argmax(l, &subset) == s.semantics)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

pub fn accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..params.config.num_classes).collect();
    top1_subset_accuracy(params, ds, &all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub split: Split,
    pub n: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub checksum: String,
    pub splits: Vec<SplitAccuracy>,
    /// Unweighted mean over the out-of-distribution splits.
    pub ood_avg: f64,
}

impl EvalReport {
    pub fn accuracy(&self, split: Split) -> Option<f64> {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .map(|s| s.top1)
    }

    /// Mean over the in-distribution test splits.
    pub fn id_accuracy(&self) -> f64 {
        mean(
            self.splits
                .iter()
                .filter(|s| s.split == Split::IdTest)
                .map(|s| s.top1),
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn is_ood(split: Split) -> bool {
    split == Split::OodTest
}

pub fn evaluate(params: &ModelParams, model_id: &str, datasets: &[&Dataset]) -> Result<EvalReport> {
    let splits = datasets
        .iter()
        .map(|ds| {
            Ok(SplitAccuracy {
                split: ds.split,
                n: ds.len(),
                top1: accuracy(params, ds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ood_avg = mean(splits.iter().filter(|s| is_ood(s.split)).map(|s| s.top1));
    Ok(EvalReport {
        model_id: model_id.to_string(),
        checksum: params.checksum(),
        splits,
        ood_avg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub image_mr: f64,
    pub object_mr: f64,
    pub iou: f64,
}

/// Image masking rate `n(cam)/n(I)`, object masking rate
/// `n(cam & seg)/n(seg)` and `IoU = n(cam & seg)/n(cam | seg)`.
pub fn mask_metrics(cam: &PixelMask, seg: &PixelMask) -> Result<MaskMetrics> {
    if cam.side() != seg.side() {
        return Err(Error::Config(format!(
            "mask sides differ: {} vs {}",
            cam.side(),
            seg.side()
        )));
    }
    let n_seg = seg.count();
    if n_seg == 0 {
        return Err(Error::Config("ground-truth mask is empty".into()));
    }
    let inter = cam.intersection_count(seg) as f64;
    Ok(MaskMetrics {
        image_mr: cam.count() as f64 / (cam.side() * cam.side()) as f64,
        object_mr: inter / n_seg as f64,
        iou: inter / cam.union_count(seg) as f64,
    })
}

/// Union of the pixel blocks of the given patches.
pub fn patch_mask_to_pixels(
    indices: &[usize],
    side: usize,
    patch_side: usize,
) -> Result<PixelMask> {
    if patch_side == 0 || !side.is_multiple_of(patch_side) {
        return Err(Error::Config(format!(
            "side {side} not divisible by patch {patch_side}"
        )));
    }
    let grid = side / patch_side;
    let mut mask = PixelMask::empty(side);
    for &i in indices {
        if i >= grid * grid {
            return Err(Error::Config(format!("patch {i} out of range")));
        }
        let (gr, gc) = (i / grid, i % grid);
        for r in 0..patch_side {
            for c in 0..patch_side {
                mask.set(gr * patch_side + r, gc * patch_side + c, true);
            }
        }
    }
    Ok(mask)
}

/// `(1 - alpha) * theta0 + alpha * theta1` for every array, evaluated in f64.
pub fn wise_ensemble(
    theta0: &ModelParams,
    theta1: &ModelParams,
    alpha: f64,
) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if theta0.config != theta1.config {
        return Err(Error::Incompatible(
            "ensemble endpoints have different configs".into(),
        ));
    }
    let mut tensors = theta0.tensors.clone();
    for (name, t) in tensors.iter_mut() {
        let other = theta1
            .tensors
            .get(name)
            .filter(|o| o.shape() == t.shape())
            .ok_or_else(|| Error::Incompatible(format!("parameter `{name}` differs in shape")))?;
        let data: Vec<f32> = t
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| ((1.0 - alpha) * a as f64 + alpha * b as f64) as f32)
            .collect();
        *t = Tensor::new(t.shape().to_vec(), data)?;
    }
    ModelParams::from_tensors(&theta0.config, tensors)
}

/// `i / (points - 1)` for `i` in `0..points`.
pub fn alpha_grid(points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..points)
            .map(|i| i as f64 / (points - 1) as f64)
            .collect(),
    }
}

pub const DEFAULT_GRID_POINTS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub report: EvalReport,
}

/// One report per `alpha`, in grid order.
pub fn wise_curve(
    theta0: &ModelParams,
    theta1: &ModelParams,
    alphas: &[f64],
    datasets: &[&Dataset],
) -> Result<Vec<CurvePoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let model = wise_ensemble(theta0, theta1, alpha)?;
            Ok(CurvePoint {
                alpha,
                report: evaluate(&model, &format!("wise-{alpha}"), datasets)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scm::ScmSpec;
    use proptest::prelude::*;

    #[test]
    fn subset_restriction() {
        assert_eq!(subset_argmax(&[0.1, 0.9, 0.5], &[0, 2]), 2);
        assert_eq!(argmax(&[0.1, 0.9, 0.5]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(subset_argmax(&[0.0, 0.7, 0.7], &[1, 2]), 1);
    }

    #[test]
    fn mask_arithmetic() {
        let mut cam = PixelMask::empty(8);
        let mut seg = PixelMask::empty(8);
        for i in 0..16 {
            cam.set(i / 8, i % 8, true);
            seg.set(1 + i / 8, i % 8, true);
        }
        let m = mask_metrics(&cam, &seg).unwrap();
        assert_eq!(m.image_mr, 0.25);
        assert_eq!(m.object_mr, 0.5);
        assert!((m.iou - 8.0 / 24.0).abs() < 1e-15);

        let same = mask_metrics(&seg, &seg).unwrap();
        assert_eq!((same.object_mr, same.iou), (1.0, 1.0));
        let empty = mask_metrics(&PixelMask::empty(8), &seg).unwrap();
        assert_eq!(
            (empty.image_mr, empty.object_mr, empty.iou),
            (0.0, 0.0, 0.0)
        );
        assert!(mask_metrics(&seg, &PixelMask::empty(8)).is_err());
    }

    #[test]
    fn patch_to_pixels() {
        assert_eq!(patch_mask_to_pixels(&[0], 32, 4).unwrap().count(), 16);
        let all: Vec<usize> = (0..64).collect();
        assert_eq!(patch_mask_to_pixels(&all, 32, 4).unwrap().count(), 1024);
        assert!(patch_mask_to_pixels(&[64], 32, 4).is_err());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            num_patches: 16,
            patch_len: 16,
            num_classes: 4,
            mlp_dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ensemble_endpoints_and_midpoint() {
        let a = ModelParams::init(&tiny(), 1).unwrap();
        let b = ModelParams::init(&tiny(), 2).unwrap();
        assert_eq!(wise_ensemble(&a, &b, 0.0).unwrap(), a);
        assert_eq!(wise_ensemble(&a, &b, 1.0).unwrap(), b);
        assert_eq!(wise_ensemble(&a, &a, 0.37).unwrap(), a);

        let mut x = ModelParams::zeros(&tiny()).unwrap();
        let mut y = x.clone();
        x.tensors.insert(
            "head.bias".into(),
            Tensor::from_vec(vec![0.0, 2.0, 0.0, 0.0]),
        );
        y.tensors.insert(
            "head.bias".into(),
            Tensor::from_vec(vec![2.0, 4.0, 0.0, 0.0]),
        );
        let mid = wise_ensemble(&x, &y, 0.5).unwrap();
        assert_eq!(mid.tensors["head.bias"].data(), &[1.0, 3.0, 0.0, 0.0]);
        assert!(wise_ensemble(&x, &y, 1.5).is_err());
    }

    #[test]
    fn grid_order() {
        let g = alpha_grid(11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(alpha_grid(DEFAULT_GRID_POINTS)[10], 0.5);
    }

    #[test]
    fn report_average_and_endpoints() {
        let spec = ScmSpec {
            num_classes: 4,
            num_domains: 4,
            image_side: 16,
            ..ScmSpec::default()
        };
        let id = Dataset::generate(&spec, Split::IdTest, 40, 1).unwrap();
        let ood = Dataset::generate(&spec, Split::OodTest, 40, 1).unwrap();
        let a = ModelParams::init(&tiny(), 1).unwrap();
        let b = ModelParams::init(&tiny(), 2).unwrap();
        let curve = wise_curve(&a, &b, &[0.0, 1.0], &[&id, &ood]).unwrap();
        let ra = evaluate(&a, "a", &[&id, &ood]).unwrap();
        assert_eq!(curve[0].report.splits, ra.splits);
        assert_eq!(
            curve[0].report.ood_avg,
            ra.accuracy(Split::OodTest).unwrap()
        );
        assert!(top1_subset_accuracy(&a, &id, &[]).is_err());
        assert!(top1_subset_accuracy(&a, &id, &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_monotone_maps(v in prop::collection::vec(-3.0f32..3.0, 2..10)) {
            let subset: Vec<usize> = (0..v.len()).collect();
            let mapped: Vec<f32> = v.iter().map(|x| 2.0 * x + 1.0).collect();
            prop_assert_eq!(subset_argmax(&v, &subset), subset_argmax(&mapped, &subset));
        }

        #[test]
        fn object_rate_bounds_iou(
            cam in prop::collection::vec(any::<bool>(), 64),
            seg in prop::collection::vec(any::<bool>(), 64),
        ) {
            let seg_mask = PixelMask::from_bits(8, seg.clone()).unwrap();
            prop_assume!(seg_mask.count() > 0);
            let cam_mask = PixelMask::from_bits(8, cam).unwrap();
            let m = mask_metrics(&cam_mask, &seg_mask).unwrap();
            prop_assert!(m.object_mr >= m.iou);
            for v in [m.image_mr, m.object_mr, m.iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn ensemble_is_affine(alpha in 0.0f64..1.0, a in -5.0f32..5.0, b in -5.0f32..5.0) {
            let mut x = ModelParams::zeros(&tiny()).unwrap();
            let mut y = x.clone();
            x.tensors.get_mut("head.bias").unwrap().data_mut()[0] = a;
            y.tensors.get_mut("head.bias").unwrap().data_mut()[0] = b;
            let got = wise_ensemble(&x, &y, alpha).unwrap().tensors["head.bias"].data()[0];
            let expected = (1.0 - alpha) * a as f64 + alpha * b as f64;
            prop_assert!((got as f64 - expected).abs() <= 1e-6 * (1.0 + expected.abs()));
        }
    }
}
