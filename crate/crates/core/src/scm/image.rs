use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Square grayscale image stored patch-major: patch `p` occupies
/// `data[p * patch_len .. (p + 1) * patch_len]`, row-major inside the patch,
/// patches in row-major grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchImage {
    patch_side: usize,
    grid: usize,
    data: Vec<f32>,
}

impl PatchImage {
    pub fn zeros(image_side: usize, patch_side: usize) -> Result<Self> {
        Self::from_pixels(image_side, patch_side, &vec![0.0; image_side * image_side])
    }

    /// Builds from a row-major `side x side` pixel array.
    pub fn from_pixels(side: usize, patch_side: usize, pixels: &[f32]) -> Result<Self> {
        if patch_side == 0 || side == 0 || !side.is_multiple_of(patch_side) {
            return Err(Error::Config(format!(
                "image side {side} is not a positive multiple of patch side {patch_side}"
            )));
        }
        if pixels.len() != side * side {
            return Err(Error::Config(format!(
                "expected {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        let grid = side / patch_side;
        let mut data = Vec::with_capacity(pixels.len());
        for gr in 0..grid {
            for gc in 0..grid {
                for r in 0..patch_side {
                    let row = gr * patch_side + r;
                    let start = row * side + gc * patch_side;
                    data.extend_from_slice(&pixels[start..start + patch_side]);
                }
            }
        }
        Ok(Self {
            patch_side,
            grid,
            data,
        })
    }

    pub fn to_pixels(&self) -> Vec<f32> {
        let side = self.side();
        let mut pixels = vec![0.0; side * side];
        for (p, patch) in self.data.chunks(self.patch_len()).enumerate() {
            let (gr, gc) = (p / self.grid, p % self.grid);
            for r in 0..self.patch_side {
                let start = (gr * self.patch_side + r) * side + gc * self.patch_side;
                pixels[start..start + self.patch_side]
                    .copy_from_slice(&patch[r * self.patch_side..(r + 1) * self.patch_side]);
            }
        }
        pixels
    }

    pub fn side(&self) -> usize {
        self.grid * self.patch_side
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn patch_mut(&mut self, index: usize) -> &mut [f32] {
        let n = self.patch_len();
        &mut self.data[index * n..(index + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn same_layout(&self, other: &PatchImage) -> bool {
        self.patch_side == other.patch_side && self.grid == other.grid
    }
}

/// Stacks images into a `[batch, patches, patch_len]` model input.
pub fn batch_tensor<T: Scalar>(images: &[&PatchImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if !img.same_layout(first) {
            return Err(Error::Config("images in a batch differ in layout".into()));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(
        vec![images.len(), first.num_patches(), first.patch_len()],
        data,
    )?)
}

/// Boolean per-pixel mask over a square image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    side: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(side: usize) -> Self {
        Self {
            side,
            bits: vec![false; side * side],
        }
    }

    pub fn from_bits(side: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != side * side {
            return Err(Error::Config(format!(
                "mask of side {side} needs {} bits, got {}",
                side * side,
                bits.len()
            )));
        }
        Ok(Self { side, bits })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.side + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &PixelMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &PixelMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Fraction of each patch's pixels that are set, in patch order.
    pub fn patch_coverage(&self, patch_side: usize) -> Vec<f64> {
        let grid = self.side / patch_side;
        let mut out = Vec::with_capacity(grid * grid);
        for gr in 0..grid {
            for gc in 0..grid {
                let mut set = 0usize;
                for r in 0..patch_side {
                    for c in 0..patch_side {
                        set += self.get(gr * patch_side + r, gc * patch_side + c) as usize;
                    }
                }
                out.push(set as f64 / (patch_side * patch_side) as f64);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_layout_of_small_image() {
        // 4x4 image, patch side 2: patch 1 is the top-right block
        let pixels: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = PatchImage::from_pixels(4, 2, &pixels).unwrap();
        assert_eq!(img.num_patches(), 4);
        assert_eq!(img.patch(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(img.patch(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn indivisible_side_rejected() {
        assert!(PatchImage::zeros(10, 4).is_err());
    }

    proptest! {
        #[test]
        fn pixel_round_trip(grid in 1usize..5, patch in 1usize..5, seed in any::<u64>()) {
            let side = grid * patch;
            let pixels: Vec<f32> = (0..side * side)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 7.0)
                .collect();
            let img = PatchImage::from_pixels(side, patch, &pixels).unwrap();
            prop_assert_eq!(img.num_patches(), grid * grid);
            prop_assert_eq!(img.to_pixels(), pixels);
        }
    }
}
