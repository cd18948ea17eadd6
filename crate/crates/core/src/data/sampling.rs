//! Random training patches with optional foreground forcing.
//!
//! Volumes smaller than the patch are treated as zero-padded symmetrically
//! (the extra voxel of an odd pad goes to the high side). Corners live in
//! padded coordinates, `[0, padded - patch]` per axis.

use rand::Rng;

use super::{unravel, Volume};
use crate::nn::{voxel_count, Dims, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    /// Patch origin in volume coordinates (negative inside the padding).
    pub corner: [isize; 3],
}

/// Caches the foreground voxel list of one volume.
#[derive(Debug, Clone)]
pub struct PatchSampler<'a> {
    volume: &'a Volume,
    image: Tensor<f32>,
    foreground: Vec<usize>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(volume: &'a Volume) -> Self {
        Self {
            volume,
            image: volume.image(),
            foreground: volume.foreground_indices(),
        }
    }

    pub fn volume(&self) -> &Volume {
        self.volume
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }

    fn padding(&self, patch: Dims) -> ([usize; 3], [usize; 3]) {
        let d = self.volume.dims;
        let padded: [usize; 3] = std::array::from_fn(|a| d[a].max(patch[a]));
        let lo = std::array::from_fn(|a| (padded[a] - d[a]) / 2);
        (padded, lo)
    }

    /// Draws a patch corner (padded coordinates).
    pub fn sample_corner<R: Rng + ?Sized>(&self, patch: Dims, force_foreground: bool, rng: &mut R) -> [usize; 3] {
        let (padded, pad_lo) = self.padding(patch);
        if force_foreground && self.has_foreground() {
            let v = unravel(
                self.foreground[rng.random_range(0..self.foreground.len())],
                self.volume.dims,
            );
            std::array::from_fn(|a| {
                let p = v[a] + pad_lo[a];
                let lo = (p + 1).saturating_sub(patch[a]);
                let hi = p.min(padded[a] - patch[a]);
                rng.random_range(lo..=hi)
            })
        } else {
            std::array::from_fn(|a| rng.random_range(0..=padded[a] - patch[a]))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, patch: Dims, force_foreground: bool, rng: &mut R) -> Patch {
        let c = self.sample_corner(patch, force_foreground, rng);
        self.extract(c, patch)
    }

    /// Cuts the patch whose padded-coordinate corner is `corner`.
    pub fn extract(&self, corner: [usize; 3], patch: Dims) -> Patch {
        let (_, pad_lo) = self.padding(patch);
        let corner: [isize; 3] = std::array::from_fn(|a| corner[a] as isize - pad_lo[a] as isize);
        let labels = match &self.volume.segmentation {
            Some(seg) => crop_labels(seg, self.volume.dims, corner, patch),
            None => vec![0; voxel_count(patch)],
        };
        Patch {
            image: self.image.crop(corner, patch),
            labels,
            corner,
        }
    }
}

/// Label analogue of [`Tensor::crop`]: out-of-range voxels are background.
pub fn crop_labels(seg: &[u8], dims: Dims, corner: [isize; 3], size: Dims) -> Vec<u8> {
    let mut out = vec![0u8; voxel_count(size)];
    for z in 0..size[2] {
        let sz = corner[2] + z as isize;
        if sz < 0 || sz >= dims[2] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = corner[1] + y as isize;
            if sy < 0 || sy >= dims[1] as isize {
                continue;
            }
            let x0 = corner[0].max(0);
            let x1 = (corner[0] + size[0] as isize).min(dims[0] as isize);
            if x1 <= x0 {
                continue;
            }
            let src = (sz as usize * dims[1] + sy as usize) * dims[0] + x0 as usize;
            let dst = (z * size[1] + y) * size[0] + (x0 - corner[0]) as usize;
            let n = (x1 - x0) as usize;
            out[dst..dst + n].copy_from_slice(&seg[src..src + n]);
        }
    }
    out
}

/// One-off convenience wrapper around [`PatchSampler`].
pub fn sample_patch<R: Rng + ?Sized>(volume: &Volume, patch: Dims, force_foreground: bool, rng: &mut R) -> Patch {
    PatchSampler::new(volume).sample(patch, force_foreground, rng)
}
