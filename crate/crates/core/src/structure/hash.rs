//! Average hash of image patches.
//!
//! The patch's bounding box is cropped, pixels outside the patch are filled
//! with the patch mean, the crop is area-resampled to 8×8 and each cell
//! becomes one bit: set iff the cell is strictly brighter than the median of
//! the 64 cells. Bit 63 is the top-left cell, bit 0 the bottom-right.
//!
//! A constant patch hashes to `0`.

use ndarray::{Array2, ArrayView2};

use super::slic::PatchSet;
use crate::error::{invalid, Result};

const SIDE: usize = 8;

/// One 64-bit code per patch, in patch-label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchHashes {
    pub codes: Vec<u64>,
}

impl PatchHashes {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Overlap weights of a uniform `src → dst` area resampling along one axis.
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

fn hash_crop(crop: &Array2<f64>) -> u64 {
    let (h, w) = crop.dim();
    let ys = area_taps(h, SIDE);
    let xs = area_taps(w, SIDE);
    let mut cells = [0.0f64; SIDE * SIDE];
    for (oy, ty) in ys.iter().enumerate() {
        for (ox, tx) in xs.iter().enumerate() {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for &(y, wy) in ty {
                for &(x, wx) in tx {
                    acc += wy * wx * crop[[y, x]];
                    norm += wy * wx;
                }
            }
            cells[oy * SIDE + ox] = acc / norm;
        }
    }
    let mut sorted = cells;
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[31] + sorted[32]);
    cells
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > median)
        .fold(0u64, |code, (i, _)| code | (1u64 << (63 - i)))
}

fn masked_crop(
    intensity: &ArrayView2<f64>,
    inside: impl Fn(usize, usize) -> bool,
) -> Result<Array2<f64>> {
    let (h, w) = intensity.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
                sum += intensity[[y, x]];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(invalid("cannot hash an empty patch"));
    }
    let mean = sum / n as f64;
    Ok(Array2::from_shape_fn(
        (y1 - y0 + 1, x1 - x0 + 1),
        |(dy, dx)| {
            let (y, x) = (y0 + dy, x0 + dx);
            if inside(y, x) {
                intensity[[y, x]]
            } else {
                mean
            }
        },
    ))
}

/// Hash of the pixels selected by `mask`.
pub fn patch_hash(intensity: ArrayView2<f64>, mask: ArrayView2<bool>) -> Result<u64> {
    if intensity.dim() != mask.dim() {
        return Err(invalid("mask and image differ in size"));
    }
    let crop = masked_crop(&intensity, |y, x| mask[[y, x]])?;
    Ok(hash_crop(&crop))
}

/// Hashes every patch of `patches`.
pub fn hash_patches(intensity: ArrayView2<f64>, patches: &PatchSet) -> Result<PatchHashes> {
    if intensity.dim() != patches.label_map.dim() {
        return Err(invalid("label map and image differ in size"));
    }
    let codes = (0..patches.count)
        .map(|l| {
            masked_crop(&intensity, |y, x| patches.label_map[[y, x]] == l).map(|c| hash_crop(&c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchHashes { codes })
}
