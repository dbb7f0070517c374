//! Per-view rectangular block masking and the masked/visible patch
//! partition that drives masked-embedding prediction.

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Identifies one patch: which view it belongs to and its cell in that
/// view's patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchKey {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

/// One rectangular block of masked patches in a single view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub view: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskSpec {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

/// The global masked set and its visible complement, both sorted by
/// (view, row, col).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPartition {
    pub masked: Vec<PatchKey>,
    pub visible: Vec<PatchKey>,
}

impl MaskPartition {
    /// Visible keys restricted to one view.
    pub fn visible_in_view(&self, view: usize) -> Vec<PatchKey> {
        self.visible.iter().copied().filter(|k| k.view == view).collect()
    }

    pub fn masked_in_view(&self, view: usize) -> Vec<PatchKey> {
        self.masked.iter().copied().filter(|k| k.view == view).collect()
    }
}

/// Sample one block mask: fraction ~ U(scale range) of the grid area,
/// aspect ~ U(aspect range), sides rounded then clamped to the grid,
/// placement uniform over valid top-left corners.
pub fn sample_block_mask(
    grid_h: usize,
    grid_w: usize,
    rng: &mut ChaCha8Rng,
    scale_range: (f64, f64),
    aspect_range: (f64, f64),
) -> Result<MaskSpec> {
    if grid_h * grid_w == 0 {
        return Err(Error::InvalidArgument("empty patch grid".into()));
    }
    for (lo, hi) in [scale_range, aspect_range] {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "invalid sampling range ({lo}, {hi})"
            )));
        }
    }
    let f = rng.gen_range(scale_range.0..=scale_range.1);
    let r = rng.gen_range(aspect_range.0..=aspect_range.1);
    let area = f * (grid_h * grid_w) as f64;
    let h = ((area * r).sqrt().round() as usize).clamp(1, grid_h);
    let w = ((area / r).sqrt().round() as usize).clamp(1, grid_w);
    let top = rng.gen_range(0..=(grid_h - h));
    let left = rng.gen_range(0..=(grid_w - w));
    Ok(MaskSpec {
        view: 0,
        top,
        left,
        height: h,
        width: w,
    })
}

/// Build the masked/visible partition from exactly one mask per view.
/// `grids[i]` is the (rows, cols) patch grid of view i; `masks[i]` must be
/// in bounds for it.
pub fn build_partition(
    grids: &[(usize, usize)],
    masks: &[MaskSpec],
) -> Result<MaskPartition> {
    if grids.len() != masks.len() {
        return Err(Error::InvalidMask(format!(
            "expected one mask per view: {} grids, {} masks",
            grids.len(),
            masks.len()
        )));
    }
    let mut masked = Vec::new();
    let mut visible = Vec::new();
    for (view, (&(gh, gw), mask)) in grids.iter().zip(masks.iter()).enumerate() {
        if mask.area() == 0
            || mask.top + mask.height > gh
            || mask.left + mask.width > gw
        {
            return Err(Error::InvalidMask(format!(
                "mask {mask:?} out of bounds for {gh}x{gw} grid in view {view}"
            )));
        }
        for row in 0..gh {
            for col in 0..gw {
                let key = PatchKey { view, row, col };
                if mask.contains(row, col) {
                    masked.push(key);
                } else {
                    visible.push(key);
                }
            }
        }
    }
    // Row-major per ascending view is already sorted by (view, row, col).
    debug_assert!(masked.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(visible.windows(2).all(|w| w[0] < w[1]));
    Ok(MaskPartition { masked, visible })
}
