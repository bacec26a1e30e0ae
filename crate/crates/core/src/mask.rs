//! Pixel-level cross-modal masking and its template-fill variant.
//!
//! Repeatedly replaces axis-aligned r³ cubes of the input with co-located
//! content from a fill volume until the exact union of covered voxels reaches
//! the requested fraction. Cube centers come from a SplitMix64 stream seeded
//! by the caller (one `below(dim)` draw per axis in d, h, w order), so a
//! reimplementation in any language can reproduce the occupancy field.
//! Cubes are centered on the sampled voxel (start = center - r/2) and are
//! clipped at the volume border rather than rejected.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volume::Volume;

/// Where the replacement voxels came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillSource {
    /// Another modality of the same study.
    OtherModality,
    /// The learnable modality template.
    Template,
}

/// A masked volume plus its exact occupancy bookkeeping.
#[derive(Clone, Debug)]
pub struct MaskResult {
    pub masked: Volume,
    /// True where the voxel was replaced by fill content.
    pub occupancy: Vec<bool>,
    pub fill_source: FillSource,
    /// Exactly `covered / total` voxels.
    pub masked_fraction: f64,
}

impl MaskResult {
    pub fn covered(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }
}

fn mask_with(
    x: &Volume,
    fill: &Volume,
    r: usize,
    p_star: f64,
    rng_seed: u64,
    fill_source: FillSource,
) -> Result<MaskResult> {
    let dims = x.dims();
    if fill.dims() != dims {
        return Err(Error::Shape(format!(
            "fill dims {} != input dims {}",
            fill.dims(),
            dims
        )));
    }
    if r == 0 || r > dims.min_dim() {
        return Err(Error::Param(format!(
            "cube edge r={r} must satisfy 1 <= r <= min(dims)={}",
            dims.min_dim()
        )));
    }
    if !(0.0..=1.0).contains(&p_star) {
        return Err(Error::Param(format!("p_star={p_star} outside [0,1]")));
    }

    let total = dims.voxels();
    let threshold = p_star * total as f64;
    let mut rng = SplitMix64::new(rng_seed);
    let mut masked = x.clone();
    let mut occupancy = vec![false; total];
    let mut covered = 0usize;
    let half = (r / 2) as i64;

    while (covered as f64) < threshold {
        let cd = rng.below(dims.d) as i64;
        let ch = rng.below(dims.h) as i64;
        let cw = rng.below(dims.w) as i64;
        let (d0, d1) = clip(cd - half, r, dims.d);
        let (h0, h1) = clip(ch - half, r, dims.h);
        let (w0, w1) = clip(cw - half, r, dims.w);
        for d in d0..d1 {
            for h in h0..h1 {
                let row = dims.index(d, h, 0);
                for idx in row + w0..row + w1 {
                    if !occupancy[idx] {
                        occupancy[idx] = true;
                        covered += 1;
                        masked.data_mut()[idx] = fill.data()[idx];
                    }
                }
            }
        }
    }

    Ok(MaskResult {
        masked,
        occupancy,
        fill_source,
        masked_fraction: covered as f64 / total as f64,
    })
}

#[inline]
fn clip(start: i64, r: usize, dim: usize) -> (usize, usize) {
    let end = (start + r as i64).clamp(0, dim as i64) as usize;
    let start = start.clamp(0, dim as i64) as usize;
    (start, end)
}

/// Mask `x` with co-located cubes from another modality of the same study.
pub fn cross_modal_mask(
    x: &Volume,
    fill: &Volume,
    r: usize,
    p_star: f64,
    rng_seed: u64,
) -> Result<MaskResult> {
    mask_with(x, fill, r, p_star, rng_seed, FillSource::OtherModality)
}

/// Mask `x` with cubes read from the modality template at identical
/// within-crop coordinates.
pub fn distill_mask(
    x: &Volume,
    template: &Volume,
    r: usize,
    p_star: f64,
    rng_seed: u64,
) -> Result<MaskResult> {
    mask_with(x, template, r, p_star, rng_seed, FillSource::Template)
}
