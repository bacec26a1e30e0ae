//! Core volumetric data types: single-channel 3D scalar fields, patient-level
//! studies grouping co-registered modalities, and the modality registry.
//!
//! Volumes are immutable after construction and safe to share across threads;
//! every operation returns a new `Volume`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel-count dimensions of a volume, (depth, height, width).
/// Data is row-major with width fastest: `idx = (d*H + h)*W + w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Self { d: n, h: n, w: n }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn min_dim(&self) -> usize {
        self.d.min(self.h).min(self.w)
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        debug_assert!(d < self.d && h < self.h && w < self.w);
        (d * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// One single-channel 3D scalar field (one modality of one study).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims3,
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume, checking the length and finiteness invariants.
    pub fn new(dims: Dims3, data: Vec<f32>) -> Result<Self> {
        if dims.d == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::Param(format!("zero dimension in {dims}")));
        }
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims} ({} voxels)",
                data.len(),
                dims.voxels()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {pos} in volume data")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims3) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.voxels()],
        }
    }

    pub fn filled(dims: Dims3, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.voxels()])
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.dims.index(d, h, w)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Build from 64-bit values, narrowing to the 32-bit storage type.
    pub fn from_f64(dims: Dims3, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    /// Internal constructor for ops that have already upheld the invariants.
    pub(crate) fn from_parts_unchecked(dims: Dims3, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.voxels());
        Self { dims, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Nearest-rank percentile over an ascending-sorted slice: the value at rank
/// `ceil(p*n)` (1-based), clamped to the first element for p = 0.
pub(crate) fn nearest_rank(sorted: &[f32], p: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Clip to the [lo_pct, hi_pct] nearest-rank percentiles and rescale to [0,1].
///
/// Values at or below the low percentile map to 0, at or above the high
/// percentile to 1, linear in between. A degenerate input whose two
/// percentiles coincide (e.g. a constant volume) yields an all-zeros volume.
pub fn normalize_percentile(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..=1.0).contains(&lo_pct) || !(0.0..=1.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::Param(format!(
            "percentile bounds must satisfy 0 <= lo < hi <= 1, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut sorted = v.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("volume data is finite"));
    let p_lo = nearest_rank(&sorted, lo_pct) as f64;
    let p_hi = nearest_rank(&sorted, hi_pct) as f64;
    if p_lo == p_hi {
        return Ok(Volume::zeros(v.dims()));
    }
    let scale = 1.0 / (p_hi - p_lo);
    let data = v
        .data()
        .iter()
        .map(|&x| (((x as f64 - p_lo) * scale).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok(Volume::from_parts_unchecked(v.dims(), data))
}

/// Extract the axis-aligned sub-volume at `origin` with shape `size`.
pub fn crop(v: &Volume, origin: Dims3, size: Dims3) -> Result<Volume> {
    let dims = v.dims();
    if size.d == 0 || size.h == 0 || size.w == 0 {
        return Err(Error::Param(format!("zero crop size {size}")));
    }
    if origin.d + size.d > dims.d || origin.h + size.h > dims.h || origin.w + size.w > dims.w {
        return Err(Error::Param(format!(
            "crop origin {origin} + size {size} exceeds volume dims {dims}"
        )));
    }
    let mut data = Vec::with_capacity(size.voxels());
    for d in 0..size.d {
        for h in 0..size.h {
            let src = dims.index(origin.d + d, origin.h + h, origin.w);
            data.extend_from_slice(&v.data()[src..src + size.w]);
        }
    }
    Ok(Volume::from_parts_unchecked(size, data))
}

/// Global registry of modality names; modality ids are indices into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityRegistry {
    names: Vec<String>,
}

/// The eight modality names used by the default registry.
pub const DEFAULT_MODALITIES: [&str; 8] =
    ["t1", "t1ce", "t2", "flair", "dwi", "adc", "mra", "pd"];

impl ModalityRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "modality registry needs at least 2 names, got {}",
                names.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::Config(format!("duplicate modality name {a:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn with_default_names(count: usize) -> Result<Self> {
        if count > DEFAULT_MODALITIES.len() {
            return Err(Error::Config(format!(
                "default registry supports up to {} modalities, got {count}",
                DEFAULT_MODALITIES.len()
            )));
        }
        Self::new(
            DEFAULT_MODALITIES[..count]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A patient-level group of co-registered volumes, one per modality, with
/// optional labels for downstream tasks.
#[derive(Clone, Debug)]
pub struct Study {
    pub study_id: String,
    modalities: Vec<(usize, Volume)>,
    pub seg_label: Option<Volume>,
    pub cls_label: Option<u32>,
}

impl Study {
    pub fn new(
        study_id: String,
        modalities: Vec<(usize, Volume)>,
        seg_label: Option<Volume>,
        cls_label: Option<u32>,
    ) -> Result<Self> {
        let Some((_, first)) = modalities.first() else {
            return Err(Error::Param(format!("study {study_id:?} has no modalities")));
        };
        let dims = first.dims();
        for (id, v) in &modalities {
            if v.dims() != dims {
                return Err(Error::Shape(format!(
                    "study {study_id:?}: modality {id} dims {} != {dims}",
                    v.dims()
                )));
            }
        }
        for (i, (id, _)) in modalities.iter().enumerate() {
            if modalities[..i].iter().any(|(j, _)| j == id) {
                return Err(Error::Param(format!(
                    "study {study_id:?}: duplicate modality id {id}"
                )));
            }
        }
        if let Some(seg) = &seg_label {
            if seg.dims() != dims {
                return Err(Error::Shape(format!(
                    "study {study_id:?}: seg label dims {} != {dims}",
                    seg.dims()
                )));
            }
            if seg.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Param(format!(
                    "study {study_id:?}: seg label values outside {{0,1}}"
                )));
            }
        }
        Ok(Self {
            study_id,
            modalities,
            seg_label,
            cls_label,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.modalities[0].1.dims()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Modalities in insertion order as (registry id, volume) pairs.
    pub fn modalities(&self) -> &[(usize, Volume)] {
        &self.modalities
    }

    pub fn volume(&self, modality_id: usize) -> Option<&Volume> {
        self.modalities
            .iter()
            .find(|(id, _)| *id == modality_id)
            .map(|(_, v)| v)
    }
}
