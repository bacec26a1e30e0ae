//! Deterministic synthetic multi-modal study generator.
//!
//! Every study shares one latent anatomy field (a union of soft blobs);
//! each modality renders it through its own monotone piecewise-linear
//! transfer curve plus voxel noise, so modalities of one study look
//! different but carry the same structure. An optional ellipsoidal lesion
//! alters the modalities with per-modality contrast offsets and provides
//! the segmentation mask and classification label.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvpv::{save_dataset, DatasetManifest, Splits};
use crate::rng::{chacha, derive_seed};
use crate::volume::{Dims3, ModalityRegistry, Study, Volume};

/// Monotone piecewise-linear map over [0,1] with an optional contrast flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferCurve {
    /// (x, y) knots; x strictly increasing from 0 to 1, y non-decreasing.
    pub knots: Vec<(f64, f64)>,
    /// -1 flips the output to `1 - y`.
    #[serde(default = "default_sign")]
    pub sign: i8,
}

fn default_sign() -> i8 {
    1
}

impl TransferCurve {
    pub fn identity() -> Self {
        Self {
            knots: vec![(0.0, 0.0), (1.0, 1.0)],
            sign: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::Config("transfer curve needs >= 2 knots".into()));
        }
        if self.knots[0].0 != 0.0 || self.knots[self.knots.len() - 1].0 != 1.0 {
            return Err(Error::Config("curve knots must span x in [0,1]".into()));
        }
        for win in self.knots.windows(2) {
            if win[1].0 <= win[0].0 {
                return Err(Error::Config("curve knot x values must strictly increase".into()));
            }
            if win[1].1 < win[0].1 {
                return Err(Error::Config("curve must be monotone non-decreasing".into()));
            }
        }
        for &(x, y) in &self.knots {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Config("curve knots must lie in [0,1]^2".into()));
            }
        }
        if self.sign != 1 && self.sign != -1 {
            return Err(Error::Config(format!("curve sign must be ±1, got {}", self.sign)));
        }
        Ok(())
    }

    pub fn apply(&self, a: f64) -> f64 {
        let a = a.clamp(0.0, 1.0);
        let mut y = self.knots[self.knots.len() - 1].1;
        for win in self.knots.windows(2) {
            let (x0, y0) = win[0];
            let (x1, y1) = win[1];
            if a <= x1 {
                y = y0 + (y1 - y0) * (a - x0) / (x1 - x0);
                break;
            }
        }
        if self.sign < 0 {
            1.0 - y
        } else {
            y
        }
    }
}

/// Default per-modality appearance curves; all monotone increasing with
/// distinct shapes so modalities differ but stay rank-aligned. Outputs span
/// [0.1, 0.9]: synthetic intensities keep headroom inside the valid range.
pub fn default_curves(count: usize) -> Vec<TransferCurve> {
    let shapes: [Vec<(f64, f64)>; 8] = [
        vec![(0.0, 0.0), (1.0, 1.0)],
        vec![(0.0, 0.0), (0.3, 0.15), (0.7, 0.85), (1.0, 1.0)],
        vec![(0.0, 0.0), (0.65, 0.4), (1.0, 1.0)],
        vec![(0.0, 0.0), (0.35, 0.6), (1.0, 1.0)],
        vec![(0.0, 0.0), (0.5, 0.75), (1.0, 1.0)],
        vec![(0.0, 0.05), (0.5, 0.3), (1.0, 0.95)],
        vec![(0.0, 0.0), (0.2, 0.45), (0.8, 0.6), (1.0, 1.0)],
        vec![(0.0, 0.1), (0.6, 0.5), (1.0, 0.9)],
    ];
    (0..count)
        .map(|i| TransferCurve {
            knots: shapes[i % shapes.len()]
                .iter()
                .map(|&(x, y)| (x, 0.1 + 0.8 * y))
                .collect(),
            sign: 1,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub count: usize,
    /// Radius bounds in voxels for the canonical blob layout.
    pub radius_range: (f64, f64),
    /// Edge softness as a fraction of the radius.
    pub smoothness: f64,
    /// Per-study displacement of the canonical blob centers, in voxels.
    /// Mirrors co-registered acquisitions: anatomy is stable across the
    /// population up to small offsets, so population means stay structured.
    pub center_jitter: f64,
    /// Per-study multiplicative radius jitter (fraction of the radius).
    pub radius_jitter: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            count: 5,
            radius_range: (4.5, 9.0),
            smoothness: 0.25,
            center_jitter: 2.25,
            radius_jitter: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionSpec {
    pub enabled: bool,
    /// Probability that a study actually receives a lesion.
    pub presence_prob: f64,
    /// Per-axis ellipsoid radius bounds in voxels.
    pub radius_range: (f64, f64),
    /// Per-modality intensity offsets inside the lesion; signs alternate so
    /// the lesion looks different across modalities.
    pub contrasts: Vec<f64>,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            presence_prob: 1.0,
            radius_range: (3.0, 5.25),
            contrasts: vec![0.35, -0.3, 0.3, -0.35, 0.25, -0.25, 0.2, -0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub dims: Dims3,
    pub num_modalities: usize,
    pub blobs: BlobSpec,
    /// Per-modality appearance; must cover `num_modalities` entries.
    pub curves: Vec<TransferCurve>,
    pub noise_sigma: f64,
    pub lesion: LesionSpec,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dims: Dims3::cube(24),
            num_modalities: 3,
            blobs: BlobSpec::default(),
            curves: default_curves(8),
            noise_sigma: 0.02,
            lesion: LesionSpec::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_modalities == 0 {
            return Err(Error::Config("num_modalities must be >= 1".into()));
        }
        if self.num_modalities > self.curves.len() {
            return Err(Error::Config(format!(
                "{} modalities but only {} transfer curves",
                self.num_modalities,
                self.curves.len()
            )));
        }
        for c in &self.curves {
            c.validate()?;
        }
        let (lo, hi) = self.blobs.radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("bad blob radius range ({lo}, {hi})")));
        }
        if self.blobs.smoothness <= 0.0 {
            return Err(Error::Config("blob smoothness must be > 0".into()));
        }
        if self.blobs.center_jitter < 0.0 || self.blobs.radius_jitter < 0.0 {
            return Err(Error::Config("blob jitters must be >= 0".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        if self.lesion.enabled {
            let (llo, lhi) = self.lesion.radius_range;
            if !(llo > 0.0 && lhi >= llo) {
                return Err(Error::Config(format!("bad lesion radius range ({llo}, {lhi})")));
            }
            let min_dim = self.dims.min_dim() as f64;
            if 2.0 * lhi >= min_dim {
                return Err(Error::Config(format!(
                    "lesion radius {lhi} does not fit inside dims {}",
                    self.dims
                )));
            }
            if !(0.0..=1.0).contains(&self.lesion.presence_prob) {
                return Err(Error::Config("presence_prob must be in [0,1]".into()));
            }
            if self.lesion.contrasts.len() < self.num_modalities {
                return Err(Error::Config(format!(
                    "{} modalities but only {} lesion contrasts",
                    self.num_modalities,
                    self.lesion.contrasts.len()
                )));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<ModalityRegistry> {
        ModalityRegistry::with_default_names(self.num_modalities.max(2))
    }
}

/// Geometry of the generated lesion, exposed for label-fidelity checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionGeom {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
}

impl LesionGeom {
    pub fn contains(&self, d: usize, h: usize, w: usize) -> bool {
        let fd = (d as f64 - self.center.0) / self.radii.0;
        let fh = (h as f64 - self.center.1) / self.radii.1;
        let fw = (w as f64 - self.center.2) / self.radii.2;
        fd * fd + fh * fh + fw * fw <= 1.0
    }
}

/// Latents behind one study; useful for tests and debugging.
#[derive(Clone, Debug)]
pub struct StudyLatents {
    pub anatomy: Vec<f64>,
    pub lesion: Option<LesionGeom>,
}

/// Generate one study deterministically from `(cfg.seed, study_index)`.
pub fn gen_study(cfg: &GenConfig, study_index: usize) -> Result<Study> {
    gen_study_with_latents(cfg, study_index).map(|(s, _)| s)
}

pub fn gen_study_with_latents(
    cfg: &GenConfig,
    study_index: usize,
) -> Result<(Study, StudyLatents)> {
    cfg.validate()?;
    let dims = cfg.dims;
    let mut rng = chacha(derive_seed(cfg.seed, study_index as u64));

    // 1. Blob geometry: the canonical layout depends only on the dataset
    // seed; each study jitters it slightly, like co-registered scans of
    // different patients.
    let mut canon_rng = chacha(derive_seed(cfg.seed, 0xB10B));
    let mut blobs = Vec::with_capacity(cfg.blobs.count);
    for _ in 0..cfg.blobs.count {
        let canon_c = (
            canon_rng.random_range(0.0..dims.d as f64),
            canon_rng.random_range(0.0..dims.h as f64),
            canon_rng.random_range(0.0..dims.w as f64),
        );
        let (lo, hi) = cfg.blobs.radius_range;
        let canon_r = if hi > lo {
            canon_rng.random_range(lo..hi)
        } else {
            lo
        };
        let j = cfg.blobs.center_jitter;
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, center: f64, extent: f64| {
            let v = if j > 0.0 {
                center + rng.random_range(-j..j)
            } else {
                center
            };
            v.clamp(0.0, extent - f64::EPSILON)
        };
        let c = (
            jitter(&mut rng, canon_c.0, dims.d as f64),
            jitter(&mut rng, canon_c.1, dims.h as f64),
            jitter(&mut rng, canon_c.2, dims.w as f64),
        );
        let rj = cfg.blobs.radius_jitter;
        let r = if rj > 0.0 {
            canon_r * (1.0 + rng.random_range(-rj..rj))
        } else {
            canon_r
        };
        blobs.push((c, r));
    }

    // 2. Lesion geometry.
    let lesion = if cfg.lesion.enabled {
        let present = rng.random_range(0.0..1.0) < cfg.lesion.presence_prob;
        if present {
            let (lo, hi) = cfg.lesion.radius_range;
            let mut radius = || if hi > lo { rng.random_range(lo..hi) } else { lo };
            let radii = (radius(), radius(), radius());
            let center = (
                rng.random_range(radii.0..dims.d as f64 - radii.0),
                rng.random_range(radii.1..dims.h as f64 - radii.1),
                rng.random_range(radii.2..dims.w as f64 - radii.2),
            );
            Some(LesionGeom { center, radii })
        } else {
            None
        }
    } else {
        None
    };

    // 3. Shared anatomy field: soft union of blob profiles, in [0,1).
    let mut anatomy = vec![0.0f64; dims.voxels()];
    for d in 0..dims.d {
        for h in 0..dims.h {
            for w in 0..dims.w {
                let mut inv = 1.0;
                for &((cd, ch, cw), r) in &blobs {
                    let dist = ((d as f64 - cd).powi(2)
                        + (h as f64 - ch).powi(2)
                        + (w as f64 - cw).powi(2))
                    .sqrt();
                    let soft = cfg.blobs.smoothness * r;
                    let g = 1.0 / (1.0 + ((dist - r) / soft).exp());
                    inv *= 1.0 - g;
                }
                anatomy[dims.index(d, h, w)] = 1.0 - inv;
            }
        }
    }

    // 4. Render modalities: curve, lesion offset, noise, clamp.
    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"));
    let mut modalities = Vec::with_capacity(cfg.num_modalities);
    for m in 0..cfg.num_modalities {
        let curve = &cfg.curves[m];
        let contrast = cfg.lesion.contrasts.get(m).copied().unwrap_or(0.0);
        let mut data = Vec::with_capacity(dims.voxels());
        for d in 0..dims.d {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    let mut v = curve.apply(anatomy[dims.index(d, h, w)]);
                    if let Some(geom) = &lesion {
                        if geom.contains(d, h, w) {
                            v += contrast;
                        }
                    }
                    if let Some(n) = &noise {
                        v += n.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        modalities.push((m, Volume::new(dims, data)?));
    }

    // 5. Labels.
    let (seg_label, cls_label) = if cfg.lesion.enabled {
        let mut seg = vec![0.0f32; dims.voxels()];
        if let Some(geom) = &lesion {
            for d in 0..dims.d {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        if geom.contains(d, h, w) {
                            seg[dims.index(d, h, w)] = 1.0;
                        }
                    }
                }
            }
        }
        (
            Some(Volume::new(dims, seg)?),
            Some(lesion.is_some() as u32),
        )
    } else {
        (None, None)
    };

    let study = Study::new(format!("s{study_index:04}"), modalities, seg_label, cls_label)?;
    Ok((study, StudyLatents { anatomy, lesion }))
}

/// Train/val/test sizes at the 6:1:3 ratio.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Generate `n` studies, write them plus the manifest under `dir`.
pub fn gen_dataset(cfg: &GenConfig, n: usize, dir: &Path) -> Result<(Vec<Study>, DatasetManifest)> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let studies: Vec<Study> = (0..n)
        .map(|i| gen_study(cfg, i))
        .collect::<Result<_>>()?;
    let (n_train, n_val, _) = split_sizes(n);
    let ids: Vec<String> = studies.iter().map(|s| s.study_id.clone()).collect();
    let splits = Splits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    let manifest = save_dataset(dir, &registry, &studies, &splits)?;
    Ok((studies, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let cfg = GenConfig::default();
        let a = gen_study(&cfg, 3).unwrap();
        let b = gen_study(&cfg, 3).unwrap();
        assert_eq!(a.modalities().len(), b.modalities().len());
        for ((_, va), (_, vb)) in a.modalities().iter().zip(b.modalities()) {
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(a.cls_label, b.cls_label);
        let c = gen_study(&cfg, 4).unwrap();
        assert_ne!(a.volume(0).unwrap().data(), c.volume(0).unwrap().data());
    }

    #[test]
    fn zero_noise_identity_curves_make_equal_modalities() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            num_modalities: 2,
            curves: vec![TransferCurve::identity(), TransferCurve::identity()],
            lesion: LesionSpec {
                enabled: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = gen_study(&cfg, 0).unwrap();
        assert_eq!(s.volume(0).unwrap(), s.volume(1).unwrap());
    }

    #[test]
    fn zero_noise_modalities_are_rank_aligned() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            lesion: LesionSpec {
                enabled: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = gen_study(&cfg, 1).unwrap();
        // Monotone transforms of a shared field: sorting by one modality
        // sorts every other (Spearman rank correlation 1).
        let a = s.volume(0).unwrap().data();
        let b = s.volume(2).unwrap().data();
        let rank = |v: &[f32]| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            let mut r = vec![0.0; v.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let rho = pearson(&rank(a), &rank(b));
        assert!(rho > 0.9999, "rank correlation {rho}");
    }

    #[test]
    fn label_fidelity() {
        let cfg = GenConfig::default();
        for idx in 0..8 {
            let (study, latents) = gen_study_with_latents(&cfg, idx).unwrap();
            let seg = study.seg_label.as_ref().unwrap();
            let dims = study.dims();
            match &latents.lesion {
                Some(geom) => {
                    assert_eq!(study.cls_label, Some(1));
                    for d in 0..dims.d {
                        for h in 0..dims.h {
                            for w in 0..dims.w {
                                let inside = geom.contains(d, h, w);
                                let labeled = seg.get(d, h, w) == 1.0;
                                assert_eq!(labeled, inside, "voxel ({d},{h},{w})");
                            }
                        }
                    }
                }
                None => {
                    assert_eq!(study.cls_label, Some(0));
                    assert!(seg.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn presence_probability_produces_both_classes() {
        let cfg = GenConfig {
            lesion: LesionSpec {
                presence_prob: 0.5,
                ..Default::default()
            },
            ..Default::default()
        };
        let labels: Vec<u32> = (0..32)
            .map(|i| gen_study(&cfg, i).unwrap().cls_label.unwrap())
            .collect();
        assert!(labels.contains(&0));
        assert!(labels.contains(&1));
    }

    /// Central-difference gradient magnitude of a volume.
    fn gradient_magnitude(v: &Volume) -> Vec<f64> {
        let dims = v.dims();
        let mut out = vec![0.0; dims.voxels()];
        let g = |a: f32, b: f32| (a as f64 - b as f64) / 2.0;
        for d in 1..dims.d - 1 {
            for h in 1..dims.h - 1 {
                for w in 1..dims.w - 1 {
                    let gd = g(v.get(d + 1, h, w), v.get(d - 1, h, w));
                    let gh = g(v.get(d, h + 1, w), v.get(d, h - 1, w));
                    let gw = g(v.get(d, h, w + 1), v.get(d, h, w - 1));
                    out[dims.index(d, h, w)] = (gd * gd + gh * gh + gw * gw).sqrt();
                }
            }
        }
        out
    }

    #[test]
    fn cross_modal_structure_is_strong_on_default_config() {
        // Calibrated once over the default config: the mean cross-modal
        // Pearson correlation of gradient-magnitude fields must stay >= 0.5.
        let cfg = GenConfig {
            seed: 7,
            ..Default::default()
        };
        let mut corr_sum = 0.0;
        let mut pairs = 0usize;
        for idx in 0..64 {
            let study = gen_study(&cfg, idx).unwrap();
            let grads: Vec<Vec<f64>> = study
                .modalities()
                .iter()
                .map(|(_, v)| gradient_magnitude(v))
                .collect();
            for i in 0..grads.len() {
                for j in i + 1..grads.len() {
                    corr_sum += pearson(&grads[i], &grads[j]);
                    pairs += 1;
                }
            }
        }
        let mean = corr_sum / pairs as f64;
        // Observed 0.74 on the pinned config; threshold 0.5.
        assert!(mean >= 0.5, "mean gradient-field correlation {mean}");
    }

    #[test]
    fn dataset_split_sizes_and_empty() {
        assert_eq!(split_sizes(10), (6, 1, 3));
        assert_eq!(split_sizes(64), (38, 6, 20));
        assert_eq!(split_sizes(0), (0, 0, 0));
        let tmp = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let (studies, manifest) = gen_dataset(&cfg, 10, tmp.path()).unwrap();
        assert_eq!(studies.len(), 10);
        assert_eq!(manifest.splits.train.len(), 6);
        assert_eq!(manifest.splits.val.len(), 1);
        assert_eq!(manifest.splits.test.len(), 3);

        let tmp2 = tempfile::tempdir().unwrap();
        let (_, empty) = gen_dataset(&cfg, 0, tmp2.path()).unwrap();
        assert!(empty.studies.is_empty());
    }

    #[test]
    fn dataset_regeneration_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        gen_dataset(&cfg, 4, tmp.path()).unwrap();
        let manifest1 = std::fs::read(tmp.path().join("manifest.json")).unwrap();
        let vol1 = std::fs::read(tmp.path().join("studies/s0002/t2.mvpv")).unwrap();
        gen_dataset(&cfg, 4, tmp.path()).unwrap();
        let manifest2 = std::fs::read(tmp.path().join("manifest.json")).unwrap();
        let vol2 = std::fs::read(tmp.path().join("studies/s0002/t2.mvpv")).unwrap();
        assert_eq!(manifest1, manifest2);
        assert_eq!(vol1, vol2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = GenConfig::default();
        cfg.num_modalities = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = GenConfig::default();
        cfg.lesion.radius_range = (12.0, 12.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = GenConfig::default();
        cfg.curves[0].knots = vec![(0.0, 0.5), (0.5, 0.2), (1.0, 1.0)];
        assert!(cfg.validate().is_err());
    }
}
