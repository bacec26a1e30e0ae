//! Bit-exact binary volume format ("MVPV v1") and the JSON dataset manifest.
//!
//! MVPV layout:
//!
//! ```text
//! bytes 0..4   magic "MVPV"
//! byte  4      version (1)
//! byte  5      dtype code (1 = 32-bit little-endian real)
//! bytes 6..8   reserved, zero
//! 3 x u32 LE   dims D, H, W
//! payload      D*H*W f32 LE values, row-major, W fastest
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims3, ModalityRegistry, Study, Volume};

pub const MAGIC: [u8; 4] = *b"MVPV";
pub const VERSION: u8 = 1;
pub const DTYPE_F32_LE: u8 = 1;

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume(v, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_volume<W: Write>(v: &Volume, w: &mut W) -> Result<()> {
    let dims = v.dims();
    for n in [dims.d, dims.h, dims.w] {
        if n > u32::MAX as usize {
            return Err(Error::DimOverflow(format!("{n} exceeds u32 range")));
        }
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32_LE, 0, 0])?;
    for n in [dims.d, dims.h, dims.w] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for &x in v.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    read_volume(&mut BufReader::new(file), Some(len))
}

pub fn read_volume<R: Read>(r: &mut R, total_len: Option<u64>) -> Result<Volume> {
    let mut header = [0u8; 20];
    read_exact_or_truncated(r, &mut header, 20, total_len)?;
    if header[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if header[4] != VERSION {
        return Err(Error::UnsupportedVersion(header[4]));
    }
    if header[5] != DTYPE_F32_LE {
        return Err(Error::UnsupportedDtype(header[5]));
    }
    if header[6] != 0 || header[7] != 0 {
        return Err(Error::Format("reserved header bytes are nonzero".into()));
    }
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
    let h = u32::from_le_bytes(header[12..16].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(header[16..20].try_into().unwrap()) as u64;
    let voxels = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::DimOverflow(format!("{d}x{h}x{w}")))?;
    let payload = voxels
        .checked_mul(4)
        .ok_or_else(|| Error::DimOverflow(format!("{d}x{h}x{w} payload bytes")))?;
    if payload > isize::MAX as u64 {
        return Err(Error::DimOverflow(format!("{d}x{h}x{w} payload bytes")));
    }
    if let Some(total) = total_len {
        // Catch short files before allocating, and reject trailing garbage.
        let expected = 20 + payload;
        if total != expected {
            return Err(Error::Truncated {
                expected,
                got: total,
            });
        }
    }
    let mut bytes = vec![0u8; payload as usize];
    read_exact_or_truncated(r, &mut bytes, 20 + payload, total_len)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(Dims3::new(d as usize, h as usize, w as usize), data)
}

fn read_exact_or_truncated<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    expected_total: u64,
    total_len: Option<u64>,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                expected: expected_total,
                got: total_len.unwrap_or(0),
            }
        } else {
            Error::Io(e)
        }
    })
}

/// An occupancy field rendered as a 0/1 volume for debug dumps.
pub fn occupancy_to_volume(dims: Dims3, occupancy: &[bool]) -> Result<Volume> {
    if occupancy.len() != dims.voxels() {
        return Err(Error::Shape(format!(
            "occupancy length {} != {} voxels",
            occupancy.len(),
            dims.voxels()
        )));
    }
    Volume::new(
        dims,
        occupancy.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// Per-study manifest entry; paths are relative to the manifest directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StudyEntry {
    pub study_id: String,
    /// Ordered (modality name, volume file path) pairs.
    pub modalities: Vec<(String, String)>,
    #[serde(default)]
    pub seg_label: Option<String>,
    #[serde(default)]
    pub cls_label: Option<u32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub modalities: Vec<String>,
    pub studies: Vec<StudyEntry>,
    pub splits: Splits,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

fn study_dir(dir: &Path, study_id: &str) -> PathBuf {
    dir.join("studies").join(study_id)
}

/// Write all study volumes plus the manifest under `dir`.
pub fn save_dataset(
    dir: &Path,
    registry: &ModalityRegistry,
    studies: &[Study],
    splits: &Splits,
) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(studies.len());
    for study in studies {
        let sdir = study_dir(dir, &study.study_id);
        fs::create_dir_all(&sdir)?;
        let mut modalities = Vec::new();
        for (id, vol) in study.modalities() {
            let name = registry
                .name(*id)
                .ok_or_else(|| Error::Param(format!("modality id {id} not in registry")))?;
            let rel = format!("studies/{}/{}.mvpv", study.study_id, name);
            save_volume(vol, &dir.join(&rel))?;
            modalities.push((name.to_string(), rel));
        }
        let seg_label = match &study.seg_label {
            Some(seg) => {
                let rel = format!("studies/{}/seg.mvpv", study.study_id);
                save_volume(seg, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(StudyEntry {
            study_id: study.study_id.clone(),
            modalities,
            seg_label,
            cls_label: study.cls_label,
        });
    }
    let manifest = DatasetManifest {
        modalities: registry.names().to_vec(),
        studies: entries,
        splits: splits.clone(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(ModalityRegistry, Vec<Study>, Splits)> {
    let manifest = DatasetManifest::load(dir)?;
    let registry = ModalityRegistry::new(manifest.modalities.clone())?;
    let mut studies = Vec::with_capacity(manifest.studies.len());
    for entry in &manifest.studies {
        let mut modalities = Vec::new();
        for (name, rel) in &entry.modalities {
            let id = registry
                .index_of(name)
                .ok_or_else(|| Error::Format(format!("unknown modality {name:?} in manifest")))?;
            modalities.push((id, load_volume(&dir.join(rel))?));
        }
        let seg_label = match &entry.seg_label {
            Some(rel) => Some(load_volume(&dir.join(rel))?),
            None => None,
        };
        studies.push(Study::new(
            entry.study_id.clone(),
            modalities,
            seg_label,
            entry.cls_label,
        )?);
    }
    Ok((registry, studies, manifest.splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dims = Dims3::new(2, 3, 4);
        let data: Vec<f32> = (0..24).map(|i| (i as f32) * 0.37 - 2.0).collect();
        let v = Volume::new(dims, data).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("v.mvpv");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(v, back);
        // Bit-exact, not just approximately equal.
        for (a, b) in v.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.mvpv");
        std::fs::write(&path, b"NOPE\x01\x01\x00\x00aaaaaaaaaaaa").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::BadMagic)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let v = Volume::filled(Dims3::cube(2), 1.0).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("t.mvpv");
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Header declares 2x2x2 = 8 values but only 7 remain.
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let v = Volume::filled(Dims3::cube(2), 1.0).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("t.mvpv");
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dim_overflow_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MVPV");
        bytes.extend_from_slice(&[1, 1, 0, 0]);
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("huge.mvpv");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn wrong_version_and_dtype() {
        let v = Volume::filled(Dims3::cube(1), 0.0).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("v.mvpv");
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(Error::UnsupportedVersion(9))
        ));
        bytes[4] = 1;
        bytes[5] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::UnsupportedDtype(7))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]
        #[test]
        fn random_volume_roundtrip_bit_exact(
            d in 1usize..5, h in 1usize..5, w in 1usize..5,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let dims = Dims3::new(d, h, w);
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f32> = (0..dims.voxels())
                .map(|_| f32::from_bits((rng.next_u64() as u32) & 0x7F7F_FFFF))
                .collect();
            let v = Volume::new(dims, data).unwrap();
            let tmp = tempfile::tempdir().unwrap();
            let path = tmp.path().join("v.mvpv");
            save_volume(&v, &path).unwrap();
            let back = load_volume(&path).unwrap();
            for (a, b) in v.data().iter().zip(back.data()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let registry = ModalityRegistry::with_default_names(2).unwrap();
        let dims = Dims3::cube(3);
        let v0 = Volume::filled(dims, 0.25).unwrap();
        let v1 = Volume::filled(dims, 0.75).unwrap();
        let seg = Volume::zeros(dims);
        let study =
            Study::new("s000".into(), vec![(0, v0), (1, v1)], Some(seg), Some(1)).unwrap();
        let splits = Splits {
            train: vec!["s000".into()],
            ..Default::default()
        };
        let tmp = tempfile::tempdir().unwrap();
        save_dataset(tmp.path(), &registry, &[study], &splits).unwrap();
        let (reg2, studies2, splits2) = load_dataset(tmp.path()).unwrap();
        assert_eq!(reg2, registry);
        assert_eq!(studies2.len(), 1);
        assert_eq!(studies2[0].num_modalities(), 2);
        assert_eq!(studies2[0].cls_label, Some(1));
        assert_eq!(splits2, splits);
    }
}
