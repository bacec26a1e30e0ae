//! Learnable per-modality template volumes.
//!
//! Templates start at zero and are trained by backpropagating the masked
//! reconstruction loss through the template-filled voxels of the input.
//! An update touches exactly the voxels that entered the masked input in
//! that step (their moments included), so untouched voxels stay bit-frozen.
//! Template updates never use weight decay: decay would pull the templates
//! back toward zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mvpv::save_volume;
use crate::net::fnv1a64;
use crate::net::Feature;
use crate::optim::{adamw_scalar, AdamWHyper};
use crate::volume::{Dims3, ModalityRegistry, Volume};

/// The bank of S learnable modality templates, sized like the training crop.
#[derive(Clone, Debug)]
pub struct TemplateBank {
    templates: Vec<Volume>,
    frozen: bool,
    update_count: Vec<u64>,
}

/// Initialize one all-zero template per registry modality.
pub fn init_bank(registry: &ModalityRegistry, crop_dims: Dims3) -> TemplateBank {
    TemplateBank {
        templates: vec![Volume::zeros(crop_dims); registry.len()],
        frozen: false,
        update_count: vec![0; registry.len()],
    }
}

impl TemplateBank {
    /// Rebuild a bank from previously exported template volumes.
    pub fn from_templates(templates: Vec<Volume>, frozen: bool) -> Result<Self> {
        let Some(first) = templates.first() else {
            return Err(Error::Param("template bank needs at least one template".into()));
        };
        let dims = first.dims();
        if templates.iter().any(|t| t.dims() != dims) {
            return Err(Error::Shape("templates must share dims".into()));
        }
        let count = templates.len();
        Ok(Self {
            templates,
            frozen,
            update_count: vec![0; count],
        })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn dims(&self) -> Dims3 {
        self.templates[0].dims()
    }

    pub fn template(&self, modality_id: usize) -> Result<&Volume> {
        self.templates
            .get(modality_id)
            .ok_or_else(|| Error::Param(format!("modality id {modality_id} out of range")))
    }

    pub fn update_count(&self, modality_id: usize) -> u64 {
        self.update_count[modality_id]
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Make the bank immutable; downstream use requires a frozen bank.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// FNV-1a hash of the raw template bytes, for immutability checks.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.templates {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    #[cfg(test)]
    pub(crate) fn template_mut(&mut self, modality_id: usize) -> &mut Volume {
        &mut self.templates[modality_id]
    }
}

/// Which update rule drives the template voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TemplateOptimizer {
    /// Same family as the network optimizer, weight decay forced to zero.
    AdamW(AdamWHyper),
    /// Plain gradient descent; used by tests and as an explicit override.
    Sgd,
}

/// Per-template first/second moments and step counts for the sparse update.
#[derive(Clone, Debug)]
pub struct TemplateOptState {
    pub opt: TemplateOptimizer,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    clamp: Option<(f32, f32)>,
}

impl TemplateOptState {
    pub fn new(opt: TemplateOptimizer, bank: &TemplateBank) -> Self {
        let opt = match opt {
            TemplateOptimizer::AdamW(h) => TemplateOptimizer::AdamW(AdamWHyper {
                weight_decay: 0.0,
                ..h
            }),
            sgd => sgd,
        };
        let n = bank.dims().voxels();
        Self {
            opt,
            m: vec![vec![0.0; n]; bank.len()],
            v: vec![vec![0.0; n]; bank.len()],
            t: vec![0; bank.len()],
            clamp: None,
        }
    }

    /// Project updated voxels into the given intensity range. Templates act
    /// as modality images (downstream feeds them as input channels), so the
    /// trainer keeps them inside the volume intensity range.
    pub fn with_clamp(mut self, lo: f32, hi: f32) -> Self {
        self.clamp = Some((lo, hi));
        self
    }
}

/// Apply one optimizer step to the voxels selected by `occupancy`.
///
/// `input_grad` is the loss gradient with respect to the masked input volume;
/// restricted to the occupancy field it is exactly the gradient with respect
/// to the template, because masked = occ*T + (1-occ)*x voxelwise.
pub fn template_step(
    bank: &mut TemplateBank,
    modality_id: usize,
    input_grad: &Feature,
    occupancy: &[bool],
    opt: &mut TemplateOptState,
    lr: f64,
) -> Result<()> {
    if bank.frozen {
        return Err(Error::State(
            "template bank is frozen; no further updates allowed".into(),
        ));
    }
    if modality_id >= bank.len() {
        return Err(Error::Param(format!("modality id {modality_id} out of range")));
    }
    let dims = bank.dims();
    if input_grad.channels != 1 || input_grad.dims != dims {
        return Err(Error::Shape(format!(
            "input gradient is {}ch {} but templates are 1ch {dims}",
            input_grad.channels, input_grad.dims
        )));
    }
    if occupancy.len() != dims.voxels() {
        return Err(Error::Shape(format!(
            "occupancy length {} != {} voxels",
            occupancy.len(),
            dims.voxels()
        )));
    }
    bank.update_count[modality_id] += 1;
    opt.t[modality_id] += 1;
    let t = opt.t[modality_id];
    let template = bank.templates[modality_id].data_mut();
    let project = |v: f32| match opt.clamp {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    };
    match opt.opt {
        TemplateOptimizer::Sgd => {
            for (idx, &occ) in occupancy.iter().enumerate() {
                if occ {
                    template[idx] =
                        project((template[idx] as f64 - lr * input_grad.data[idx]) as f32);
                }
            }
        }
        TemplateOptimizer::AdamW(hyper) => {
            let m = &mut opt.m[modality_id];
            let v = &mut opt.v[modality_id];
            for (idx, &occ) in occupancy.iter().enumerate() {
                if occ {
                    template[idx] = project(adamw_scalar(
                        template[idx] as f64,
                        input_grad.data[idx],
                        &mut m[idx],
                        &mut v[idx],
                        t,
                        &hyper,
                        lr,
                    ) as f32);
                }
            }
        }
    }
    Ok(())
}

/// Write one MVPV snapshot per modality under `dir/templates/<name>/<step>.mvpv`
/// and append rows to `dir/manifest.tsv`.
pub fn export_bank(
    bank: &TemplateBank,
    registry: &ModalityRegistry,
    dir: &Path,
    step: usize,
) -> Result<()> {
    if registry.len() != bank.len() {
        return Err(Error::Param(format!(
            "registry has {} modalities, bank has {}",
            registry.len(),
            bank.len()
        )));
    }
    let manifest = dir.join("manifest.tsv");
    fs::create_dir_all(dir)?;
    let mut rows = String::new();
    if !manifest.exists() {
        rows.push_str("step\tmodality\tpath\tupdate_count\n");
    }
    for (id, template) in bank.templates.iter().enumerate() {
        let name = registry.name(id).expect("length checked");
        let subdir = dir.join("templates").join(name);
        fs::create_dir_all(&subdir)?;
        let rel = format!("templates/{name}/{step}.mvpv");
        save_volume(template, &dir.join(&rel))?;
        rows.push_str(&format!(
            "{step}\t{name}\t{rel}\t{}\n",
            bank.update_count[id]
        ));
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)?;
    file.write_all(rows.as_bytes())?;
    Ok(())
}
