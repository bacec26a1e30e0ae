//! Python bindings: volumes as numpy arrays, the masking operations, the
//! loss terms, evaluation metrics, the synthetic generator, and a
//! pre-training entry point.
//!
//! Volumes cross the boundary as C-order float32 arrays indexed (d, h, w).

use numpy::{IntoPyArray, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mvpt_core::distill::TemplateBank;
use mvpt_core::losses::{self, EmbeddingBatch, LossWeights};
use mvpt_core::net::{config_hash, save_checkpoint};
use mvpt_core::volume::{Dims3, ModalityRegistry};
use mvpt_core::{downstream, mask, mvpv, synthgen, trainer, volume};

fn err(e: mvpt_core::Error) -> PyErr {
    match e {
        mvpt_core::Error::Io(io) => PyRuntimeError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn dims_from(t: (usize, usize, usize)) -> Dims3 {
    Dims3::new(t.0, t.1, t.2)
}

/// One single-channel 3D scalar field.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Volume {
    inner: volume::Volume,
}

#[pymethods]
impl Volume {
    /// Build from a C-order float32 array indexed (d, h, w).
    #[staticmethod]
    fn from_numpy(arr: PyReadonlyArray3<'_, f32>) -> PyResult<Self> {
        let view = arr.as_array();
        let (d, h, w) = view.dim();
        let data: Vec<f32> = view.iter().copied().collect();
        Ok(Self {
            inner: volume::Volume::new(Dims3::new(d, h, w), data).map_err(err)?,
        })
    }

    fn to_numpy<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let dims = self.inner.dims();
        let arr = numpy::ndarray::Array3::from_shape_vec(
            (dims.d, dims.h, dims.w),
            self.inner.data().to_vec(),
        )
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(arr.into_pyarray(py))
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.d, d.h, d.w)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mvpv::save_volume(&self.inner, path.as_ref()).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mvpv::load_volume(path.as_ref()).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={})", self.inner.dims())
    }
}

/// Clip to nearest-rank percentiles and rescale to [0, 1].
#[pyfunction]
fn normalize_percentile(v: &Volume, lo_pct: f64, hi_pct: f64) -> PyResult<Volume> {
    Ok(Volume {
        inner: volume::normalize_percentile(&v.inner, lo_pct, hi_pct).map_err(err)?,
    })
}

/// Extract the sub-volume at `origin` with shape `size`.
#[pyfunction]
fn crop(
    v: &Volume,
    origin: (usize, usize, usize),
    size: (usize, usize, usize),
) -> PyResult<Volume> {
    Ok(Volume {
        inner: volume::crop(&v.inner, dims_from(origin), dims_from(size)).map_err(err)?,
    })
}

/// A masked volume plus its occupancy bookkeeping.
#[pyclass]
struct MaskResult {
    inner: mask::MaskResult,
}

#[pymethods]
impl MaskResult {
    #[getter]
    fn masked(&self) -> Volume {
        Volume {
            inner: self.inner.masked.clone(),
        }
    }

    /// Occupancy field as a float32 array of 0/1, indexed (d, h, w).
    fn occupancy<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let dims = self.inner.masked.dims();
        let vol = mvpv::occupancy_to_volume(dims, &self.inner.occupancy).map_err(err)?;
        Volume { inner: vol }.to_numpy(py)
    }

    #[getter]
    fn masked_fraction(&self) -> f64 {
        self.inner.masked_fraction
    }

    #[getter]
    fn fill_source(&self) -> &'static str {
        match self.inner.fill_source {
            mask::FillSource::OtherModality => "other_modality",
            mask::FillSource::Template => "template",
        }
    }
}

/// Replace random cubes of `x` with co-located content from another modality.
#[pyfunction]
fn cross_modal_mask(x: &Volume, fill: &Volume, r: usize, p_star: f64, seed: u64) -> PyResult<MaskResult> {
    Ok(MaskResult {
        inner: mask::cross_modal_mask(&x.inner, &fill.inner, r, p_star, seed).map_err(err)?,
    })
}

/// Replace random cubes of `x` with template content at the same coords.
#[pyfunction]
fn distill_mask(x: &Volume, template: &Volume, r: usize, p_star: f64, seed: u64) -> PyResult<MaskResult> {
    Ok(MaskResult {
        inner: mask::distill_mask(&x.inner, &template.inner, r, p_star, seed).map_err(err)?,
    })
}

// ---------------------------------------------------------------------------
// Losses and metrics
// ---------------------------------------------------------------------------

#[pyfunction]
fn recon_loss(pred: &Volume, target: &Volume) -> PyResult<f64> {
    losses::recon_loss(&pred.inner, &target.inner).map_err(err)
}

fn batch_from(arr: PyReadonlyArray2<'_, f64>) -> PyResult<EmbeddingBatch> {
    let view = arr.as_array();
    let rows: Vec<Vec<f64>> = view.outer_iter().map(|r| r.to_vec()).collect();
    let ids = (0..rows.len()).map(|i| (format!("row{i}"), 0)).collect();
    EmbeddingBatch::from_raw(rows, ids).map_err(err)
}

/// Directional InfoNCE over two (batch, dim) embedding matrices; rows are
/// L2-normalized internally and row i of `f` pairs with row i of `g`.
#[pyfunction]
fn info_nce(f: PyReadonlyArray2<'_, f64>, g: PyReadonlyArray2<'_, f64>, tau: f64) -> PyResult<f64> {
    losses::info_nce(&batch_from(f)?, &batch_from(g)?, tau).map_err(err)
}

/// Symmetric contrastive loss (mean of both InfoNCE directions).
#[pyfunction]
fn contrastive_loss(
    f: PyReadonlyArray2<'_, f64>,
    g: PyReadonlyArray2<'_, f64>,
    tau: f64,
) -> PyResult<f64> {
    losses::contrastive_loss(&batch_from(f)?, &batch_from(g)?, tau).map_err(err)
}

/// Combined self-supervised total with the contrastive gate.
#[pyfunction]
#[pyo3(signature = (cmr, md, cl, lambda_md=1.0, lambda_cl=1.0, cl_active=true))]
fn ssl_total(cmr: f64, md: f64, cl: f64, lambda_md: f64, lambda_cl: f64, cl_active: bool) -> f64 {
    let w = LossWeights {
        lambda_md,
        lambda_cl,
        ..Default::default()
    };
    losses::ssl_total(cmr, md, cl, &w, cl_active)
}

#[pyfunction]
fn consistency_loss(e1: Vec<f64>, e2: Vec<f64>) -> PyResult<f64> {
    losses::consistency_loss(&e1, &e2).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (sl1, sl2, cons, lambda_cons=0.1))]
fn finetune_total(sl1: f64, sl2: f64, cons: f64, lambda_cons: f64) -> f64 {
    losses::finetune_total(sl1, sl2, cons, lambda_cons)
}

#[pyfunction]
fn dice_loss(pred_prob: &Volume, target: &Volume) -> PyResult<f64> {
    losses::dice_loss(&pred_prob.inner, &target.inner).map_err(err)
}

#[pyfunction]
fn ce_loss(logits: Vec<f64>, class: usize) -> PyResult<f64> {
    losses::ce_loss(&logits, class).map_err(err)
}

#[pyfunction]
fn dice_score(pred: &Volume, target: &Volume) -> PyResult<f64> {
    downstream::dice_score(&pred.inner, &target.inner).map_err(err)
}

/// 95th-percentile symmetric surface distance; None when a side is empty.
#[pyfunction]
fn hd95(pred: &Volume, target: &Volume) -> PyResult<Option<f64>> {
    downstream::hd95(&pred.inner, &target.inner).map_err(err)
}

/// (accuracy, AUC, F1) from (score, binary label) pairs.
#[pyfunction]
fn cls_metrics(scores: Vec<(f64, u32)>) -> PyResult<(f64, f64, f64)> {
    let m = downstream::cls_metrics(&scores).map_err(err)?;
    Ok((m.acc, m.auc, m.f1))
}

// ---------------------------------------------------------------------------
// Synthetic studies and pre-training
// ---------------------------------------------------------------------------

/// A patient-level group of co-registered modality volumes with labels.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Study {
    inner: volume::Study,
}

#[pymethods]
impl Study {
    #[getter]
    fn study_id(&self) -> &str {
        &self.inner.study_id
    }

    #[getter]
    fn num_modalities(&self) -> usize {
        self.inner.num_modalities()
    }

    fn modality(&self, id: usize) -> PyResult<Volume> {
        self.inner
            .volume(id)
            .map(|v| Volume { inner: v.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("no modality {id}")))
    }

    #[getter]
    fn seg_label(&self) -> Option<Volume> {
        self.inner.seg_label.as_ref().map(|v| Volume { inner: v.clone() })
    }

    #[getter]
    fn cls_label(&self) -> Option<u32> {
        self.inner.cls_label
    }

    fn __repr__(&self) -> String {
        format!(
            "Study(id={:?}, modalities={}, dims={})",
            self.inner.study_id,
            self.inner.num_modalities(),
            self.inner.dims()
        )
    }
}

/// Generate one synthetic study. `config_json` overrides the default
/// generator configuration (same schema as the Rust `GenConfig`).
#[pyfunction]
#[pyo3(signature = (study_index, seed=0, config_json=None))]
fn gen_study(study_index: usize, seed: u64, config_json: Option<&str>) -> PyResult<Study> {
    let mut cfg: synthgen::GenConfig = match config_json {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => Default::default(),
    };
    if config_json.is_none() {
        cfg.seed = seed;
    }
    Ok(Study {
        inner: synthgen::gen_study(&cfg, study_index).map_err(err)?,
    })
}

/// Learnable per-modality templates (frozen snapshot view from Python).
#[pyclass]
struct Templates {
    inner: TemplateBank,
}

#[pymethods]
impl Templates {
    #[getter]
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn template(&self, modality_id: usize) -> PyResult<Volume> {
        Ok(Volume {
            inner: self.inner.template(modality_id).map_err(err)?.clone(),
        })
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.frozen()
    }
}

/// Result of a pre-training run.
#[pyclass]
struct PretrainResult {
    model: mvpt_core::net::ModelState,
    net: mvpt_core::net::NetConfig,
    #[pyo3(get)]
    steps: usize,
    records_json: String,
    bank: TemplateBank,
}

#[pymethods]
impl PretrainResult {
    /// Per-step loss records as a list of dicts.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let json = pyo3::types::PyModule::import(py, "json")?;
        json.call_method1("loads", (self.records_json.as_str(),))
    }

    #[getter]
    fn templates(&self) -> Templates {
        Templates {
            inner: self.bank.clone(),
        }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path.as_ref(), config_hash(&self.net), &self.model).map_err(err)
    }
}

/// Run self-supervised pre-training over the given studies.
///
/// `config_json` follows the Rust `PretrainConfig` schema; omitted fields
/// keep their defaults (paper hyperparameters at desk scale).
#[pyfunction]
#[pyo3(signature = (studies, num_modalities, config_json=None, **overrides))]
fn pretrain(
    studies: Vec<Study>,
    num_modalities: usize,
    config_json: Option<&str>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<PretrainResult> {
    let mut cfg: trainer::PretrainConfig = match config_json {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => Default::default(),
    };
    if let Some(kw) = overrides {
        for (key, value) in kw.iter() {
            let key: String = key.extract()?;
            match key.as_str() {
                "epochs" => cfg.epochs = value.extract()?,
                "batch_size" => cfg.batch_size = value.extract()?,
                "seed" => cfg.seed = value.extract()?,
                "lr0" => cfg.lr0 = value.extract()?,
                "p_star" => cfg.p_star = value.extract()?,
                "r" => cfg.r = value.extract()?,
                "crop" => {
                    let c: usize = value.extract()?;
                    cfg.crop_dims = Dims3::cube(c);
                }
                other => {
                    return Err(PyValueError::new_err(format!(
                        "unknown override {other:?} (use config_json for full control)"
                    )))
                }
            }
        }
    }
    let registry = ModalityRegistry::with_default_names(num_modalities.max(2)).map_err(err)?;
    let inner: Vec<volume::Study> = studies.into_iter().map(|s| s.inner).collect();
    let out = trainer::run_pretrain(&cfg, &registry, &inner).map_err(err)?;
    let records_json = serde_json::to_string(&out.log.records)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PretrainResult {
        model: out.model,
        net: cfg.net.clone(),
        steps: out.log.records.len(),
        records_json,
        bank: out.bank,
    })
}

#[pymodule]
fn mvpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<MaskResult>()?;
    m.add_class::<Study>()?;
    m.add_class::<Templates>()?;
    m.add_class::<PretrainResult>()?;
    m.add_function(wrap_pyfunction!(normalize_percentile, m)?)?;
    m.add_function(wrap_pyfunction!(crop, m)?)?;
    m.add_function(wrap_pyfunction!(cross_modal_mask, m)?)?;
    m.add_function(wrap_pyfunction!(distill_mask, m)?)?;
    m.add_function(wrap_pyfunction!(recon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ssl_total, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_total, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(cls_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_study, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    Ok(())
}
