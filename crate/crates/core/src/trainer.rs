//! The self-supervised pre-training loop.
//!
//! Each batch item is one uni-modal crop. Two masked views are built per
//! item: view A filled from another modality of the same study (or from the
//! template when the study has a single modality) and view B filled from the
//! learnable template. Both views run through the network; view A drives the
//! cross-modal reconstruction term, view B the distillation term, and after
//! the gate epoch the two embeddings form positive pairs for the symmetric
//! contrastive term. One optimizer step updates the network, and the input
//! gradients of template-filled views, restricted to their occupancy fields,
//! update the templates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{
    init_bank, template_step, TemplateBank, TemplateOptState, TemplateOptimizer,
};
use crate::error::{Error, Result};
use crate::losses::{contrastive_grad, mse_grad, ssl_total, LossWeights};
use crate::mask::{cross_modal_mask, distill_mask, FillSource, MaskResult};
use crate::net::{Feature, ModelState, NetConfig, Network, Tape, Upstream};
use crate::optim::{AdamW, AdamWHyper};
use crate::rng::{chacha, derive_seed};
use crate::volume::{crop, Dims3, ModalityRegistry, Study, Volume};

/// Crop edge the masking cube size `r` is quoted against.
pub const REFERENCE_CROP: usize = 96;

/// Cube edge used at a given crop size: `r` as-is at the reference crop and
/// above, proportionally shrunk below it with a floor of 2.
pub fn effective_r(r: usize, crop_min_dim: usize) -> usize {
    if crop_min_dim >= REFERENCE_CROP {
        r
    } else {
        let scaled = (r as f64 * crop_min_dim as f64 / REFERENCE_CROP as f64).round() as usize;
        scaled.max(2).min(crop_min_dim)
    }
}

/// Cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fraction of total epochs after which the contrastive term activates.
    pub cl_start_fraction: f64,
    /// Masking cube edge, quoted relative to a 96-voxel crop.
    pub r: usize,
    pub p_star: f64,
    pub crop_dims: Dims3,
    pub seed: u64,
    pub weights: LossWeights,
    pub net: NetConfig,
    /// Starting template learning rate, cosine-decayed like the network's;
    /// None shares the network's lr0.
    pub template_lr: Option<f64>,
    /// Fraction of total steps over which the template learning rate decays
    /// to zero. Templates converge before the contrastive phase starts, so
    /// the default horizon ends well ahead of the gate epoch.
    pub template_schedule_fraction: f64,
    /// Update rule for template voxels: "adamw" (network family) or "sgd".
    pub template_optimizer: String,
    /// Intensity range template voxels are projected into after each update;
    /// None leaves them unbounded.
    pub template_clamp: Option<(f64, f64)>,
    /// Voxels at or above this value count as foreground for crop centering.
    pub foreground_threshold: f64,
    /// Template snapshot cadence in epochs (0 = only initial and final).
    pub snapshot_every_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 8,
            lr0: 3e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            cl_start_fraction: 2.0 / 3.0,
            r: 8,
            p_star: 0.875,
            crop_dims: Dims3::cube(16),
            seed: 0,
            weights: LossWeights::default(),
            net: NetConfig::default(),
            template_lr: Some(0.02),
            template_schedule_fraction: 1.0 / 3.0,
            template_optimizer: "adamw".into(),
            template_clamp: Some((0.0, 1.0)),
            foreground_threshold: 0.1,
            snapshot_every_epochs: 10,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 (contrastive learning needs negatives)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cl_start_fraction) {
            return Err(Error::Config(format!(
                "cl_start_fraction {} outside [0,1]",
                self.cl_start_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.p_star) {
            return Err(Error::Config(format!("p_star {} outside [0,1]", self.p_star)));
        }
        if !(0.0..=1.0).contains(&self.template_schedule_fraction) {
            return Err(Error::Config(format!(
                "template_schedule_fraction {} outside [0,1]",
                self.template_schedule_fraction
            )));
        }
        if self.r == 0 {
            return Err(Error::Config("r must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        let sp = self.net.stride_product();
        for n in [self.crop_dims.d, self.crop_dims.h, self.crop_dims.w] {
            if n == 0 || n % sp != 0 {
                return Err(Error::Config(format!(
                    "crop dims {} not divisible by network stride product {sp}",
                    self.crop_dims
                )));
            }
        }
        Ok(())
    }

    pub fn adamw_hyper(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// First epoch at which the contrastive term is active.
    pub fn gate_epoch(&self) -> usize {
        let raw = self.cl_start_fraction * self.epochs as f64 - 1e-9;
        raw.ceil().max(0.0) as usize
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_cmr: f64,
    pub l_md: f64,
    /// Absent before the contrastive gate epoch.
    pub l_cl: Option<f64>,
    pub l_ssl: f64,
}

/// Append-only record of a pre-training run.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    /// (global step, bank state) pairs for trajectory exports.
    pub template_snapshots: Vec<(usize, TemplateBank)>,
}

impl RunLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tepoch\tlr\tl_cmr\tl_md\tl_cl\tl_ssl\n");
        for r in &self.records {
            let cl = r
                .l_cl
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.step, r.epoch, r.lr, r.l_cmr, r.l_md, cl, r.l_ssl
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let last = self.records.last();
        serde_json::json!({
            "steps": self.records.len(),
            "final_l_cmr": last.map(|r| r.l_cmr),
            "final_l_md": last.map(|r| r.l_md),
            "final_l_cl": last.and_then(|r| r.l_cl),
            "final_l_ssl": last.map(|r| r.l_ssl),
            "snapshot_steps": self.template_snapshots.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        })
    }
}

/// One sampled uni-modal crop with its cross-modal partner.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub study_id: String,
    pub modality: usize,
    pub num_modalities: usize,
    pub x: Volume,
    /// Co-located crop of another modality; None for single-modality studies.
    pub fill: Option<Volume>,
}

/// Sample origin for a crop, centering on foreground half of the time.
fn sample_crop_origin(
    volume: &Volume,
    crop_dims: Dims3,
    fg_threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Dims3 {
    let dims = volume.dims();
    let max = Dims3::new(
        dims.d - crop_dims.d,
        dims.h - crop_dims.h,
        dims.w - crop_dims.w,
    );
    if max.d == 0 && max.h == 0 && max.w == 0 {
        return Dims3::new(0, 0, 0);
    }
    let uniform = |rng: &mut ChaCha8Rng| {
        Dims3::new(
            rng.random_range(0..=max.d),
            rng.random_range(0..=max.h),
            rng.random_range(0..=max.w),
        )
    };
    if rng.random_range(0.0..1.0) < 0.5 {
        // Center on a random foreground voxel when one can be found.
        for _ in 0..16 {
            let d = rng.random_range(0..dims.d);
            let h = rng.random_range(0..dims.h);
            let w = rng.random_range(0..dims.w);
            if volume.get(d, h, w) as f64 >= fg_threshold {
                return Dims3::new(
                    d.saturating_sub(crop_dims.d / 2).min(max.d),
                    h.saturating_sub(crop_dims.h / 2).min(max.h),
                    w.saturating_sub(crop_dims.w / 2).min(max.w),
                );
            }
        }
    }
    uniform(rng)
}

/// Sample a batch of uni-modal crops with co-located partner crops.
pub fn sample_batch(
    dataset: &[Study],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    if dataset.is_empty() {
        return Err(Error::Param("cannot sample from an empty dataset".into()));
    }
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let study = &dataset[rng.random_range(0..dataset.len())];
        let mods = study.modalities();
        let m_pos = rng.random_range(0..mods.len());
        let (m_id, m_vol) = &mods[m_pos];
        if study.dims().d < cfg.crop_dims.d
            || study.dims().h < cfg.crop_dims.h
            || study.dims().w < cfg.crop_dims.w
        {
            return Err(Error::Shape(format!(
                "study {} dims {} smaller than crop {}",
                study.study_id,
                study.dims(),
                cfg.crop_dims
            )));
        }
        let origin = sample_crop_origin(m_vol, cfg.crop_dims, cfg.foreground_threshold, rng);
        let x = crop(m_vol, origin, cfg.crop_dims)?;
        let fill = if mods.len() >= 2 {
            let mut n_pos = rng.random_range(0..mods.len() - 1);
            if n_pos >= m_pos {
                n_pos += 1;
            }
            Some(crop(&mods[n_pos].1, origin, cfg.crop_dims)?)
        } else {
            None
        };
        batch.push(BatchItem {
            study_id: study.study_id.clone(),
            modality: *m_id,
            num_modalities: mods.len(),
            x,
            fill,
        });
    }
    Ok(batch)
}

struct ViewPass {
    mask: MaskResult,
    tape: Tape,
}

fn run_view(net: &Network, state: &ModelState, mask: MaskResult) -> Result<ViewPass> {
    let feat = Feature::from_data(1, mask.masked.dims(), mask.masked.to_f64())?;
    let tape = net.forward_tape(state, feat)?;
    Ok(ViewPass { mask, tape })
}

/// Run one optimization step over a sampled batch. Returns the loss record.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    net: &Network,
    state: &mut ModelState,
    opt: &mut AdamW,
    bank: &mut TemplateBank,
    topt: &mut TemplateOptState,
    batch: &[BatchItem],
    cfg: &PretrainConfig,
    step: usize,
    total_steps: usize,
    epoch: usize,
) -> Result<StepRecord> {
    let gate_active = epoch >= cfg.gate_epoch();
    let r_eff = effective_r(cfg.r, cfg.crop_dims.min_dim());
    let mask_seed = derive_seed(derive_seed(cfg.seed, 0xA11CE), step as u64);

    // Forward both views for every item.
    let mut views_a = Vec::with_capacity(batch.len());
    let mut views_b = Vec::with_capacity(batch.len());
    let mut item_weights = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let seed_a = derive_seed(mask_seed, 2 * i as u64);
        let seed_b = derive_seed(mask_seed, 2 * i as u64 + 1);
        let template = bank.template(item.modality)?;
        let mask_a = match &item.fill {
            Some(fill) => cross_modal_mask(&item.x, fill, r_eff, cfg.p_star, seed_a)?,
            // Single-modality studies fall back to the template fill.
            None => distill_mask(&item.x, template, r_eff, cfg.p_star, seed_a)?,
        };
        let mask_b = distill_mask(&item.x, template, r_eff, cfg.p_star, seed_b)?;
        views_a.push(run_view(net, state, mask_a)?);
        views_b.push(run_view(net, state, mask_b)?);
        item_weights.push(1.0 / (batch.len() as f64 * item.num_modalities as f64));
    }

    // Reconstruction losses and their upstream gradients.
    let mut l_cmr_acc = 0.0;
    let mut l_md_acc = 0.0;
    let mut d_recon_a = Vec::with_capacity(batch.len());
    let mut d_recon_b = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let target = item.x.to_f64();
        let w_i = item_weights[i];
        let (l_cmr, mut ga) = mse_grad(views_a[i].tape.recon_slice(), &target)?;
        let (l_md, mut gb) = mse_grad(views_b[i].tape.recon_slice(), &target)?;
        l_cmr_acc += w_i * l_cmr;
        l_md_acc += w_i * l_md;
        for g in &mut ga {
            *g *= w_i;
        }
        let wb = w_i * cfg.weights.lambda_md;
        for g in &mut gb {
            *g *= wb;
        }
        d_recon_a.push(ga);
        d_recon_b.push(gb);
    }

    // Contrastive term over the batch embeddings once the gate is open.
    let mut l_cl_acc = None;
    let mut d_emb_a: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
    let mut d_emb_b: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
    if gate_active {
        let a_rows: Vec<Vec<f64>> = views_a.iter().map(|v| v.tape.embedding.clone()).collect();
        let b_rows: Vec<Vec<f64>> = views_b.iter().map(|v| v.tape.embedding.clone()).collect();
        let grad = contrastive_grad(&a_rows, &b_rows, cfg.weights.tau, &item_weights)?;
        l_cl_acc = Some(grad.loss);
        for i in 0..batch.len() {
            d_emb_a[i] = Some(
                grad.d_a[i]
                    .iter()
                    .map(|g| g * cfg.weights.lambda_cl)
                    .collect(),
            );
            d_emb_b[i] = Some(
                grad.d_b[i]
                    .iter()
                    .map(|g| g * cfg.weights.lambda_cl)
                    .collect(),
            );
        }
    }

    let l_ssl = ssl_total(
        l_cmr_acc,
        l_md_acc,
        l_cl_acc.unwrap_or(0.0),
        &cfg.weights,
        gate_active,
    );
    if !l_ssl.is_finite() || !l_cmr_acc.is_finite() || !l_md_acc.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss diverged at step {step}: cmr={l_cmr_acc} md={l_md_acc} cl={l_cl_acc:?}"
        )));
    }

    // Backward passes, accumulating parameter and template gradients.
    let mut dparams = state.zeros_like();
    let voxels = cfg.crop_dims.voxels();
    let mut template_grads: Vec<Option<(Vec<f64>, Vec<bool>)>> = vec![None; bank.len()];
    let mut accumulate_template = |modality: usize, mask: &MaskResult, input_grad: &Feature| {
        let slot = template_grads[modality].get_or_insert_with(|| {
            (vec![0.0; voxels], vec![false; voxels])
        });
        for (idx, &occ) in mask.occupancy.iter().enumerate() {
            if occ {
                slot.0[idx] += input_grad.data[idx];
                slot.1[idx] = true;
            }
        }
    };

    for (i, item) in batch.iter().enumerate() {
        let template_filled_a = views_a[i].mask.fill_source == FillSource::Template;
        let grads_a = net.backward(
            state,
            &views_a[i].tape,
            Upstream {
                d_recon: Some(&d_recon_a[i]),
                d_embedding: d_emb_a[i].as_deref(),
                d_pooled: None,
            },
            template_filled_a,
        )?;
        for (acc, g) in dparams.iter_mut().zip(&grads_a.params) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        if template_filled_a {
            let input_grad = grads_a.input.as_ref().expect("requested");
            accumulate_template(item.modality, &views_a[i].mask, input_grad);
        }

        let grads_b = net.backward(
            state,
            &views_b[i].tape,
            Upstream {
                d_recon: Some(&d_recon_b[i]),
                d_embedding: d_emb_b[i].as_deref(),
                d_pooled: None,
            },
            true,
        )?;
        for (acc, g) in dparams.iter_mut().zip(&grads_b.params) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        let input_grad = grads_b.input.as_ref().expect("requested");
        accumulate_template(item.modality, &views_b[i].mask, input_grad);
    }

    // Network update with cosine-decayed learning rate.
    let lr = cosine_lr(step, total_steps, cfg.lr0);
    opt.step(&mut state.params, &dparams, lr)?;

    // Template updates on the union occupancy per modality; the cosine
    // horizon ends at template_schedule_fraction of the run, after which the
    // templates hold their converged state.
    let horizon = (total_steps as f64 * cfg.template_schedule_fraction).round() as usize;
    let template_lr = if step >= horizon || horizon == 0 {
        0.0
    } else {
        cosine_lr(step, horizon, cfg.template_lr.unwrap_or(cfg.lr0))
    };
    for (modality, slot) in template_grads.into_iter().enumerate() {
        if let Some((grad, occ)) = slot {
            let grad = Feature::from_data(1, cfg.crop_dims, grad)?;
            template_step(bank, modality, &grad, &occ, topt, template_lr)?;
        }
    }

    Ok(StepRecord {
        step,
        epoch,
        lr,
        l_cmr: l_cmr_acc,
        l_md: l_md_acc,
        l_cl: l_cl_acc,
        l_ssl,
    })
}

/// Per-epoch observer outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookAction {
    Continue,
    /// Finish cleanly after the current epoch (used for interrupt handling).
    Stop,
}

/// Epoch context passed to the observer hook.
pub struct EpochCtx<'a> {
    pub epoch: usize,
    pub step: usize,
    pub model: &'a ModelState,
    pub bank: &'a TemplateBank,
    pub log: &'a RunLog,
}

pub struct PretrainOutput {
    pub model: ModelState,
    pub bank: TemplateBank,
    pub log: RunLog,
}

pub fn run_pretrain(
    cfg: &PretrainConfig,
    registry: &ModalityRegistry,
    dataset: &[Study],
) -> Result<PretrainOutput> {
    run_pretrain_with_hook(cfg, registry, dataset, |_| HookAction::Continue)
}

/// Full pre-training loop with an epoch observer hook.
pub fn run_pretrain_with_hook(
    cfg: &PretrainConfig,
    registry: &ModalityRegistry,
    dataset: &[Study],
    mut hook: impl FnMut(&EpochCtx<'_>) -> HookAction,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let net = Network::new(cfg.net.clone())?;
    let mut state = net.init_state(derive_seed(cfg.seed, 0x1817));
    let mut opt = AdamW::for_params(cfg.adamw_hyper(), &state.params);
    let mut bank = init_bank(registry, cfg.crop_dims);
    let topt_kind = match cfg.template_optimizer.as_str() {
        "adamw" => TemplateOptimizer::AdamW(cfg.adamw_hyper()),
        "sgd" => TemplateOptimizer::Sgd,
        other => {
            return Err(Error::Config(format!(
                "unknown template optimizer {other:?} (expected \"adamw\" or \"sgd\")"
            )))
        }
    };
    let mut topt = TemplateOptState::new(topt_kind, &bank);
    if let Some((lo, hi)) = cfg.template_clamp {
        topt = topt.with_clamp(lo as f32, hi as f32);
    }
    let mut log = RunLog::default();
    log.template_snapshots.push((0, bank.clone()));

    if cfg.epochs == 0 || dataset.is_empty() {
        return Ok(PretrainOutput {
            model: state,
            bank,
            log,
        });
    }

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut data_rng = chacha(derive_seed(cfg.seed, 0xDA7A));
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sample_batch(dataset, cfg, &mut data_rng)?;
            let record = pretrain_step(
                &net, &mut state, &mut opt, &mut bank, &mut topt, &batch, cfg, step,
                total_steps, epoch,
            )?;
            log.records.push(record);
            step += 1;
        }
        let snapshot_due = cfg.snapshot_every_epochs > 0
            && (epoch + 1) % cfg.snapshot_every_epochs == 0;
        if snapshot_due {
            log.template_snapshots.push((step, bank.clone()));
        }
        let action = hook(&EpochCtx {
            epoch,
            step,
            model: &state,
            bank: &bank,
            log: &log,
        });
        if action == HookAction::Stop {
            break;
        }
    }
    if log
        .template_snapshots
        .last()
        .map(|(s, _)| *s != step)
        .unwrap_or(true)
    {
        log.template_snapshots.push((step, bank.clone()));
    }
    Ok(PretrainOutput {
        model: state,
        bank,
        log,
    })
}
