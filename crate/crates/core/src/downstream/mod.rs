//! Downstream fine-tuning with frozen modality templates.
//!
//! Each step builds two copies of the multi-modal input with different
//! numbers of modalities replaced by their templates, supervises both
//! against the label, and ties their pooled encoder features together with
//! a consistency term. The pretrained single-channel encoder is adapted to
//! M-channel input by replicating its first-layer kernels scaled by 1/M.

pub mod metrics;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::TemplateBank;
use crate::error::{Error, Result};
use crate::losses::{
    ce_grad, consistency_loss, dice_loss_grad, finetune_total, mse_grad,
};
use crate::mask::distill_mask;
use crate::net::layers::{global_avg_pool, global_avg_pool_backward};
use crate::net::{
    config_hash, load_checkpoint, save_checkpoint, Conv3d, Feature, Linear, ModelState,
    NetConfig, Trunk, TrunkTape,
};
use crate::optim::{AdamW, AdamWHyper};
use crate::rng::{chacha, derive_seed};
use crate::stats::pearson;
use crate::trainer::cosine_lr;
use crate::volume::{crop, Dims3, Study, Volume};

pub use metrics::{cls_metrics, dice_score, hd95, ClsMetrics, MetricReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Classification,
}

/// How the two augmented copies choose replaced modalities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    /// m and n drawn uniformly from {0, .., M-1} each step.
    SampleUniform,
    /// Fixed replacement counts for both copies.
    Fixed { m: usize, n: usize },
    /// Single-modality fallback: two template-masked copies of the input.
    UnimodalMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: TaskKind,
    pub replace: ReplaceMode,
    pub lambda_cons: f64,
    pub label_fractions: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Base single-channel architecture; widened to the dataset's modality
    /// count internally.
    pub net: NetConfig,
    pub num_classes: usize,
    /// Masking parameters for the uni-modal fallback mode.
    pub r: usize,
    pub p_star: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Segmentation,
            replace: ReplaceMode::SampleUniform,
            lambda_cons: 0.1,
            label_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            epochs: 30,
            lr: 3e-4,
            weight_decay: 1e-5,
            seed: 0,
            net: NetConfig::default(),
            num_classes: 2,
            r: 8,
            p_star: 0.875,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.in_channels != 1 {
            return Err(Error::Config(
                "finetune base net must be single-channel; widening is automatic".into(),
            ));
        }
        if self.lambda_cons < 0.0 {
            return Err(Error::Config("lambda_cons must be >= 0".into()));
        }
        if self.label_fractions.is_empty() {
            return Err(Error::Config("label_fractions must not be empty".into()));
        }
        let mut prev = 0.0;
        for &f in &self.label_fractions {
            if !(f > prev && f <= 1.0) {
                return Err(Error::Config(format!(
                    "label fractions must be strictly increasing in (0,1], got {:?}",
                    self.label_fractions
                )));
            }
            prev = f;
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.p_star) {
            return Err(Error::Config("p_star outside [0,1]".into()));
        }
        if let ReplaceMode::Fixed { .. } = self.replace {
            // Counts are validated against M when a study is seen.
        }
        Ok(())
    }

    pub fn adamw_hyper(&self) -> AdamWHyper {
        AdamWHyper {
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Identifies the architecture behind a downstream checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamDesc {
    pub net: NetConfig,
    pub task: TaskKind,
    pub num_classes: usize,
}

/// Fit a template volume to the requested dims (center crop when larger).
fn fit_template(template: &Volume, dims: Dims3) -> Result<Volume> {
    let t = template.dims();
    if t == dims {
        return Ok(template.clone());
    }
    if t.d >= dims.d && t.h >= dims.h && t.w >= dims.w {
        let origin = Dims3::new((t.d - dims.d) / 2, (t.h - dims.h) / 2, (t.w - dims.w) / 2);
        return crop(template, origin, dims);
    }
    Err(Error::Shape(format!(
        "template dims {t} smaller than study dims {dims}"
    )))
}

/// Copy of a study with `k` uniformly chosen modalities replaced by their
/// frozen templates.
pub fn replace_with_templates(
    study: &Study,
    bank: &TemplateBank,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Study> {
    if !bank.frozen() {
        return Err(Error::State(
            "template bank must be frozen before downstream use".into(),
        ));
    }
    let m = study.num_modalities();
    if k > m {
        return Err(Error::Param(format!(
            "cannot replace {k} of {m} modalities"
        )));
    }
    let mut indices: Vec<usize> = (0..m).collect();
    indices.shuffle(rng);
    let chosen = &indices[..k];
    let mut modalities = Vec::with_capacity(m);
    for (pos, (id, vol)) in study.modalities().iter().enumerate() {
        let vol = if chosen.contains(&pos) {
            fit_template(bank.template(*id)?, study.dims())?
        } else {
            vol.clone()
        };
        modalities.push((*id, vol));
    }
    Study::new(
        study.study_id.clone(),
        modalities,
        study.seg_label.clone(),
        study.cls_label,
    )
}

/// Uni-modal fallback: partially mask the volume with its template.
pub fn unimodal_template_mask(
    x: &Volume,
    template: &Volume,
    r: usize,
    p_star: f64,
    rng_seed: u64,
) -> Result<Volume> {
    let template = fit_template(template, x.dims())?;
    Ok(distill_mask(x, &template, r, p_star, rng_seed)?.masked)
}

/// Trunk plus a task head; parameters live in `state` (trunk arrays first,
/// then head weight and bias).
pub struct DownstreamModel {
    pub task: TaskKind,
    pub net_cfg: NetConfig,
    pub num_classes: usize,
    trunk: Trunk,
    seg_head: Option<Conv3d>,
    cls_head: Option<Linear>,
    pub state: ModelState,
}

/// How to initialize the trunk for fine-tuning.
pub enum ModelInit<'a> {
    Scratch,
    Pretrained {
        state: &'a ModelState,
        net: &'a NetConfig,
    },
}

struct DsTape {
    input: Feature,
    trunk: TrunkTape,
    pooled: Vec<f64>,
    seg_logits: Option<Feature>,
    cls_logits: Option<Vec<f64>>,
}

impl DownstreamModel {
    /// Build a model for `in_channels`-channel input. Pretrained trunks are
    /// widened by replicating first-layer kernels scaled by 1/M; the head is
    /// always freshly initialized from the seed.
    pub fn new(
        cfg: &FinetuneConfig,
        in_channels: usize,
        init: ModelInit<'_>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::Param("in_channels must be >= 1".into()));
        }
        let net_cfg = NetConfig {
            in_channels,
            ..cfg.net.clone()
        };
        let trunk = Trunk::new(&net_cfg)?;
        let mut rng = chacha(derive_seed(seed, 0xD5));
        let mut params = match init {
            ModelInit::Scratch => trunk.init_params(&mut rng),
            ModelInit::Pretrained { state, net } => {
                if *net
                    != (NetConfig {
                        in_channels: 1,
                        ..net_cfg.clone()
                    })
                {
                    return Err(Error::Config(
                        "pretrained architecture does not match finetune config".into(),
                    ));
                }
                let single = Trunk::new(net)?;
                let n_trunk = single.param_lens().len();
                if state.params.len() < n_trunk {
                    return Err(Error::State("pretrained state too small".into()));
                }
                let mut params: Vec<Vec<f64>> =
                    state.params[..n_trunk].iter().cloned().collect();
                // Widen the first conv: replicate the single-channel kernel
                // into every input channel, scaled by 1/M.
                let k3 = net_cfg.kernel.pow(3);
                let ch0 = net_cfg.stage_channels[0];
                let old = &state.params[0];
                debug_assert_eq!(old.len(), ch0 * k3);
                let mut wide = vec![0.0; ch0 * in_channels * k3];
                for oc in 0..ch0 {
                    for ic in 0..in_channels {
                        for t in 0..k3 {
                            wide[(oc * in_channels + ic) * k3 + t] =
                                old[oc * k3 + t] / in_channels as f64;
                        }
                    }
                }
                params[0] = wide;
                // Burn the scratch draws so head init matches scratch runs.
                let _ = trunk.init_params(&mut rng);
                params
            }
        };
        let (seg_head, cls_head) = match cfg.task {
            TaskKind::Segmentation => {
                let head = Conv3d {
                    in_ch: trunk.out_channels(),
                    out_ch: 1,
                    k: 1,
                    stride: 1,
                    pad: 0,
                    bias: true,
                };
                let bound = 1.0 / (head.fan_in() as f64).sqrt();
                params.push(
                    (0..head.weight_len())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                );
                params.push(vec![0.0; 1]);
                (Some(head), None)
            }
            TaskKind::Classification => {
                let head = Linear {
                    in_dim: net_cfg.bottleneck_channels(),
                    out_dim: cfg.num_classes,
                };
                let bound = 1.0 / (head.in_dim as f64).sqrt();
                params.push(
                    (0..head.weight_len())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                );
                params.push(vec![0.0; cfg.num_classes]);
                (None, Some(head))
            }
        };
        Ok(Self {
            task: cfg.task,
            net_cfg,
            num_classes: cfg.num_classes,
            trunk,
            seg_head,
            cls_head,
            state: ModelState {
                params,
                rng_seed: seed,
            },
        })
    }

    pub fn desc(&self) -> DownstreamDesc {
        DownstreamDesc {
            net: self.net_cfg.clone(),
            task: self.task,
            num_classes: self.num_classes,
        }
    }

    fn n_trunk(&self) -> usize {
        self.trunk.param_lens().len()
    }

    fn forward(&self, input: Feature) -> Result<DsTape> {
        let trunk_tape = self.trunk.forward(&self.state.params, &input)?;
        let pooled = global_avg_pool(trunk_tape.bottleneck());
        let nt = self.n_trunk();
        let seg_logits = match &self.seg_head {
            Some(head) => Some(head.forward(
                trunk_tape.dec_out(),
                &self.state.params[nt],
                Some(&self.state.params[nt + 1]),
            )?),
            None => None,
        };
        let cls_logits = self.cls_head.as_ref().map(|head| {
            head.forward(&pooled, &self.state.params[nt], &self.state.params[nt + 1])
        });
        Ok(DsTape {
            input,
            trunk: trunk_tape,
            pooled,
            seg_logits,
            cls_logits,
        })
    }

    /// Backward pass from head-level gradients plus an extra pooled-feature
    /// gradient (the consistency term), accumulating into `dparams`.
    fn backward(
        &self,
        tape: &DsTape,
        d_seg_logits: Option<&Feature>,
        d_cls_logits: Option<&[f64]>,
        d_pooled_extra: Option<&[f64]>,
        dparams: &mut [Vec<f64>],
    ) -> Result<()> {
        let nt = self.n_trunk();
        let bneck = tape.trunk.bottleneck();
        let mut d_pooled = vec![0.0; bneck.channels];
        if let (Some(head), Some(d_logits)) = (&self.cls_head, d_cls_logits) {
            let (dw, rest) = dparams[nt..].split_first_mut().expect("layout");
            let db = &mut rest[0];
            let dx = head.backward(&tape.pooled, d_logits, &self.state.params[nt], dw, db);
            for (a, b) in d_pooled.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        if let Some(extra) = d_pooled_extra {
            for (a, b) in d_pooled.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let has_pooled = d_pooled.iter().any(|&v| v != 0.0);
        let d_bneck =
            has_pooled.then(|| global_avg_pool_backward(bneck.dims, bneck.channels, &d_pooled));

        let dec_out = tape.trunk.dec_out();
        let d_dec_out = match (&self.seg_head, d_seg_logits) {
            (Some(head), Some(d_logits)) => {
                let (dw, rest) = dparams[nt..].split_first_mut().expect("layout");
                let db = &mut rest[0];
                head.backward(
                    dec_out,
                    d_logits,
                    &self.state.params[nt],
                    dw,
                    Some(db),
                    true,
                )?
                .expect("dx requested")
            }
            _ => Feature::zeros(dec_out.channels, dec_out.dims),
        };
        self.trunk.backward(
            &self.state.params,
            &tape.input,
            &tape.trunk,
            &d_dec_out,
            d_bneck.as_ref(),
            &mut dparams[..self.n_trunk()],
            false,
        )?;
        Ok(())
    }

    /// Segmentation probabilities (sigmoid of the head logits).
    pub fn predict_seg_probs(&self, study: &Study) -> Result<Vec<f64>> {
        let tape = self.forward(stack_modalities(study)?)?;
        let logits = tape.seg_logits.as_ref().ok_or_else(|| {
            Error::State("model has no segmentation head".into())
        })?;
        Ok(logits.data.iter().map(|&v| sigmoid(v)).collect())
    }

    /// Positive-class probability for binary classification.
    pub fn predict_cls_score(&self, study: &Study) -> Result<f64> {
        let tape = self.forward(stack_modalities(study)?)?;
        let logits = tape
            .cls_logits
            .as_ref()
            .ok_or_else(|| Error::State("model has no classification head".into()))?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps[1] / z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, config_hash(&self.desc()), &self.state)
    }

    /// Load parameters saved by [`DownstreamModel::save`] into a model built
    /// from the same config and channel count.
    pub fn load(
        cfg: &FinetuneConfig,
        in_channels: usize,
        path: &Path,
    ) -> Result<Self> {
        let mut model = Self::new(cfg, in_channels, ModelInit::Scratch, 0)?;
        let state = load_checkpoint(path, config_hash(&model.desc()))?;
        let lens: Vec<usize> = model.state.params.iter().map(|p| p.len()).collect();
        if state.params.len() != lens.len()
            || state.params.iter().zip(&lens).any(|(p, &l)| p.len() != l)
        {
            return Err(Error::Format(
                "checkpoint arrays do not match downstream model layout".into(),
            ));
        }
        model.state = state;
        Ok(model)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel-stack the study's modalities in registry order.
pub fn stack_modalities(study: &Study) -> Result<Feature> {
    let dims = study.dims();
    let mut data = Vec::with_capacity(study.num_modalities() * dims.voxels());
    for (_, vol) in study.modalities() {
        data.extend(vol.data().iter().map(|&v| v as f64));
    }
    Feature::from_data(study.num_modalities(), dims, data)
}

/// One fine-tuning step's loss record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub l_sl1: f64,
    pub l_sl2: f64,
    pub l_cons: f64,
    pub total: f64,
}

fn replace_counts(
    mode: ReplaceMode,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    match mode {
        ReplaceMode::SampleUniform => {
            // Uniform over {0, .., M-1}: at least one real modality remains.
            Ok((rng.random_range(0..m), rng.random_range(0..m)))
        }
        ReplaceMode::Fixed { m: a, n: b } => {
            if a > m || b > m {
                return Err(Error::Param(format!(
                    "fixed replace counts ({a}, {b}) exceed {m} modalities"
                )));
            }
            Ok((a, b))
        }
        ReplaceMode::UnimodalMask => Err(Error::Param(
            "unimodal mask mode does not use replace counts".into(),
        )),
    }
}

/// Build the two augmented copies of a study as stacked features.
fn build_copies(
    study: &Study,
    bank: &TemplateBank,
    cfg: &FinetuneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Feature, Feature)> {
    if !bank.frozen() {
        return Err(Error::State(
            "template bank must be frozen before downstream use".into(),
        ));
    }
    match cfg.replace {
        ReplaceMode::UnimodalMask => {
            if study.num_modalities() != 1 {
                return Err(Error::Param(format!(
                    "unimodal mask mode needs single-modality studies, got {}",
                    study.num_modalities()
                )));
            }
            let (id, vol) = &study.modalities()[0];
            let template = bank.template(*id)?;
            let r = crate::trainer::effective_r(cfg.r, study.dims().min_dim());
            let a = unimodal_template_mask(vol, template, r, cfg.p_star, rng.random())?;
            let b = unimodal_template_mask(vol, template, r, cfg.p_star, rng.random())?;
            let to_feat = |v: &Volume| Feature::from_data(1, v.dims(), v.to_f64());
            Ok((to_feat(&a)?, to_feat(&b)?))
        }
        mode => {
            let (m_count, n_count) = replace_counts(mode, study.num_modalities(), rng)?;
            let a = replace_with_templates(study, bank, m_count, rng)?;
            let b = replace_with_templates(study, bank, n_count, rng)?;
            Ok((stack_modalities(&a)?, stack_modalities(&b)?))
        }
    }
}

/// Supervised loss and head-level gradient for one copy.
fn task_loss(
    model: &DownstreamModel,
    tape: &DsTape,
    study: &Study,
) -> Result<(f64, Option<Feature>, Option<Vec<f64>>)> {
    match model.task {
        TaskKind::Segmentation => {
            let target: Vec<f64> = study
                .seg_label
                .as_ref()
                .ok_or_else(|| Error::Param(format!("study {} has no seg label", study.study_id)))?
                .to_f64();
            let logits = tape.seg_logits.as_ref().expect("segmentation head");
            let probs: Vec<f64> = logits.data.iter().map(|&v| sigmoid(v)).collect();
            let (loss, d_prob) = dice_loss_grad(&probs, &target);
            let d_logits: Vec<f64> = d_prob
                .iter()
                .zip(&probs)
                .map(|(g, p)| g * p * (1.0 - p))
                .collect();
            let d = Feature::from_data(1, logits.dims, d_logits)?;
            Ok((loss, Some(d), None))
        }
        TaskKind::Classification => {
            let class = study
                .cls_label
                .ok_or_else(|| Error::Param(format!("study {} has no cls label", study.study_id)))?
                as usize;
            if class >= model.num_classes {
                return Err(Error::Param(format!(
                    "class {class} out of range for {} classes",
                    model.num_classes
                )));
            }
            let logits = tape.cls_logits.as_ref().expect("classification head");
            let (loss, d_logits) = ce_grad(logits, class)?;
            Ok((loss, None, Some(d_logits)))
        }
    }
}

/// One optimization step on a single labeled study.
pub fn finetune_step(
    model: &mut DownstreamModel,
    opt: &mut AdamW,
    study: &Study,
    bank: &TemplateBank,
    cfg: &FinetuneConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneRecord> {
    if study.num_modalities() != model.net_cfg.in_channels {
        return Err(Error::Shape(format!(
            "study {} has {} modalities, model expects {}",
            study.study_id,
            study.num_modalities(),
            model.net_cfg.in_channels
        )));
    }
    let (input_a, input_b) = build_copies(study, bank, cfg, rng)?;
    let tape_a = model.forward(input_a)?;
    let tape_b = model.forward(input_b)?;

    let (l_sl1, d_seg_a, d_cls_a) = task_loss(model, &tape_a, study)?;
    let (l_sl2, d_seg_b, d_cls_b) = task_loss(model, &tape_b, study)?;

    // Consistency between pooled encoder features of the two copies.
    let l_cons = consistency_loss(&tape_a.pooled, &tape_b.pooled)?;
    let (_, d_pa_raw) = mse_grad(&tape_a.pooled, &tape_b.pooled)?;
    let d_pa: Vec<f64> = d_pa_raw.iter().map(|g| g * cfg.lambda_cons).collect();
    let d_pb: Vec<f64> = d_pa.iter().map(|g| -g).collect();

    let total = finetune_total(l_sl1, l_sl2, l_cons, cfg.lambda_cons);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "fine-tuning loss diverged on study {}",
            study.study_id
        )));
    }

    let mut dparams = model.state.zeros_like();
    model.backward(
        &tape_a,
        d_seg_a.as_ref(),
        d_cls_a.as_deref(),
        Some(&d_pa),
        &mut dparams,
    )?;
    model.backward(
        &tape_b,
        d_seg_b.as_ref(),
        d_cls_b.as_deref(),
        Some(&d_pb),
        &mut dparams,
    )?;
    opt.step(&mut model.state.params, &dparams, lr)?;

    Ok(FinetuneRecord {
        l_sl1,
        l_sl2,
        l_cons,
        total,
    })
}

/// Fine-tune a model over the labeled studies.
pub fn run_finetune(
    cfg: &FinetuneConfig,
    init: ModelInit<'_>,
    train: &[Study],
    bank: &TemplateBank,
    seed: u64,
) -> Result<(DownstreamModel, Vec<FinetuneRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Param("no training studies".into()));
    }
    let in_channels = train[0].num_modalities();
    let mut model = DownstreamModel::new(cfg, in_channels, init, seed)?;
    let mut opt = AdamW::for_params(cfg.adamw_hyper(), &model.state.params);
    let mut rng = chacha(derive_seed(seed, 0xF17E));
    let total_steps = cfg.epochs * train.len();
    let mut records = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let lr = cosine_lr(step, total_steps, cfg.lr);
            records.push(finetune_step(
                &mut model,
                &mut opt,
                &train[idx],
                bank,
                cfg,
                lr,
                &mut rng,
            )?);
            step += 1;
        }
    }
    Ok((model, records))
}

/// Evaluate a model on held-out studies.
pub fn evaluate(model: &DownstreamModel, studies: &[Study]) -> Result<MetricReport> {
    if studies.is_empty() {
        return Err(Error::Param("no studies to evaluate".into()));
    }
    match model.task {
        TaskKind::Segmentation => {
            let mut dices = Vec::with_capacity(studies.len());
            let mut hd95s = Vec::new();
            let mut missing = 0usize;
            for study in studies {
                let target = study.seg_label.as_ref().ok_or_else(|| {
                    Error::Param(format!("study {} has no seg label", study.study_id))
                })?;
                let probs = model.predict_seg_probs(study)?;
                let pred = Volume::new(
                    study.dims(),
                    probs
                        .iter()
                        .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
                        .collect(),
                )?;
                dices.push(dice_score(&pred, target)?);
                match hd95(&pred, target)? {
                    Some(h) => hd95s.push(h),
                    None => missing += 1,
                }
            }
            let report = MetricReport {
                task: "segmentation".into(),
                sample_count: studies.len(),
                dice_mean: Some(dices.iter().sum::<f64>() / dices.len() as f64),
                hd95_mean: (!hd95s.is_empty())
                    .then(|| hd95s.iter().sum::<f64>() / hd95s.len() as f64),
                hd95_missing: missing,
                acc: None,
                auc: None,
                f1: None,
            };
            report.validate()?;
            Ok(report)
        }
        TaskKind::Classification => {
            let mut scores = Vec::with_capacity(studies.len());
            for study in studies {
                let label = study.cls_label.ok_or_else(|| {
                    Error::Param(format!("study {} has no cls label", study.study_id))
                })?;
                scores.push((model.predict_cls_score(study)?, (label != 0) as u32));
            }
            let m = cls_metrics(&scores)?;
            let report = MetricReport {
                task: "classification".into(),
                sample_count: studies.len(),
                dice_mean: None,
                hd95_mean: None,
                hd95_missing: 0,
                acc: Some(m.acc),
                auc: Some(m.auc),
                f1: Some(m.f1),
            };
            report.validate()?;
            Ok(report)
        }
    }
}

/// One (init, fraction) cell of the label-efficiency table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelEfficiencyRow {
    pub init: String,
    pub fraction: f64,
    pub n_train: usize,
    /// "dice" for segmentation, "auc" for classification.
    pub metric: String,
    pub mean: f64,
    pub per_seed: Vec<f64>,
}

pub fn label_efficiency_tsv(rows: &[LabelEfficiencyRow]) -> String {
    let mut out = String::from("init\tfraction\tn_train\tmetric\tmean\tper_seed\n");
    for r in rows {
        let seeds = r
            .per_seed
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.init, r.fraction, r.n_train, r.metric, r.mean, seeds
        ));
    }
    out
}

/// Nested-subset training sizes: each larger fraction's subset contains the
/// smaller one (a shuffled prefix).
pub fn nested_subsets<'a>(
    train: &'a [Study],
    fractions: &[f64],
    seed: u64,
) -> Vec<(f64, Vec<&'a Study>)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = chacha(derive_seed(seed, 0x5E7));
    order.shuffle(&mut rng);
    fractions
        .iter()
        .map(|&f| {
            let n = ((f * train.len() as f64).round() as usize)
                .clamp(1, train.len());
            (f, order[..n].iter().map(|&i| &train[i]).collect())
        })
        .collect()
}

/// Fine-tune and evaluate at every label fraction for both inits.
pub fn run_label_efficiency(
    cfg: &FinetuneConfig,
    pretrained: Option<(&ModelState, &NetConfig)>,
    train: &[Study],
    test: &[Study],
    bank: &TemplateBank,
    seeds: &[u64],
) -> Result<Vec<LabelEfficiencyRow>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Param("at least one seed required".into()));
    }
    let metric_name = match cfg.task {
        TaskKind::Segmentation => "dice",
        TaskKind::Classification => "auc",
    };
    let subsets = nested_subsets(train, &cfg.label_fractions, cfg.seed);
    let mut rows = Vec::new();
    let inits: Vec<&str> = if pretrained.is_some() {
        vec!["scratch", "pretrained"]
    } else {
        vec!["scratch"]
    };
    // The scratch arm is the plain supervised baseline: no templates exist
    // without pre-training, so both copies stay unreplaced (m = n = 0).
    let scratch_cfg = FinetuneConfig {
        replace: ReplaceMode::Fixed { m: 0, n: 0 },
        ..cfg.clone()
    };
    for init_name in inits {
        for (fraction, subset) in &subsets {
            let subset_owned: Vec<Study> = subset.iter().map(|s| (*s).clone()).collect();
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let (init, run_cfg) = match init_name {
                    "pretrained" => {
                        let (state, net) = pretrained.expect("checked");
                        (ModelInit::Pretrained { state, net }, cfg)
                    }
                    _ => (ModelInit::Scratch, &scratch_cfg),
                };
                let (model, _) = run_finetune(run_cfg, init, &subset_owned, bank, seed)?;
                let report = evaluate(&model, test)?;
                let value = match cfg.task {
                    TaskKind::Segmentation => report.dice_mean.expect("segmentation"),
                    TaskKind::Classification => report.auc.expect("classification"),
                };
                per_seed.push(value);
            }
            rows.push(LabelEfficiencyRow {
                init: init_name.to_string(),
                fraction: *fraction,
                n_train: subset.len(),
                metric: metric_name.to_string(),
                mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed,
            });
        }
    }
    Ok(rows)
}

/// Pearson correlation between a template and the per-modality population
/// mean volume over `studies` (structure-capture diagnostic).
pub fn template_population_correlation(
    bank: &TemplateBank,
    studies: &[Study],
    modality_id: usize,
) -> Result<f64> {
    let dims = bank.dims();
    let mut mean = vec![0.0f64; dims.voxels()];
    let mut count = 0usize;
    for study in studies {
        if let Some(vol) = study.volume(modality_id) {
            if vol.dims() != dims {
                return Err(Error::Shape(format!(
                    "study {} dims {} != template dims {dims}",
                    study.study_id,
                    vol.dims()
                )));
            }
            for (m, v) in mean.iter_mut().zip(vol.data()) {
                *m += *v as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Param(format!(
            "no study carries modality {modality_id}"
        )));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let template = bank.template(modality_id)?.to_f64();
    Ok(pearson(&template, &mean))
}
