//! Command implementations and run-manifest bookkeeping.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mvpt_core::distill::{export_bank, TemplateBank};
use mvpt_core::downstream::{
    evaluate, label_efficiency_tsv, run_finetune, run_label_efficiency, DownstreamModel,
    MetricReport, ModelInit,
};
use mvpt_core::mvpv::{load_dataset, load_volume, save_dataset, save_volume, Splits};
use mvpt_core::net::{config_hash, load_checkpoint_for, save_checkpoint, ModelState, NetConfig, Network};
use mvpt_core::synthgen::{gen_study, split_sizes};
use mvpt_core::trainer::{run_pretrain_with_hook, HookAction};
use mvpt_core::volume::{ModalityRegistry, Study};

use crate::config::{
    select_split, EvalSection, FinetuneSection, LabelEfficiencySection, PretrainSection,
    RunConfig,
};

/// Set by the SIGINT handler; the pre-training hook stops cleanly on it.
pub static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// Errors are split so `main` can map them to the documented exit codes
/// (1 = usage, 2 = runtime failure).
pub enum CmdError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

fn usage<T>(e: impl Into<anyhow::Error>) -> CmdResult<T> {
    Err(CmdError::Usage(e.into()))
}

trait IntoRuntime<T> {
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> IntoRuntime<T> for std::result::Result<T, E> {
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| CmdError::Runtime(e.into()))
    }
}

pub struct Ctx {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub force: bool,
}

impl Ctx {
    fn out_dir(&self) -> CmdResult<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => usage(anyhow!("--out is required for this command")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    code_version: String,
    seed: Option<u64>,
    workers: usize,
    started_at_unix: u64,
    finished_at_unix: Option<u64>,
    out_dir: String,
    config: serde_json::Value,
    outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    fn start(command: &str, ctx: &Ctx, out: &Path, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: ctx.seed,
            workers: ctx.workers,
            started_at_unix: now_unix(),
            finished_at_unix: None,
            out_dir: out.display().to_string(),
            config,
            outputs: Vec::new(),
        }
    }

    fn write(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(out.join("run_manifest.json"), text)?;
        Ok(())
    }

    fn finish(mut self, out: &Path, outputs: Vec<String>) -> Result<()> {
        self.finished_at_unix = Some(now_unix());
        self.outputs = outputs;
        self.write(out)
    }
}

/// Refuse to write into an existing non-empty directory unless forced.
fn prepare_out(out: &Path, force: bool) -> CmdResult<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            return usage(anyhow!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            ));
        }
    }
    std::fs::create_dir_all(out).runtime()?;
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn require_section<T>(section: Option<T>, name: &str) -> CmdResult<T> {
    match section {
        Some(s) => Ok(s),
        None => usage(anyhow!("config has no [{name}] section")),
    }
}

fn load_dataset_checked(
    dir: &str,
) -> CmdResult<(ModalityRegistry, Vec<Study>, Splits)> {
    let path = Path::new(dir);
    if !path.join("manifest.json").exists() {
        return usage(anyhow!("dataset manifest not found at {}", path.display()));
    }
    load_dataset(path).runtime()
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig, ctx: &Ctx) -> CmdResult<()> {
    let section = require_section(cfg.gen.clone(), "gen")?;
    let out = ctx.out_dir()?.to_path_buf();
    prepare_out(&out, ctx.force)?;
    section.config.validate().map_err(|e| CmdError::Usage(e.into()))?;
    let manifest = RunManifest::start(
        "gen",
        ctx,
        &out,
        serde_json::to_value(&section).runtime()?,
    );
    manifest.write(&out).runtime()?;

    let n = section.count;
    let gen_cfg = &section.config;
    // Studies are independent; worker lanes split the index range and the
    // results are identical for any worker count.
    let studies: Vec<Study> = if ctx.workers > 1 && n > 1 {
        let mut slots: Vec<Option<Study>> = Vec::with_capacity(n);
        slots.resize_with(n, || None);
        let chunk = n.div_ceil(ctx.workers);
        std::thread::scope(|scope| -> mvpt_core::Result<()> {
            let mut handles = Vec::new();
            for (w, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
                let start = w * chunk;
                handles.push(scope.spawn(move || -> mvpt_core::Result<()> {
                    for (off, slot) in slot_chunk.iter_mut().enumerate() {
                        *slot = Some(gen_study(gen_cfg, start + off)?);
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("generator thread panicked")?;
            }
            Ok(())
        })
        .runtime()?;
        slots.into_iter().map(|s| s.expect("filled")).collect()
    } else {
        (0..n)
            .map(|i| gen_study(gen_cfg, i))
            .collect::<mvpt_core::Result<_>>()
            .runtime()?
    };

    let registry = gen_cfg.registry().runtime()?;
    let (n_train, n_val, _) = split_sizes(n);
    let ids: Vec<String> = studies.iter().map(|s| s.study_id.clone()).collect();
    let splits = Splits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    save_dataset(&out, &registry, &studies, &splits).runtime()?;
    manifest
        .finish(&out, vec!["manifest.json".into(), "studies/".into()])
        .runtime()?;
    println!(
        "gen: wrote {n} studies ({} train / {} val / {} test) to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

const BANK_REGISTRY_FILE: &str = "registry.json";

fn save_bank(bank: &TemplateBank, registry: &ModalityRegistry, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for id in 0..bank.len() {
        let name = registry
            .name(id)
            .ok_or_else(|| anyhow!("registry smaller than bank"))?;
        save_volume(bank.template(id)?, &dir.join(format!("{name}.mvpv")))?;
    }
    std::fs::write(
        dir.join(BANK_REGISTRY_FILE),
        serde_json::to_string_pretty(registry.names())?,
    )?;
    Ok(())
}

fn load_bank(dir: &Path) -> Result<(TemplateBank, Vec<String>)> {
    let names: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.join(BANK_REGISTRY_FILE))?)?;
    let mut templates = Vec::with_capacity(names.len());
    for name in &names {
        templates.push(load_volume(&dir.join(format!("{name}.mvpv")))?);
    }
    Ok((TemplateBank::from_templates(templates, true)?, names))
}

pub fn cmd_pretrain(cfg: &RunConfig, ctx: &Ctx) -> CmdResult<()> {
    let section = require_section(cfg.pretrain.clone(), "pretrain")?;
    let out = ctx.out_dir()?.to_path_buf();
    prepare_out(&out, ctx.force)?;
    section.config.validate().map_err(|e| CmdError::Usage(e.into()))?;
    let manifest = RunManifest::start(
        "pretrain",
        ctx,
        &out,
        serde_json::to_value(&section).runtime()?,
    );
    manifest.write(&out).runtime()?;

    let (registry, studies, splits) = load_dataset_checked(&section.dataset)?;
    let pool: Vec<Study> = if section.use_all_studies {
        studies
    } else {
        select_split(&studies, &splits.train, "train")
            .map_err(CmdError::Usage)?
            .into_iter()
            .cloned()
            .collect()
    };
    if pool.is_empty() {
        return usage(anyhow!("no studies to pretrain on"));
    }

    let net = Network::new(section.config.net.clone()).runtime()?;
    let ckpt_hash = config_hash(&net.cfg);
    let every = section.checkpoint_every_epochs;
    let out_for_hook = out.clone();
    let mut hook_error: Option<anyhow::Error> = None;
    let output = run_pretrain_with_hook(&section.config, &registry, &pool, |ctx_e| {
        if every > 0 && (ctx_e.epoch + 1) % every == 0 {
            let path = out_for_hook.join(format!("model_epoch_{:04}.mvpc", ctx_e.epoch + 1));
            if let Err(e) = save_checkpoint(&path, ckpt_hash, ctx_e.model) {
                hook_error = Some(e.into());
                return HookAction::Stop;
            }
        }
        if INTERRUPTED.load(Ordering::SeqCst) {
            eprintln!("interrupt received; finishing epoch {} and writing a final checkpoint", ctx_e.epoch);
            return HookAction::Stop;
        }
        HookAction::Continue
    })
    .runtime()?;
    if let Some(e) = hook_error {
        return Err(CmdError::Runtime(e));
    }

    let mut bank = output.bank;
    if section.freeze_templates {
        bank.freeze();
    }

    let model_path = out.join("model_final.mvpc");
    save_checkpoint(&model_path, ckpt_hash, &output.model).runtime()?;
    std::fs::write(out.join("runlog.tsv"), output.log.to_tsv()).runtime()?;

    // Template trajectory snapshots plus the final bank.
    for (step, snapshot) in &output.log.template_snapshots {
        export_bank(snapshot, &registry, &out, *step).runtime()?;
    }
    save_bank(&bank, &registry, &out.join("templates_final")).runtime()?;

    let ckpt_sha = sha256_hex(&model_path).runtime()?;
    let mut summary = output.log.summary_json();
    summary["checkpoint_sha256"] = serde_json::Value::String(ckpt_sha.clone());
    std::fs::write(
        out.join("runlog_summary.json"),
        serde_json::to_string_pretty(&summary).runtime()?,
    )
    .runtime()?;

    manifest
        .finish(
            &out,
            vec![
                "model_final.mvpc".into(),
                "runlog.tsv".into(),
                "runlog_summary.json".into(),
                "templates/".into(),
                "templates_final/".into(),
            ],
        )
        .runtime()?;
    let last = output.log.records.last();
    println!(
        "pretrain: {} steps, final L_SSL {}, checkpoint sha256 {ckpt_sha}",
        output.log.records.len(),
        last.map(|r| r.l_ssl.to_string()).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// export-templates
// ---------------------------------------------------------------------------

pub fn cmd_export_templates(from: &Path, ctx: &Ctx) -> CmdResult<()> {
    let out = ctx.out_dir()?.to_path_buf();
    let manifest_src = from.join("manifest.tsv");
    if !manifest_src.exists() {
        return usage(anyhow!(
            "no template manifest at {} (expected a pretrain output directory)",
            manifest_src.display()
        ));
    }
    prepare_out(&out, ctx.force)?;
    let manifest_text = std::fs::read_to_string(&manifest_src).runtime()?;
    let mut copied = 0usize;
    for line in manifest_text.lines().skip(1) {
        let mut cols = line.split('\t');
        let (Some(_), Some(_), Some(rel)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(CmdError::Runtime(anyhow!("malformed manifest line: {line}")));
        };
        let src = from.join(rel);
        let dst = out.join(rel);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).runtime()?;
        }
        std::fs::copy(&src, &dst)
            .with_context(|| format!("copying {}", src.display()))
            .runtime()?;
        copied += 1;
    }
    std::fs::copy(&manifest_src, out.join("manifest.tsv")).runtime()?;
    println!(
        "export-templates: copied {copied} snapshots from {} to {}",
        from.display(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

struct PretrainArtifacts {
    state: ModelState,
    net: NetConfig,
    templates_dir: PathBuf,
}

fn load_pretrain_artifacts(dir: &Path) -> Result<PretrainArtifacts> {
    let manifest_path = dir.join("run_manifest.json");
    let manifest: RunManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .with_context(|| format!("missing {}", manifest_path.display()))?,
    )?;
    let section: PretrainSection = serde_json::from_value(manifest.config)
        .context("pretrain manifest has an unexpected config shape")?;
    let net = section.config.net;
    let network = Network::new(net.clone())?;
    let state = load_checkpoint_for(&dir.join("model_final.mvpc"), &network)?;
    Ok(PretrainArtifacts {
        state,
        net,
        templates_dir: dir.join("templates_final"),
    })
}

/// Resolve the init and the frozen template bank for downstream commands.
fn resolve_init_and_bank(
    section: &FinetuneSection,
    registry: &ModalityRegistry,
    dims: mvpt_core::volume::Dims3,
) -> Result<(Option<PretrainArtifacts>, TemplateBank)> {
    let artifacts = if section.init == "scratch" {
        None
    } else {
        Some(load_pretrain_artifacts(Path::new(&section.init))?)
    };
    let bank_dir = section
        .templates
        .clone()
        .map(PathBuf::from)
        .or_else(|| artifacts.as_ref().map(|a| a.templates_dir.clone()));
    let bank = match bank_dir {
        Some(dir) => {
            let (bank, names) = load_bank(&dir)?;
            if names != registry.names() {
                bail!(
                    "template registry {names:?} does not match dataset modalities {:?}",
                    registry.names()
                );
            }
            bank
        }
        None => {
            // Scratch runs without templates: zero bank, frozen.
            let mut bank = mvpt_core::distill::init_bank(registry, dims);
            bank.freeze();
            bank
        }
    };
    Ok((artifacts, bank))
}

pub fn cmd_finetune(cfg: &RunConfig, ctx: &Ctx) -> CmdResult<()> {
    let section = require_section(cfg.finetune.clone(), "finetune")?;
    let out = ctx.out_dir()?.to_path_buf();
    prepare_out(&out, ctx.force)?;
    section.config.validate().map_err(|e| CmdError::Usage(e.into()))?;
    let manifest = RunManifest::start(
        "finetune",
        ctx,
        &out,
        serde_json::to_value(&section).runtime()?,
    );
    manifest.write(&out).runtime()?;

    let (registry, studies, splits) = load_dataset_checked(&section.dataset)?;
    let train: Vec<Study> = select_split(&studies, &splits.train, "train")
        .map_err(CmdError::Usage)?
        .into_iter()
        .cloned()
        .collect();
    let test: Vec<Study> = select_split(&studies, &splits.test, "test")
        .map_err(CmdError::Usage)?
        .into_iter()
        .cloned()
        .collect();
    if train.is_empty() || test.is_empty() {
        return usage(anyhow!("finetune needs non-empty train and test splits"));
    }

    let (artifacts, bank) =
        resolve_init_and_bank(&section, &registry, train[0].dims()).map_err(CmdError::Usage)?;
    let init = match &artifacts {
        Some(a) => ModelInit::Pretrained {
            state: &a.state,
            net: &a.net,
        },
        None => ModelInit::Scratch,
    };
    let (model, records) =
        run_finetune(&section.config, init, &train, &bank, section.config.seed).runtime()?;
    let report = evaluate(&model, &test).runtime()?;

    let model_path = out.join("model_final.mvpc");
    model.save(&model_path).runtime()?;
    write_report(&out, &report).runtime()?;
    let mut records_tsv = String::from("step\tl_sl1\tl_sl2\tl_cons\ttotal\n");
    for (i, r) in records.iter().enumerate() {
        records_tsv.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\n",
            r.l_sl1, r.l_sl2, r.l_cons, r.total
        ));
    }
    std::fs::write(out.join("records.tsv"), records_tsv).runtime()?;
    manifest
        .finish(
            &out,
            vec![
                "model_final.mvpc".into(),
                "metrics.json".into(),
                "metrics.tsv".into(),
                "records.tsv".into(),
            ],
        )
        .runtime()?;
    print_report(&report);
    Ok(())
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(out.join("metrics.tsv"), report.to_tsv())?;
    Ok(())
}

fn print_report(report: &MetricReport) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{}: samples {}  dice {}  hd95 {} (missing {})  acc {}  auc {}  f1 {}",
        report.task,
        report.sample_count,
        fmt(report.dice_mean),
        fmt(report.hd95_mean),
        report.hd95_missing,
        fmt(report.acc),
        fmt(report.auc),
        fmt(report.f1),
    );
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(cfg: &RunConfig, ctx: &Ctx) -> CmdResult<()> {
    let section: EvalSection = require_section(cfg.eval.clone(), "eval")?;
    let ft = require_section(cfg.finetune.clone(), "finetune")?;
    let (_registry, studies, splits) = load_dataset_checked(&section.dataset)?;
    let ids = match section.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return usage(anyhow!("unknown split {other:?}")),
    };
    let subset: Vec<Study> = select_split(&studies, ids, &section.split)
        .map_err(CmdError::Usage)?
        .into_iter()
        .cloned()
        .collect();
    if subset.is_empty() {
        return usage(anyhow!("split {:?} is empty", section.split));
    }
    let ckpt = Path::new(&section.checkpoint);
    if !ckpt.exists() {
        return usage(anyhow!("checkpoint not found: {}", ckpt.display()));
    }
    let in_channels = subset[0].num_modalities();
    let model = DownstreamModel::load(&ft.config, in_channels, ckpt).runtime()?;
    let report = evaluate(&model, &subset).runtime()?;
    if let Some(out) = &ctx.out {
        prepare_out(out, ctx.force)?;
        write_report(out, &report).runtime()?;
    }
    print_report(&report);
    Ok(())
}

// ---------------------------------------------------------------------------
// label-efficiency
// ---------------------------------------------------------------------------

pub fn cmd_label_efficiency(cfg: &RunConfig, ctx: &Ctx) -> CmdResult<()> {
    let section: LabelEfficiencySection =
        require_section(cfg.label_efficiency.clone(), "label_efficiency")?;
    let out = ctx.out_dir()?.to_path_buf();
    prepare_out(&out, ctx.force)?;
    section.config.validate().map_err(|e| CmdError::Usage(e.into()))?;
    let manifest = RunManifest::start(
        "label-efficiency",
        ctx,
        &out,
        serde_json::to_value(&section).runtime()?,
    );
    manifest.write(&out).runtime()?;

    let (registry, studies, splits) = load_dataset_checked(&section.dataset)?;
    let mut train: Vec<Study> = select_split(&studies, &splits.train, "train")
        .map_err(CmdError::Usage)?
        .into_iter()
        .cloned()
        .collect();
    if let Some(cap) = section.max_train_studies {
        train.truncate(cap);
    }
    let test: Vec<Study> = select_split(&studies, &splits.test, "test")
        .map_err(CmdError::Usage)?
        .into_iter()
        .cloned()
        .collect();
    if train.is_empty() || test.is_empty() {
        return usage(anyhow!("label efficiency needs non-empty train and test splits"));
    }

    let artifacts = match &section.pretrain_dir {
        Some(dir) => Some(load_pretrain_artifacts(Path::new(dir)).map_err(CmdError::Usage)?),
        None => None,
    };
    let bank = match &artifacts {
        Some(a) => load_bank(&a.templates_dir).map_err(CmdError::Usage)?.0,
        None => {
            let mut b = mvpt_core::distill::init_bank(&registry, train[0].dims());
            b.freeze();
            b
        }
    };
    let pretrained = artifacts.as_ref().map(|a| (&a.state, &a.net));
    let rows = run_label_efficiency(
        &section.config,
        pretrained,
        &train,
        &test,
        &bank,
        &section.seeds,
    )
    .runtime()?;
    let tsv = label_efficiency_tsv(&rows);
    std::fs::write(out.join("curve.tsv"), &tsv).runtime()?;
    manifest
        .finish(&out, vec!["curve.tsv".into()])
        .runtime()?;
    print!("{tsv}");
    Ok(())
}
