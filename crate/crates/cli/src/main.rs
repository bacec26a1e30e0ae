//! `mvpt` — generate synthetic multi-modal datasets, pre-train with masked
//! cross-modal reconstruction and template distillation, and run downstream
//! fine-tuning and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Parser, Subcommand};

use commands::{CmdError, CmdResult, Ctx, INTERRUPTED};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "mvpt",
    version,
    about = "Multi-modal volumetric pre-training on synthetic 3D studies"
)]
struct Cli {
    /// Run configuration file (TOML; unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override applied to every config section.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker lanes for data generation (training math is single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-modal dataset with train/val/test splits.
    Gen,
    /// Run self-supervised pre-training; writes checkpoints, the run log and
    /// template snapshots.
    Pretrain,
    /// Copy the template trajectory snapshots out of a pretrain directory.
    ExportTemplates {
        /// Pretrain output directory to read from.
        #[arg(long)]
        from: PathBuf,
    },
    /// Fine-tune on the labeled train split and report test metrics.
    Finetune,
    /// Evaluate a fine-tuned checkpoint on a dataset split.
    Eval,
    /// Fine-tune at nested label fractions for scratch and pretrained inits.
    LabelEfficiency,
}

fn load_config(cli: &Cli) -> CmdResult<RunConfig> {
    let Some(path) = &cli.config else {
        return Err(CmdError::Usage(anyhow::anyhow!(
            "--config is required for this command"
        )));
    };
    let mut cfg = RunConfig::load(path).map_err(CmdError::Usage)?;
    cfg.apply_seed(cli.seed);
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CmdResult<()> {
    let ctx = Ctx {
        out: cli.out.clone(),
        seed: cli.seed,
        workers: cli.workers.max(1),
        force: cli.force,
    };
    match &cli.cmd {
        Cmd::Gen => commands::cmd_gen(&load_config(cli)?, &ctx),
        Cmd::Pretrain => commands::cmd_pretrain(&load_config(cli)?, &ctx),
        Cmd::ExportTemplates { from } => commands::cmd_export_templates(from, &ctx),
        Cmd::Finetune => commands::cmd_finetune(&load_config(cli)?, &ctx),
        Cmd::Eval => commands::cmd_eval(&load_config(cli)?, &ctx),
        Cmd::LabelEfficiency => commands::cmd_label_efficiency(&load_config(cli)?, &ctx),
    }
}

extern "C" fn on_sigint(_: libc::c_int) {
    if INTERRUPTED.swap(true, Ordering::SeqCst) {
        // Second interrupt: give up immediately.
        std::process::exit(130);
    }
}

fn main() -> ExitCode {
    unsafe {
        let handler: extern "C" fn(libc::c_int) = on_sigint;
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
