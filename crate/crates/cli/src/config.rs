//! Run configuration: one TOML file with a section per command.
//!
//! Parsing is strict; an unknown key anywhere is an error, so a typo cannot
//! silently fall back to defaults. Every hyperparameter has a named key with
//! its default value, which makes a config diff document every deviation.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mvpt_core::downstream::FinetuneConfig;
use mvpt_core::synthgen::GenConfig;
use mvpt_core::trainer::PretrainConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; individual sections inherit it unless they set their own.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub gen: Option<GenSection>,
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub label_efficiency: Option<LabelEfficiencySection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// Number of studies to generate.
    pub count: usize,
    #[serde(default)]
    pub config: GenConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Dataset directory produced by `gen`.
    pub dataset: String,
    #[serde(default)]
    pub config: PretrainConfig,
    /// Freeze the templates when training finishes.
    #[serde(default = "default_true")]
    pub freeze_templates: bool,
    /// Interval checkpoint cadence in epochs (0 = final only).
    #[serde(default)]
    pub checkpoint_every_epochs: usize,
    /// Train on the train split only (default) or on every study.
    #[serde(default)]
    pub use_all_studies: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub dataset: String,
    /// "scratch" or the path of a pretrain output directory.
    pub init: String,
    /// Template directory; defaults to `<init>/templates_final` for
    /// pretrained inits and zero templates otherwise.
    #[serde(default)]
    pub templates: Option<String>,
    #[serde(default)]
    pub config: FinetuneConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Downstream checkpoint path written by `finetune`.
    pub checkpoint: String,
    pub dataset: String,
    /// Which split to evaluate: "train", "val" or "test".
    #[serde(default = "default_split")]
    pub split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEfficiencySection {
    pub dataset: String,
    /// Pretrain output directory providing the pretrained init + templates.
    #[serde(default)]
    pub pretrain_dir: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Cap on labeled training studies before the fraction split.
    #[serde(default)]
    pub max_train_studies: Option<usize>,
    #[serde(default)]
    pub config: FinetuneConfig,
}

fn default_true() -> bool {
    true
}

fn default_split() -> String {
    "test".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Apply the global/CLI seed to every section that kept its default.
    pub fn apply_seed(&mut self, cli_seed: Option<u64>) {
        let Some(seed) = cli_seed.or(self.seed) else {
            return;
        };
        self.seed = Some(seed);
        if let Some(g) = &mut self.gen {
            g.config.seed = seed;
        }
        if let Some(p) = &mut self.pretrain {
            p.config.seed = seed;
        }
        if let Some(f) = &mut self.finetune {
            f.config.seed = seed;
        }
        if let Some(l) = &mut self.label_efficiency {
            l.config.seed = seed;
        }
    }
}

/// Pick a split's studies out of a loaded dataset.
pub fn select_split<'a>(
    studies: &'a [mvpt_core::volume::Study],
    ids: &[String],
    split_name: &str,
) -> Result<Vec<&'a mvpt_core::volume::Study>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        match studies.iter().find(|s| &s.study_id == id) {
            Some(s) => out.push(s),
            None => bail!("split {split_name} references unknown study {id}"),
        }
    }
    Ok(out)
}
