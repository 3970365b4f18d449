use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fssam2::data::{make_folds, FoldSpec, SamplerKind, Similarity};
use fssam2::eval::EvalMode;
use fssam2::{ModelConfig, Strategy, StrategyRanks, SyntheticConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Flags;

/// Evaluation protocol selected with `--mode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standard,
    Identity,
    /// Standard evaluation on scenes with the other background distribution.
    Shift,
}

impl Mode {
    pub fn eval_mode(self) -> EvalMode {
        match self {
            Mode::Identity => EvalMode::Identity,
            Mode::Standard | Mode::Shift => EvalMode::Standard,
        }
    }
}

/// Everything a command needs. Loaded from `--config`, then overridden by
/// flags. `seed` drives model initialisation, episode streams and dataset
/// synthesis; the nested `seed` keys are overwritten with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    /// Dataset root in the on-disk layout; synthetic episodes when absent.
    pub data: Option<PathBuf>,
    pub sampler: SamplerKind,
    /// Relation between supports and query for synthetic meta-training and
    /// evaluation episodes.
    pub similarity: Similarity,
    pub n_folds: usize,
    pub fold: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub ranks: StrategyRanks,
    pub ckpt: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: Mode,
    pub jobs: usize,
    pub episodes: usize,
    /// Images per class written by `synth`.
    pub images_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            synthetic: SyntheticConfig {
                image_size: model.image_size,
                ..Default::default()
            },
            model,
            train: TrainConfig::default(),
            data: None,
            sampler: SamplerKind::QueryFirst,
            similarity: Similarity::Independent,
            n_folds: 4,
            fold: 0,
            k: 1,
            seed: 0,
            strategy: Strategy::LoraEncMem,
            ranks: StrategyRanks::default(),
            ckpt: None,
            out: PathBuf::from("runs"),
            mode: Mode::Standard,
            jobs: 0,
            episodes: 1000,
            images_per_class: 20,
        }
    }
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> anyhow::Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| crate::missing_input(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| crate::usage(format!("invalid config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = flags.fold {
            cfg.fold = v;
        }
        if let Some(v) = flags.k {
            cfg.k = v;
        }
        if let Some(v) = flags.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = &flags.ckpt {
            cfg.ckpt = Some(v.clone());
        }
        if let Some(v) = &flags.out {
            cfg.out = v.clone();
        }
        if let Some(v) = flags.mode {
            cfg.mode = v;
        }
        if let Some(v) = flags.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = flags.episodes {
            cfg.episodes = v;
        }
        cfg.train.seed = cfg.seed;
        cfg.synthetic.seed = cfg.seed;
        cfg.validate().map_err(|e| crate::usage(format!("{e:#}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.data.is_none() && self.synthetic.image_size != self.model.image_size {
            bail!(
                "synthetic image size {} differs from the model's {}",
                self.synthetic.image_size,
                self.model.image_size
            );
        }
        if self.k == 0 {
            bail!("K must be at least 1");
        }
        if self.fold >= self.n_folds {
            bail!("fold {} out of range for {} folds", self.fold, self.n_folds);
        }
        Ok(())
    }

    pub fn folds(&self) -> anyhow::Result<FoldSpec> {
        Ok(make_folds(&self.synthetic.class_ids(), self.n_folds)?)
    }

    pub fn ckpt(&self) -> anyhow::Result<&Path> {
        match &self.ckpt {
            Some(p) => Ok(p),
            None => Err(crate::usage("--ckpt is required for this command")),
        }
    }

    /// Path of an output file inside the output directory. Names are plain
    /// file names, so every write stays under `out`.
    pub fn output(&self, name: &str) -> anyhow::Result<PathBuf> {
        let file = Path::new(name);
        if file.components().count() != 1 || file.file_name().is_none() {
            bail!("output name `{name}` is not a plain file name");
        }
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(file))
    }
}
