use std::io::Write as _;
use std::sync::Arc;

use anyhow::{bail, Context};
use fssam2::data::{load_dataset, make_folds, synthesize_dataset, write_dataset, FoldSpec};
use fssam2::eval::{evaluate, evaluate_domain_shift, EvalSpec};
use fssam2::lora::merge_lora;
use fssam2::model::CheckpointKind;
use fssam2::train::LogRecord;
use fssam2::{meta_train, pretrain_base, Checkpoint, EpisodeSource, FsSam2, Strategy};
use serde::Serialize;

use crate::config::{Mode, RunConfig};

/// Episode source and folds of a run.
struct Session {
    source: EpisodeSource,
    folds: FoldSpec,
}

impl Session {
    fn new(cfg: &RunConfig) -> anyhow::Result<Self> {
        match &cfg.data {
            Some(root) => {
                if !root.is_dir() {
                    return Err(crate::missing_input(root, "not a directory"));
                }
                let index = load_dataset(root)?;
                let classes: Vec<u32> = index.classes().keys().copied().collect();
                let folds = make_folds(&classes, cfg.n_folds)?;
                Ok(Self {
                    source: EpisodeSource::Dataset {
                        index: Arc::new(index),
                        sampler: cfg.sampler,
                    },
                    folds,
                })
            }
            None => Ok(Self {
                source: EpisodeSource::Synthetic {
                    config: cfg.synthetic.clone(),
                    similarity: cfg.similarity,
                },
                folds: cfg.folds()?,
            }),
        }
    }
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = cfg.ckpt()?;
    if !path.is_file() {
        return Err(crate::missing_input(path, "no such file"));
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_log(
    cfg: &RunConfig,
    name: &str,
    header: Option<&impl Serialize>,
    records: &[LogRecord],
) -> anyhow::Result<()> {
    let path = cfg.output(name)?;
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(&serde_json::to_string(h)?);
        text.push('\n');
    }
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn save(cfg: &RunConfig, name: &str, ckpt: &Checkpoint) -> anyhow::Result<()> {
    let path = cfg.output(name)?;
    ckpt.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let index = synthesize_dataset(&cfg.synthetic, cfg.images_per_class)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_dataset(&index, &cfg.out)?;
    println!(
        "wrote {} images of {} classes to {}",
        index.len(),
        index.classes().len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> anyhow::Result<()> {
    let folds = cfg.folds()?;
    let base = folds.train_classes(cfg.fold)?;
    let model = FsSam2::new(cfg.model.clone(), cfg.seed)?;
    let out = pretrain_base(model, &cfg.synthetic, &base, &cfg.train)?;
    write_log(cfg, "pretrain.log.jsonl", None::<&()>, &out.log)?;
    let best = out.log.iter().find(|r| r.epoch == out.checkpoint.epoch);
    if let Some(r) = best {
        println!(
            "best epoch {} of {}: validation loss {:.4}",
            r.epoch,
            out.log.len(),
            r.val_loss.unwrap_or(f64::NAN)
        );
    }
    save(cfg, "pretrain.ckpt", &out.checkpoint)
}

#[derive(Serialize)]
struct MetaHeader {
    strategy: Strategy,
    trainable: usize,
    fold: usize,
    seed: u64,
}

pub fn metatrain(cfg: &RunConfig) -> anyhow::Result<()> {
    let input = load_checkpoint(cfg)?;
    if input.kind != CheckpointKind::Model {
        bail!("{} is not a model checkpoint", cfg.ckpt()?.display());
    }
    let session = Session::new(cfg)?;
    let out = meta_train(
        input.model.clone(),
        cfg.strategy,
        &cfg.ranks,
        &session.source,
        &session.folds,
        cfg.fold,
        &cfg.train,
    )?;
    println!(
        "strategy {}: {} trainable parameters",
        cfg.strategy.as_str(),
        out.trainable
    );
    for w in out.log.iter().filter_map(|r| r.warning.as_deref()) {
        eprintln!("warning: {w}");
    }
    let header = MetaHeader {
        strategy: cfg.strategy,
        trainable: out.trainable,
        fold: cfg.fold,
        seed: cfg.seed,
    };
    let stem = format!("{}-fold{}", cfg.strategy.as_str(), cfg.fold);
    write_log(cfg, &format!("{stem}.log.jsonl"), Some(&header), &out.log)?;
    let ckpt = if cfg.strategy == Strategy::None {
        input
    } else {
        out.checkpoint
    };
    save(cfg, &format!("{stem}.ckpt"), &ckpt)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(cfg)?;
    let session = Session::new(cfg)?;
    let classes = session.folds.test_classes(cfg.fold)?;
    let spec = EvalSpec {
        classes,
        fold: Some(cfg.fold),
        k: cfg.k,
        n_episodes: cfg.episodes,
        seed: cfg.seed,
        jobs: cfg.jobs,
    };
    let report = match cfg.mode {
        Mode::Standard | Mode::Identity => {
            evaluate(&ckpt, &session.source, cfg.mode.eval_mode(), &spec)?
        }
        Mode::Shift => {
            let EpisodeSource::Synthetic { config, similarity } = &session.source else {
                return Err(crate::usage("--mode shift needs synthetic episodes"));
            };
            let mut shifted = config.clone();
            shifted.background = 1 - shifted.background;
            let shifted = EpisodeSource::Synthetic {
                config: shifted,
                similarity: *similarity,
            };
            let trained = session.folds.train_classes(cfg.fold)?;
            evaluate_domain_shift(&ckpt, &trained, &shifted, &spec)?
        }
    };
    for w in report.warnings() {
        eprintln!("warning: {w}");
    }
    let stem = format!(
        "report-{}-K{}",
        serde_json::to_value(cfg.mode)?.as_str().unwrap_or("eval"),
        report.k
    );
    let json = cfg.output(&format!("{stem}.json"))?;
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", json.display()))?;
    let csv = cfg.output(&format!("{stem}.csv"))?;
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let mut stdout = std::io::stdout().lock();
    match report.miou() {
        Some(m) => writeln!(stdout, "mIoU {m:.4}")?,
        None => writeln!(stdout, "mIoU undefined (no class with a non-empty union)")?,
    }
    Ok(())
}

pub fn merge(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut ckpt = load_checkpoint(cfg)?;
    if ckpt.merged || ckpt.model.adapters().is_empty() {
        eprintln!("notice: checkpoint has no separate adapters; writing it unchanged");
    } else {
        let adapters = ckpt.model.adapters().len();
        merge_lora(&mut ckpt.model)?;
        ckpt.merged = true;
        println!(
            "merged {adapters} adapters; {} parameters",
            ckpt.model.store().numel()
        );
    }
    save(cfg, "merged.ckpt", &ckpt)
}
