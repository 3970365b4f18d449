//! Losses, AdamW, the cosine schedule, and the two training stages:
//! base pre-training on video-like episodes, then episodic meta-training of
//! strategy-selected parameters with early stopping.

mod losses;
mod optim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use losses::{bce_loss, combined_loss, dice_loss, DICE_SMOOTH};
pub use optim::{adamw_step, cosine_lr, AdamWParams, OptimizerState};

use crate::autograd::Tape;
use crate::data::{Episode, EpisodeSource, FoldSpec, Similarity, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalSpec};
use crate::lora::{select_trainable, Strategy, StrategyRanks};
use crate::model::{Checkpoint, FsSam2};
use crate::nn::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    /// Episodes per epoch; `None` uses the number of training-class images
    /// for datasets and 8 per class for synthetic streams.
    pub episodes_per_epoch: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Support-set size of training episodes.
    pub train_k: usize,
    /// Validation episodes per evaluation point.
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            lr_min: 0.0,
            batch: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            w_bce: 1.0,
            w_dice: 1.0,
            episodes_per_epoch: None,
            patience: 10,
            train_k: 1,
            val_episodes: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return bad(format!(
                "need 0 ≤ lr_min ≤ lr, lr > 0 (lr {}, lr_min {})",
                self.lr, self.lr_min
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!(
                "betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay non-negative".into());
        }
        if !(self.w_bce >= 0.0 && self.w_dice >= 0.0) || self.w_bce + self.w_dice == 0.0 {
            return bad("loss weights must be non-negative and not both zero".into());
        }
        if self.batch == 0
            || self.train_k == 0
            || self.patience == 0
            || self.episodes_per_epoch == Some(0)
        {
            return bad("batch, train_k, patience and episodes_per_epoch must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Number of trained scalars.
    pub trainable: usize,
}

/// Stream seeds for the different episode consumers of one run.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const VAL_STREAM: u64 = 0x7661_6c00_0000_0000;

fn episode_loss(
    model: &FsSam2,
    ids: &[ParamId],
    ep: &Episode,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let logits = model.forward(
        &mut tape,
        &bound,
        &ep.query.to_tensor(),
        &ep.support_tensors(),
    )?;
    let loss = combined_loss(&mut tape, logits, &ep.query_mask, cfg.w_bce, cfg.w_dice)?;
    let value = tape.value(loss).data()[0];
    if !want_grads || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let out = ids
        .iter()
        .map(|&id| {
            grads
                .take(bound.var(id))
                .unwrap_or_else(|| Tensor::zeros(model.store().value(id).shape()))
        })
        .collect();
    Ok((value, out))
}

/// Mean loss and mean gradient over a batch. Episodes run in parallel; the
/// reduction runs in episode order so the result is thread-count independent.
fn batch_gradient(
    model: &FsSam2,
    ids: &[ParamId],
    episodes: &[Episode],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let parts: Vec<(f64, Vec<Tensor>)> = episodes
        .par_iter()
        .map(|ep| episode_loss(model, ids, ep, cfg, true))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut loss = 0.0;
    let mut sum: Vec<Tensor> = ids
        .iter()
        .map(|&id| Tensor::zeros(model.store().value(id).shape()))
        .collect();
    for (l, grads) in parts {
        if !l.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {l}"),
            });
        }
        loss += l;
        for (acc, g) in sum.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut sum {
        for v in g.data_mut() {
            *v /= n;
        }
        if !g.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite gradient".into(),
            });
        }
    }
    Ok((loss / n, sum))
}

fn apply_update(
    model: &mut FsSam2,
    ids: &[ParamId],
    grads: Vec<Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    let mut params: Vec<Tensor> = ids
        .iter()
        .map(|&id| model.store().value(id).clone())
        .collect();
    adamw_step(&mut params, &grads, state, lr, hp)?;
    for (&id, p) in ids.iter().zip(params) {
        model.store_mut().get_mut(id).value = p;
    }
    Ok(())
}

fn mean_loss(model: &FsSam2, episodes: &[Episode], cfg: &TrainConfig) -> Result<f64> {
    let losses: Vec<f64> = episodes
        .par_iter()
        .map(|ep| episode_loss(model, &[], ep, cfg, false).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Which quantity selects the best checkpoint.
#[derive(Clone, Copy, PartialEq)]
enum Criterion {
    ValLoss,
    ValMiou,
}

struct Run<'a> {
    source: &'a EpisodeSource,
    train_classes: &'a [u32],
    val_source: &'a EpisodeSource,
    val_classes: &'a [u32],
    criterion: Criterion,
}

fn train_loop(
    mut model: FsSam2,
    ids: Vec<ParamId>,
    run: &Run,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let per_epoch = cfg
        .episodes_per_epoch
        .unwrap_or_else(|| default_epoch_size(run.source, run.train_classes));
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let hp = cfg.adamw();
    let params: Vec<Tensor> = ids
        .iter()
        .map(|&id| model.store().value(id).clone())
        .collect();
    let mut state = OptimizerState::for_params(&params);
    let trainable = params.iter().map(Tensor::numel).sum();

    let val_seed = cfg.seed ^ VAL_STREAM;
    let val_spec = EvalSpec {
        classes: run.val_classes,
        fold: None,
        k: cfg.train_k,
        n_episodes: cfg.val_episodes,
        seed: val_seed,
        jobs: 0,
    };
    let val_episodes: Vec<Episode> = if run.criterion == Criterion::ValLoss {
        (0..cfg.val_episodes as u64)
            .map(|i| {
                run.val_source
                    .episode(run.val_classes, cfg.train_k, val_seed, i)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr;
        for _ in 0..steps_per_epoch {
            let first = step * cfg.batch;
            let episodes: Vec<Episode> = (first..first + cfg.batch)
                .map(|i| {
                    run.source.episode(
                        run.train_classes,
                        cfg.train_k,
                        cfg.seed ^ TRAIN_STREAM,
                        i as u64,
                    )
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradient(&model, &ids, &episodes, cfg, step)?;
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min);
            apply_update(&mut model, &ids, grads, &mut state, lr, &hp)?;
            epoch_loss += loss;
            step += 1;
        }
        let loss = epoch_loss / steps_per_epoch as f64;
        let (val_loss, val_miou, score) = match run.criterion {
            Criterion::ValLoss => {
                let vl = mean_loss(&model, &val_episodes, cfg)?;
                if !vl.is_finite() {
                    return Err(Error::Training {
                        step,
                        reason: format!("validation loss is {vl}"),
                    });
                }
                (Some(vl), None, -vl)
            }
            Criterion::ValMiou => {
                let m = evaluate(&model, run.val_source, EvalMode::Standard, &val_spec)?.miou();
                (None, m, m.unwrap_or(0.0))
            }
        };
        log.push(LogRecord {
            epoch,
            step,
            lr,
            loss,
            val_miou,
            val_loss,
            warning: None,
        });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            let mut ckpt = Checkpoint::new(model.clone());
            ckpt.epoch = epoch;
            ckpt.best_val_miou = val_miou;
            best = Some((score, ckpt));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let checkpoint = match best {
        Some((_, c)) => c,
        None => Checkpoint::new(model),
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        trainable,
    })
}

fn default_epoch_size(source: &EpisodeSource, classes: &[u32]) -> usize {
    match source {
        EpisodeSource::Synthetic { .. } => 8 * classes.len(),
        EpisodeSource::Dataset { index, .. } => (0..index.len())
            .filter(|&i| index.classes_in(i).any(|c| classes.contains(&c)))
            .count()
            .max(1),
    }
}

/// Stage one: trains every parameter on video-like episodes of `classes`;
/// returns the checkpoint with the lowest validation loss.
pub fn pretrain_base(
    model: FsSam2,
    synth: &SyntheticConfig,
    classes: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    synth.validate()?;
    if synth.image_size != model.config().image_size {
        return Err(Error::Config(format!(
            "synthetic images are {} px but the model expects {}",
            synth.image_size,
            model.config().image_size
        )));
    }
    let mut model = model;
    model.store_mut().set_all_trainable(true);
    let ids = model.store().trainable_ids();
    let source = EpisodeSource::Synthetic {
        config: synth.clone(),
        similarity: Similarity::VideoLike,
    };
    let run = Run {
        source: &source,
        train_classes: classes,
        val_source: &source,
        val_classes: classes,
        criterion: Criterion::ValLoss,
    };
    let mut out = train_loop(model, ids, &run, cfg)?;
    out.checkpoint.model.store_mut().set_all_trainable(false);
    Ok(out)
}

/// Stage two: trains the parameters `strategy` selects on episodes of the
/// fold's training classes, validates mIoU on its held-out classes after each
/// epoch, keeps the best checkpoint and stops after `patience` epochs
/// without improvement.
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    model: FsSam2,
    strategy: Strategy,
    ranks: &StrategyRanks,
    source: &EpisodeSource,
    folds: &FoldSpec,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_classes = folds.train_classes(fold)?;
    let test_classes = folds.test_classes(fold)?;
    if strategy == Strategy::None {
        let warning = (cfg.epochs > 0)
            .then(|| "strategy `none` trains nothing; returning the input model".to_string());
        let log = vec![LogRecord {
            epoch: 0,
            step: 0,
            lr: 0.0,
            loss: f64::NAN,
            val_miou: None,
            val_loss: None,
            warning,
        }];
        return Ok(TrainOutcome {
            checkpoint: Checkpoint::new(model),
            log,
            trainable: 0,
        });
    }
    let mut model = model;
    let ids = select_trainable(&mut model, strategy, ranks, cfg.seed)?;
    let run = Run {
        source,
        train_classes: &train_classes,
        val_source: source,
        val_classes: test_classes,
        criterion: Criterion::ValMiou,
    };
    let mut out = train_loop(model, ids, &run, cfg)?;
    out.checkpoint.model.store_mut().set_all_trainable(false);
    Ok(out)
}
