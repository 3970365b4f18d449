//! Accumulated IoU metrics and the evaluation protocols.

mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{iou_accumulate, ClassCounts, MetricsReport};

use crate::data::{Episode, EpisodeSource, FoldSpec};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{Checkpoint, CheckpointKind, FsSam2};

/// Anything that maps an episode to a predicted query mask.
pub trait Predictor: Sync {
    fn predict(&self, episode: &Episode) -> Result<BinaryMask>;
}

impl Predictor for FsSam2 {
    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        Ok(self
            .segment(&episode.query.to_tensor(), &episode.support_tensors())?
            .mask)
    }
}

/// Returns the ground-truth query mask.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        Ok(episode.query_mask.clone())
    }
}

/// Predicts background everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct BackgroundPredictor;

impl Predictor for BackgroundPredictor {
    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        Ok(BinaryMask::empty(
            episode.query.height(),
            episode.query.width(),
        ))
    }
}

impl Predictor for Checkpoint {
    fn predict(&self, episode: &Episode) -> Result<BinaryMask> {
        match self.kind {
            CheckpointKind::Model => self.model.predict(episode),
            CheckpointKind::Oracle => OraclePredictor.predict(episode),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Standard,
    /// Support set replaced by the query image and its mask.
    Identity,
}

/// Episode stream and bookkeeping shared by the evaluation protocols.
#[derive(Clone, Copy, Debug)]
pub struct EvalSpec<'a> {
    pub classes: &'a [u32],
    pub fold: Option<usize>,
    pub k: usize,
    pub n_episodes: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

fn with_episode_index(err: Error, index: usize) -> Error {
    match err {
        Error::Sampling { class_id, reason } => Error::Sampling {
            class_id,
            reason: format!("episode {index}: {reason}"),
        },
        other => other,
    }
}

/// Runs `spec.n_episodes` episodes and accumulates counts. Each episode's RNG
/// depends only on `(seed, index)` and counts are merged as integer sums, so
/// the result does not depend on `jobs`.
pub fn evaluate(
    predictor: &dyn Predictor,
    source: &EpisodeSource,
    mode: EvalMode,
    spec: &EvalSpec,
) -> Result<MetricsReport> {
    let k = match mode {
        EvalMode::Standard => spec.k,
        EvalMode::Identity => 1,
    };
    let run = |i: usize| -> Result<(u32, u64, u64)> {
        let mut ep = source
            .episode(spec.classes, k, spec.seed, i as u64)
            .map_err(|e| with_episode_index(e, i))?;
        if mode == EvalMode::Identity {
            ep.support = vec![(ep.query.clone(), ep.query_mask.clone())];
            ep.support_indices = ep.query_index.into_iter().collect();
        }
        let pred = predictor.predict(&ep)?;
        let (inter, union) = pred.overlap(&ep.query_mask)?;
        Ok((ep.class_id, inter, union))
    };
    let counts: Vec<(u32, u64, u64)> = if spec.jobs == 1 {
        (0..spec.n_episodes).map(run).collect::<Result<_>>()?
    } else if spec.jobs == 0 {
        (0..spec.n_episodes)
            .into_par_iter()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| {
                (0..spec.n_episodes)
                    .into_par_iter()
                    .map(run)
                    .collect::<Result<_>>()
            })?
    };
    let mut report = MetricsReport::new(spec.fold, k, spec.seed, spec.classes);
    for (class_id, inter, union) in counts {
        report.add_counts(class_id, inter, union);
    }
    report.n_episodes = spec.n_episodes;
    Ok(report)
}

/// Standard K-shot evaluation on the held-out classes of `fold`.
pub fn evaluate_fold(
    predictor: &dyn Predictor,
    source: &EpisodeSource,
    folds: &FoldSpec,
    fold: usize,
    k: usize,
    n_episodes: usize,
    seed: u64,
    jobs: usize,
) -> Result<MetricsReport> {
    let classes = folds.test_classes(fold)?;
    let spec = EvalSpec {
        classes,
        fold: Some(fold),
        k,
        n_episodes,
        seed,
        jobs,
    };
    evaluate(predictor, source, EvalMode::Standard, &spec)
}

/// Identity-support evaluation: each query is its own single support.
pub fn evaluate_identity_support(
    predictor: &dyn Predictor,
    source: &EpisodeSource,
    folds: &FoldSpec,
    fold: usize,
    n_episodes: usize,
    seed: u64,
    jobs: usize,
) -> Result<MetricsReport> {
    let classes = folds.test_classes(fold)?;
    let spec = EvalSpec {
        classes,
        fold: Some(fold),
        k: 1,
        n_episodes,
        seed,
        jobs,
    };
    evaluate(predictor, source, EvalMode::Identity, &spec)
}

/// Fold evaluation on a shifted episode source. The shifted test classes
/// must not overlap the classes the model was trained on.
pub fn evaluate_domain_shift(
    predictor: &dyn Predictor,
    trained_classes: &[u32],
    shifted: &EpisodeSource,
    spec: &EvalSpec,
) -> Result<MetricsReport> {
    if let Some(c) = spec.classes.iter().find(|c| trained_classes.contains(c)) {
        return Err(Error::Protocol(format!(
            "class {c} appears in both the training classes and the shifted test classes"
        )));
    }
    evaluate(predictor, shifted, EvalMode::Standard, spec)
}
