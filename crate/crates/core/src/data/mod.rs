//! Folds, episodes, samplers, the synthetic shape dataset, and dataset I/O.

mod folds;
mod image;
mod index;
mod sampler;
mod synthetic;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use folds::{make_folds, FoldSpec};
pub use image::{mask_from_pgm, mask_to_pgm, RgbImage};
pub use index::{load_dataset, synthesize_dataset, write_dataset, DatasetIndex, IndexEntry};
pub use sampler::{
    sample_episode, sample_episode_class_first, sample_episode_query_first, SamplerKind,
};
pub use synthetic::{
    generate_synthetic_episode, random_scene, render, Background, Jitter, Object, Rendered, Scene,
    ShapeKind, Similarity, SyntheticConfig, Texture,
};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// One few-shot task: a query and K annotated supports of a single class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: u32,
    pub query: RgbImage,
    pub query_mask: BinaryMask,
    pub support: Vec<(RgbImage, BinaryMask)>,
    /// Dataset positions when sampled from an index; empty for synthetic episodes.
    pub query_index: Option<usize>,
    pub support_indices: Vec<usize>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn support_tensors(&self) -> Vec<(Tensor, BinaryMask)> {
        self.support
            .iter()
            .map(|(img, m)| (img.to_tensor(), m.clone()))
            .collect()
    }

    /// Checks the episode invariants: query not among the supports, every
    /// support mask non-empty, consistent resolutions.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Error::Sampling {
            class_id: self.class_id,
            reason: reason.into(),
        };
        if self.support.is_empty() {
            return Err(fail("empty support set"));
        }
        if let Some(q) = self.query_index {
            if self.support_indices.contains(&q) {
                return Err(fail("query image appears in its own support set"));
            }
        }
        let dims = (self.query.height(), self.query.width());
        if self.query_mask.dims() != dims {
            return Err(fail("query mask resolution differs from image"));
        }
        for (img, mask) in &self.support {
            if mask.is_empty() {
                return Err(fail("support mask has no foreground"));
            }
            if mask.dims() != (img.height(), img.width()) || mask.dims() != dims {
                return Err(fail("support resolution differs from query"));
            }
        }
        Ok(())
    }
}

/// RNG for episode `index` of a stream seeded with `seed`. Each index owns an
/// independent ChaCha stream, so episodes do not depend on evaluation order.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Where episodes come from.
#[derive(Clone, Debug)]
pub enum EpisodeSource {
    /// Procedural scenes; classes are drawn uniformly (class-first).
    Synthetic {
        config: SyntheticConfig,
        similarity: Similarity,
    },
    Dataset {
        index: Arc<DatasetIndex>,
        sampler: SamplerKind,
    },
}

impl EpisodeSource {
    /// Episode `index` of the stream `(seed, classes, k)`.
    pub fn episode(&self, classes: &[u32], k: usize, seed: u64, index: u64) -> Result<Episode> {
        let mut rng = episode_rng(seed, index);
        match self {
            EpisodeSource::Synthetic { config, similarity } => {
                use rand::Rng;
                if classes.is_empty() {
                    return Err(Error::Config("no classes to sample from".into()));
                }
                let class_id = classes[rng.gen_range(0..classes.len())];
                generate_synthetic_episode(config, class_id, k, *similarity, &mut rng)
            }
            EpisodeSource::Dataset { index, sampler } => {
                sample_episode(*sampler, index, classes, k, &mut rng)
            }
        }
    }

    pub fn image_size(&self) -> Option<usize> {
        match self {
            EpisodeSource::Synthetic { config, .. } => Some(config.image_size),
            EpisodeSource::Dataset { index, .. } => {
                if index.is_empty() {
                    None
                } else {
                    index
                        .mask(0, index.classes_in(0).next()?)
                        .map(|m| m.height())
                }
            }
        }
    }
}
