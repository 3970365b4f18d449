use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::index::DatasetIndex;
use super::Episode;
use crate::error::{Error, Result};

/// Episode sampling order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Query image, then one of its classes, then the support set.
    QueryFirst,
    /// Class, then query image and support set.
    ClassFirst,
}

fn build_episode(
    index: &DatasetIndex,
    class_id: u32,
    query: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let pool: Vec<usize> = index
        .images_of(class_id)
        .iter()
        .copied()
        .filter(|&i| i != query)
        .collect();
    if pool.len() < k {
        return Err(Error::Sampling {
            class_id,
            reason: format!("{} other images for K = {k}", pool.len()),
        });
    }
    let chosen: Vec<usize> = sample(rng, pool.len(), k)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    let mut support = Vec::with_capacity(k);
    for &i in &chosen {
        support.push((
            index.image(i)?,
            index.mask(i, class_id).expect("indexed").clone(),
        ));
    }
    Ok(Episode {
        class_id,
        query: index.image(query)?,
        query_mask: index.mask(query, class_id).expect("indexed").clone(),
        support,
        query_index: Some(query),
        support_indices: chosen,
    })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("episodes need K ≥ 1 supports".into()));
    }
    Ok(())
}

/// Uniform query among images holding any eligible class, uniform class among
/// that image's eligible classes, uniform K-subset of the class's other images.
pub fn sample_episode_query_first(
    index: &DatasetIndex,
    eligible: &[u32],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    check_k(k)?;
    let candidates: Vec<usize> = (0..index.len())
        .filter(|&i| index.classes_in(i).any(|c| eligible.contains(&c)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Sampling {
            class_id: eligible.first().copied().unwrap_or(0),
            reason: "no image contains an eligible class".into(),
        });
    }
    let query = candidates[rng.gen_range(0..candidates.len())];
    let present: Vec<u32> = index
        .classes_in(query)
        .filter(|c| eligible.contains(c))
        .collect();
    let class_id = present[rng.gen_range(0..present.len())];
    build_episode(index, class_id, query, k, rng)
}

/// Uniform class among eligible classes present in the index, then a uniform
/// query of that class and a uniform K-subset of its other images.
pub fn sample_episode_class_first(
    index: &DatasetIndex,
    eligible: &[u32],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    check_k(k)?;
    let present: Vec<u32> = eligible
        .iter()
        .copied()
        .filter(|&c| !index.images_of(c).is_empty())
        .collect();
    if present.is_empty() {
        return Err(Error::Sampling {
            class_id: eligible.first().copied().unwrap_or(0),
            reason: "no eligible class has images".into(),
        });
    }
    let class_id = present[rng.gen_range(0..present.len())];
    let images = index.images_of(class_id);
    let query = images[rng.gen_range(0..images.len())];
    build_episode(index, class_id, query, k, rng)
}

pub fn sample_episode(
    kind: SamplerKind,
    index: &DatasetIndex,
    eligible: &[u32],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    match kind {
        SamplerKind::QueryFirst => sample_episode_query_first(index, eligible, k, rng),
        SamplerKind::ClassFirst => sample_episode_class_first(index, eligible, k, rng),
    }
}
