use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Pixel counts accumulated over all query images of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

impl ClassCounts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Accumulated intersection/union per class. IoU is a ratio of pixel sums
/// over all episodes, never a mean of per-image ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReportJson", try_from = "ReportJson")]
pub struct MetricsReport {
    pub fold: Option<usize>,
    pub k: usize,
    pub n_episodes: usize,
    pub seed: u64,
    per_class: BTreeMap<u32, ClassCounts>,
}

impl MetricsReport {
    /// Empty report over `classes`; every listed class takes part in the mean.
    pub fn new(fold: Option<usize>, k: usize, seed: u64, classes: &[u32]) -> Self {
        Self {
            fold,
            k,
            n_episodes: 0,
            seed,
            per_class: classes
                .iter()
                .map(|&c| (c, ClassCounts::default()))
                .collect(),
        }
    }

    pub fn per_class(&self) -> &BTreeMap<u32, ClassCounts> {
        &self.per_class
    }

    pub fn class_iou(&self, class_id: u32) -> Option<f64> {
        self.per_class.get(&class_id).and_then(ClassCounts::iou)
    }

    /// Adds one episode's counts for `class_id`.
    pub fn accumulate(
        &mut self,
        class_id: u32,
        predicted: &BinaryMask,
        truth: &BinaryMask,
    ) -> Result<()> {
        let (i, u) = predicted.overlap(truth)?;
        self.add_counts(class_id, i, u);
        self.n_episodes += 1;
        Ok(())
    }

    pub(crate) fn add_counts(&mut self, class_id: u32, intersection: u64, union: u64) {
        let c = self.per_class.entry(class_id).or_default();
        c.intersection += intersection;
        c.union += union;
    }

    /// Sums counts of a partial report over the same classes.
    pub fn merge(&mut self, other: &MetricsReport) {
        for (&c, counts) in &other.per_class {
            self.add_counts(c, counts.intersection, counts.union);
        }
        self.n_episodes += other.n_episodes;
    }

    /// Mean IoU over classes with non-zero union, or `None` when there is
    /// none. Excluded classes are listed by [`MetricsReport::warnings`].
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self
            .per_class
            .values()
            .filter_map(ClassCounts::iou)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.per_class
            .iter()
            .filter(|(_, c)| c.union == 0)
            .map(|(id, _)| format!("class {id} has zero accumulated union; excluded from mIoU"))
            .collect()
    }

    /// One row per class: `class_id,intersection,union,iou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,intersection,union,iou\n");
        for (id, c) in &self.per_class {
            let iou = c.iou().map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{id},{},{},{iou}\n", c.intersection, c.union));
        }
        out
    }
}

/// `iou_accumulate` as a free function.
pub fn iou_accumulate(
    report: &mut MetricsReport,
    class_id: u32,
    predicted: &BinaryMask,
    truth: &BinaryMask,
) -> Result<()> {
    report.accumulate(class_id, predicted, truth)
}

#[derive(Serialize, Deserialize)]
struct ClassJson {
    intersection: u64,
    union: u64,
    iou: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportJson {
    fold: Option<usize>,
    #[serde(rename = "K")]
    k: usize,
    n_episodes: usize,
    seed: u64,
    per_class: BTreeMap<u32, ClassJson>,
    miou: Option<f64>,
}

impl From<MetricsReport> for ReportJson {
    fn from(r: MetricsReport) -> Self {
        let miou = r.miou();
        ReportJson {
            fold: r.fold,
            k: r.k,
            n_episodes: r.n_episodes,
            seed: r.seed,
            per_class: r
                .per_class
                .iter()
                .map(|(&id, c)| {
                    (
                        id,
                        ClassJson {
                            intersection: c.intersection,
                            union: c.union,
                            iou: c.iou(),
                        },
                    )
                })
                .collect(),
            miou,
        }
    }
}

impl TryFrom<ReportJson> for MetricsReport {
    type Error = Error;

    fn try_from(j: ReportJson) -> Result<Self> {
        let mut per_class = BTreeMap::new();
        for (id, c) in j.per_class {
            if c.intersection > c.union {
                return Err(Error::Contract(format!(
                    "class {id}: intersection {} exceeds union {}",
                    c.intersection, c.union
                )));
            }
            per_class.insert(
                id,
                ClassCounts {
                    intersection: c.intersection,
                    union: c.union,
                },
            );
        }
        Ok(MetricsReport {
            fold: j.fold,
            k: j.k,
            n_episodes: j.n_episodes,
            seed: j.seed,
            per_class,
        })
    }
}
