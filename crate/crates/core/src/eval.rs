//! Average precision metrics and the highest-loss phase report.

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, LabelState};
use crate::trainer::MemorizationTracker;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no category has a positive label; mAP is undefined")]
    AllSkipped,
    #[error("{groups} groups requested but only {classes} categories")]
    TooManyGroups { groups: usize, classes: usize },
    #[error("phase distribution needs at least 2 tracked epochs, got {0}")]
    TooFewEpochs(usize),
}

/// Non-interpolated average precision: mean of precision@r over the ranks of
/// the positives, with samples sorted by descending score and ties broken by
/// ascending index. `None` when there is no positive (the category is
/// skipped).
pub fn average_precision(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, u8>) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// AP per category; `None` for skipped categories.
    pub per_category: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
    /// Mean AP over scored categories, in `[0, 1]`.
    pub map: f64,
}

impl ApResult {
    fn from_aps(per_category: Vec<Option<f64>>) -> Result<Self, EvalError> {
        let skipped: Vec<usize> = per_category
            .iter()
            .enumerate()
            .filter_map(|(k, ap)| ap.is_none().then_some(k))
            .collect();
        let scored: Vec<f64> = per_category.iter().flatten().copied().collect();
        if scored.is_empty() {
            return Err(EvalError::AllSkipped);
        }
        let map = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok(ApResult {
            per_category,
            skipped,
            map,
        })
    }

    pub fn map_percent(&self) -> f64 {
        100.0 * self.map
    }
}

fn check_dims(scores: (usize, usize), other: (usize, usize)) -> Result<(), EvalError> {
    if scores != other {
        return Err(EvalError::ShapeMismatch(format!(
            "scores {scores:?} vs labels {other:?}"
        )));
    }
    if scores.0 == 0 {
        return Err(EvalError::ShapeMismatch("no samples".into()));
    }
    Ok(())
}

pub fn mean_average_precision(
    scores: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, u8>,
) -> Result<ApResult, EvalError> {
    check_dims(scores.dim(), truth.dim())?;
    let aps = scores
        .axis_iter(Axis(1))
        .zip(truth.axis_iter(Axis(1)))
        .map(|(s, t)| average_precision(s, t))
        .collect();
    ApResult::from_aps(aps)
}

/// mAP using only observed labels: for each category, unknown and corrected
/// entries are left out of the ranking.
pub fn observed_map(
    scores: ArrayView2<'_, f64>,
    states: ArrayView2<'_, LabelState>,
) -> Result<ApResult, EvalError> {
    check_dims(scores.dim(), states.dim())?;
    let mut aps = Vec::with_capacity(scores.ncols());
    for k in 0..scores.ncols() {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for i in 0..scores.nrows() {
            match states[[i, k]] {
                LabelState::ObsPos => {
                    s.push(scores[[i, k]]);
                    l.push(1u8);
                }
                LabelState::ObsNeg => {
                    s.push(scores[[i, k]]);
                    l.push(0u8);
                }
                _ => {}
            }
        }
        aps.push(average_precision(
            ArrayView1::from(&s),
            ArrayView1::from(&l),
        ));
    }
    ApResult::from_aps(aps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMap {
    /// Categories in the group, in ascending count order.
    pub categories: Vec<usize>,
    /// mAP of the group in `[0, 1]`; `None` if every category was skipped.
    pub map: Option<f64>,
}

/// Category groups: sort by ascending count (ties by index), then cut into
/// `groups` contiguous chunks of `⌊K/G⌋`, giving one extra category to each
/// of the last `K mod G` groups.
pub fn group_categories(counts: &[usize], groups: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    let k = counts.len();
    if groups == 0 || groups > k {
        return Err(EvalError::TooManyGroups { groups, classes: k });
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| (counts[c], c));
    let base = k / groups;
    let extra = k % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = base + usize::from(g >= groups - extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

pub fn grouped_map(
    scores: ArrayView2<'_, f64>,
    truth: ArrayView2<'_, u8>,
    counts: &[usize],
    groups: usize,
) -> Result<Vec<GroupMap>, EvalError> {
    check_dims(scores.dim(), truth.dim())?;
    if counts.len() != scores.ncols() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} counts for {} categories",
            counts.len(),
            scores.ncols()
        )));
    }
    group_categories(counts, groups)?
        .into_iter()
        .map(|cats| {
            let s = scores.select(Axis(1), &cats);
            let t = truth.select(Axis(1), &cats);
            let map = match mean_average_precision(s.view(), t.view()) {
                Ok(r) => Some(r.map),
                Err(EvalError::AllSkipped) => None,
                Err(e) => return Err(e),
            };
            Ok(GroupMap {
                categories: cats,
                map,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub count: usize,
    pub warmup_pct: f64,
    pub regular_pct: f64,
}

impl PhaseRow {
    fn from_epochs(epochs: &[usize]) -> Option<Self> {
        if epochs.is_empty() {
            return None;
        }
        let warm = epochs.iter().filter(|&&e| e == 1).count();
        let warmup_pct = 100.0 * warm as f64 / epochs.len() as f64;
        Some(PhaseRow {
            count: epochs.len(),
            warmup_pct,
            regular_pct: 100.0 - warmup_pct,
        })
    }
}

/// Where each label's training loss peaked: epoch 1 (warmup) or later
/// (regular), per truth bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDistribution {
    #[serde(rename = "TP")]
    pub tp: Option<PhaseRow>,
    #[serde(rename = "TN")]
    pub tn: Option<PhaseRow>,
    #[serde(rename = "FN")]
    pub fn_: Option<PhaseRow>,
}

/// Buckets: TP = observed positives; TN / FN = assume-negative targets whose
/// truth is 0 / 1.
pub fn phase_distribution(
    tracker: &MemorizationTracker,
    truth: &GroundTruth,
    states: ArrayView2<'_, LabelState>,
) -> Result<PhaseDistribution, EvalError> {
    if tracker.epochs() < 2 {
        return Err(EvalError::TooFewEpochs(tracker.epochs()));
    }
    let argmax = tracker.argmax_epoch();
    check_dims(argmax.dim(), states.dim())?;
    check_dims(argmax.dim(), truth.labels().dim())?;
    let (mut tp, mut tn, mut fneg) = (Vec::new(), Vec::new(), Vec::new());
    for ((i, k), &s) in states.indexed_iter() {
        let epoch = argmax[[i, k]];
        if epoch == 0 {
            continue;
        }
        if s == LabelState::ObsPos {
            tp.push(epoch);
        } else if s.an_target() == 0.0 {
            if truth.get(i, k) == 1 {
                fneg.push(epoch);
            } else {
                tn.push(epoch);
            }
        }
    }
    Ok(PhaseDistribution {
        tp: PhaseRow::from_epochs(&tp),
        tn: PhaseRow::from_epochs(&tn),
        fn_: PhaseRow::from_epochs(&fneg),
    })
}
