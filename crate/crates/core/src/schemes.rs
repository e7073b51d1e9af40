//! Loss weighting and large-loss modification schemes.
//!
//! Each scheme turns the batch predictions and label states into an
//! effective target matrix and a weight matrix `λ` for the weighted BCE
//! objective. The large-loss schemes flag the unknown labels with the
//! largest assume-negative losses and then either drop them (rejection),
//! train them towards 1 for this batch only (temporary correction), or flip
//! them to positive for the rest of training (permanent correction).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, LabelState, PartialDataset};
use crate::floor_count;

#[derive(Debug, thiserror::Error)]
pub enum SchemeError {
    #[error("unknown scheme '{0}'")]
    UnknownScheme(String),
    #[error("invalid scheme configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("epoch must be >= 1")]
    InvalidEpoch,
    #[error("correction contract violated: {0}")]
    Contract(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "naive-an")]
    NaiveAn,
    #[serde(rename = "ignore-unobserved")]
    IgnoreUnobserved,
    #[serde(rename = "wan")]
    Wan,
    #[serde(rename = "lsan")]
    Lsan,
    #[serde(rename = "ll-r")]
    LlR,
    #[serde(rename = "ll-ct")]
    LlCt,
    #[serde(rename = "ll-cp")]
    LlCp,
    #[serde(rename = "ll-r-abs")]
    LlRAbs,
    #[serde(rename = "ll-ct-abs")]
    LlCtAbs,
    #[serde(rename = "ll-cp-abs")]
    LlCpAbs,
}

impl Scheme {
    pub const ALL: [Scheme; 10] = [
        Scheme::NaiveAn,
        Scheme::IgnoreUnobserved,
        Scheme::Wan,
        Scheme::Lsan,
        Scheme::LlR,
        Scheme::LlCt,
        Scheme::LlCp,
        Scheme::LlRAbs,
        Scheme::LlCtAbs,
        Scheme::LlCpAbs,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Scheme::NaiveAn => "naive-an",
            Scheme::IgnoreUnobserved => "ignore-unobserved",
            Scheme::Wan => "wan",
            Scheme::Lsan => "lsan",
            Scheme::LlR => "ll-r",
            Scheme::LlCt => "ll-ct",
            Scheme::LlCp => "ll-cp",
            Scheme::LlRAbs => "ll-r-abs",
            Scheme::LlCtAbs => "ll-ct-abs",
            Scheme::LlCpAbs => "ll-cp-abs",
        }
    }

    /// Schemes driven by a rate schedule.
    pub fn is_relative(self) -> bool {
        matches!(self, Scheme::LlR | Scheme::LlCt | Scheme::LlCp)
    }

    /// Schemes driven by an absolute loss threshold.
    pub fn is_absolute(self) -> bool {
        matches!(self, Scheme::LlRAbs | Scheme::LlCtAbs | Scheme::LlCpAbs)
    }

    pub fn is_large_loss(self) -> bool {
        self.is_relative() || self.is_absolute()
    }

    pub fn is_permanent(self) -> bool {
        matches!(self, Scheme::LlCp | Scheme::LlCpAbs)
    }

    fn is_rejection(self) -> bool {
        matches!(self, Scheme::LlR | Scheme::LlRAbs)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Scheme {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sch| sch.token() == s)
            .ok_or_else(|| SchemeError::UnknownScheme(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Rate increment in percentage points per epoch.
    pub delta_rel: f64,
    /// Initial absolute threshold.
    pub r0: f64,
    /// Absolute threshold decrement per epoch.
    pub delta_abs: f64,
    /// Label smoothing mass for LSAN.
    pub eps_smooth: f64,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme) -> Self {
        SchemeConfig {
            scheme,
            delta_rel: 0.2,
            r0: 1.5,
            delta_abs: 0.15,
            eps_smooth: 0.1,
        }
    }

    pub fn with_delta_rel(mut self, delta_rel: f64) -> Self {
        self.delta_rel = delta_rel;
        self
    }

    /// `Δ_rel = 0` is accepted so that the schedule can degenerate to Naive AN.
    pub fn validate(&self) -> Result<(), SchemeError> {
        let bad = |msg: String| Err(SchemeError::InvalidConfig(msg));
        if self.scheme.is_relative() && !(self.delta_rel >= 0.0 && self.delta_rel.is_finite()) {
            return bad(format!("delta_rel {} must be >= 0", self.delta_rel));
        }
        if self.scheme.is_absolute() {
            if !(self.r0 > 0.0 && self.r0.is_finite()) {
                return bad(format!("r0 {} must be > 0", self.r0));
            }
            if !(self.delta_abs >= 0.0 && self.delta_abs.is_finite()) {
                return bad(format!("delta_abs {} must be >= 0", self.delta_abs));
            }
        }
        if !(0.0..0.5).contains(&self.eps_smooth) {
            return bad(format!(
                "eps_smooth {} must lie in [0, 0.5)",
                self.eps_smooth
            ));
        }
        Ok(())
    }
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig::new(Scheme::NaiveAn)
    }
}

/// Elementwise `-T log P - (1 - T) log(1 - P)`.
pub fn bce_elementwise(
    p: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, SchemeError> {
    if p.dim() != t.dim() {
        return Err(SchemeError::ShapeMismatch(format!(
            "P {:?} vs T {:?}",
            p.dim(),
            t.dim()
        )));
    }
    let mut out = Array2::zeros(p.dim());
    Zip::from(&mut out).and(p).and(t).for_each(|l, &p, &t| {
        let mut v = 0.0;
        if t != 0.0 {
            v -= t * p.ln();
        }
        if t != 1.0 {
            v -= (1.0 - t) * (1.0 - p).ln();
        }
        *l = v;
    });
    Ok(out)
}

/// Percentage of unknown labels flagged at `epoch` under a relative scheme.
/// `Some(0.0)` for schemes without selection, `None` for absolute variants.
pub fn rejection_rate(scheme: Scheme, epoch: usize, cfg: &SchemeConfig) -> Option<f64> {
    let t = epoch.max(1);
    match scheme {
        Scheme::LlR | Scheme::LlCt => Some(((t - 1) as f64 * cfg.delta_rel).clamp(0.0, 100.0)),
        Scheme::LlCp => Some(if t == 1 {
            0.0
        } else {
            cfg.delta_rel.clamp(0.0, 100.0)
        }),
        s if s.is_absolute() => None,
        _ => Some(0.0),
    }
}

/// Absolute threshold `R0 - t·Δ_abs`.
pub fn absolute_threshold(epoch: usize, cfg: &SchemeConfig) -> f64 {
    cfg.r0 - epoch as f64 * cfg.delta_abs
}

/// Large-loss selection criterion for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Flag the largest `rate` percent of unknown losses.
    Relative { rate: f64 },
    /// Flag every unknown loss strictly above the threshold.
    Absolute { threshold: f64 },
}

/// Flagged unknown entries, in batch coordinates `(row, category)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Flags {
    pub entries: Vec<(usize, usize)>,
    /// Smallest flagged loss (relative mode) or the threshold (absolute
    /// mode); NaN when nothing was selected in relative mode.
    pub threshold: f64,
}

pub fn select_large_losses(
    losses: ArrayView2<'_, f64>,
    states: ArrayView2<'_, LabelState>,
    selection: Selection,
) -> Result<Flags, SchemeError> {
    if losses.dim() != states.dim() {
        return Err(SchemeError::ShapeMismatch(format!(
            "losses {:?} vs states {:?}",
            losses.dim(),
            states.dim()
        )));
    }
    let unknown = states
        .indexed_iter()
        .filter(|(_, &s)| s == LabelState::Unknown)
        .map(|(idx, _)| idx);
    match selection {
        Selection::Relative { rate } => {
            let mut candidates: Vec<((usize, usize), f64)> =
                unknown.map(|idx| (idx, losses[idx])).collect();
            let k =
                floor_count(rate.clamp(0.0, 100.0) / 100.0, candidates.len()).min(candidates.len());
            if k == 0 {
                return Ok(Flags {
                    entries: Vec::new(),
                    threshold: f64::NAN,
                });
            }
            // Stable sort keeps row-major order among equal losses.
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
            candidates.truncate(k);
            let threshold = candidates[k - 1].1;
            let mut entries: Vec<(usize, usize)> =
                candidates.into_iter().map(|(idx, _)| idx).collect();
            entries.sort_unstable();
            Ok(Flags { entries, threshold })
        }
        Selection::Absolute { threshold } => Ok(Flags {
            entries: unknown.filter(|&idx| losses[idx] > threshold).collect(),
            threshold,
        }),
    }
}

/// Per-batch output of a scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDecision {
    pub targets: Array2<f64>,
    pub weights: Array2<f64>,
    /// Flagged unknown entries in batch coordinates, row-major sorted.
    pub flags: Vec<(usize, usize)>,
    /// Threshold used by the selection, NaN when none applied.
    pub threshold: f64,
}

/// Weight that turns the assume-negative loss of an entry with prediction
/// `f` into the loss against a positive label: `log f / log(1 - f)`.
pub fn temporary_correction_weight(f: f64) -> f64 {
    f.ln() / (1.0 - f).ln()
}

pub fn decide_batch(
    cfg: &SchemeConfig,
    probs: ArrayView2<'_, f64>,
    states: ArrayView2<'_, LabelState>,
    epoch: usize,
) -> Result<BatchDecision, SchemeError> {
    if epoch < 1 {
        return Err(SchemeError::InvalidEpoch);
    }
    if probs.dim() != states.dim() {
        return Err(SchemeError::ShapeMismatch(format!(
            "probabilities {:?} vs states {:?}",
            probs.dim(),
            states.dim()
        )));
    }
    let an = states.mapv(LabelState::an_target);
    let mut weights = Array2::<f64>::ones(probs.dim());
    let k = probs.ncols();
    let scheme = cfg.scheme;
    let mut decision = match scheme {
        Scheme::NaiveAn => BatchDecision {
            targets: an,
            weights,
            flags: Vec::new(),
            threshold: f64::NAN,
        },
        Scheme::IgnoreUnobserved => {
            Zip::from(&mut weights).and(states).for_each(|w, &s| {
                if s == LabelState::Unknown {
                    *w = 0.0;
                }
            });
            BatchDecision {
                targets: an,
                weights,
                flags: Vec::new(),
                threshold: f64::NAN,
            }
        }
        Scheme::Wan => {
            let neg_weight = 1.0 / (k as f64 - 1.0);
            Zip::from(&mut weights).and(&an).for_each(|w, &t| {
                if t == 0.0 {
                    *w = neg_weight;
                }
            });
            BatchDecision {
                targets: an,
                weights,
                flags: Vec::new(),
                threshold: f64::NAN,
            }
        }
        Scheme::Lsan => {
            let eps = cfg.eps_smooth;
            let targets = an.mapv(|t| if t == 1.0 { 1.0 - eps } else { eps });
            BatchDecision {
                targets,
                weights,
                flags: Vec::new(),
                threshold: f64::NAN,
            }
        }
        _ => {
            let losses = bce_elementwise(probs, an.view())?;
            let selection = match rejection_rate(scheme, epoch, cfg) {
                Some(rate) => Selection::Relative { rate },
                None => Selection::Absolute {
                    threshold: absolute_threshold(epoch, cfg),
                },
            };
            let flags = select_large_losses(losses.view(), states, selection)?;
            let mut targets = an;
            for &idx in &flags.entries {
                if scheme.is_rejection() {
                    weights[idx] = 0.0;
                } else {
                    targets[idx] = 1.0;
                }
            }
            BatchDecision {
                targets,
                weights,
                flags: flags.entries,
                threshold: flags.threshold,
            }
        }
    };
    if !scheme.is_large_loss() {
        decision.flags.clear();
    }
    Ok(decision)
}

/// Permanently promotes flagged unknown labels (dataset coordinates) to
/// positive. Returns the number of corrected entries.
pub fn apply_permanent_corrections(
    ds: &mut PartialDataset,
    flags: &[(usize, usize)],
) -> Result<usize, SchemeError> {
    // Validate first so a bad flag leaves the dataset untouched.
    for &(i, k) in flags {
        if i >= ds.n_samples() || k >= ds.n_classes() {
            return Err(DatasetError::OutOfRange {
                sample: i,
                category: k,
            }
            .into());
        }
        let from = ds.state(i, k);
        if from != LabelState::Unknown {
            return Err(DatasetError::IllegalTransition {
                sample: i,
                category: k,
                from,
                to: LabelState::CorrectedPos,
            }
            .into());
        }
    }
    let mut count = 0;
    for &(i, k) in flags {
        if ds.state(i, k) == LabelState::Unknown {
            ds.correct(i, k)?;
            count += 1;
        }
    }
    Ok(count)
}
