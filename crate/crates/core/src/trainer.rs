//! Training loop, memorization tracking and validation-based model selection.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, GroundTruth, LabelState, PartialDataset};
use crate::eval::{self, EvalError};
use crate::model::{
    init_classifier, Architecture, Classifier, ModelError, OptimizerConfig, OptimizerState,
};
use crate::schemes::{
    self, bce_elementwise, decide_batch, BatchDecision, Scheme, SchemeConfig, SchemeError,
};
use crate::{floor_count, seeded_rng};

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("split leaves an empty side (N={n}, validation fraction {fraction})")]
    EmptySplit { n: usize, fraction: f64 },
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invariant violated in epoch {epoch}: {msg}")]
    Invariant { epoch: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub scheme: SchemeConfig,
    pub val_fraction: f64,
    /// Epochs with the hidden layer frozen (LinearInit); 0 trains end to end.
    pub frozen_epochs: usize,
    pub arch: Architecture,
    pub hidden: usize,
    /// Check per-batch invariants and fail on violation.
    #[serde(default)]
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            scheme: SchemeConfig::default(),
            val_fraction: 0.2,
            frozen_epochs: 0,
            arch: Architecture::Mlp1,
            hidden: 64,
            debug_checks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.optimizer.output_lr_multiplier > 0.0
            && self.optimizer.output_lr_multiplier.is_finite())
        {
            return bad("output learning-rate multiplier must be positive");
        }
        if self.arch == Architecture::Mlp1 && self.hidden < 1 {
            return bad("mlp1 needs a hidden size >= 1");
        }
        self.scheme.validate()?;
        Ok(())
    }
}

/// Disjoint train/validation split at sample granularity.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: PartialDataset,
    pub val: PartialDataset,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

pub fn split(ds: &PartialDataset, val_fraction: f64, seed: u64) -> Result<Split, TrainError> {
    let n = ds.n_samples();
    let n_val = floor_count(val_fraction, n);
    if !(val_fraction > 0.0 && val_fraction < 1.0) || n_val == 0 || n_val >= n {
        return Err(TrainError::EmptySplit {
            n,
            fraction: val_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, STREAM_SPLIT));
    let mut val_rows = order[..n_val].to_vec();
    let mut train_rows = order[n_val..].to_vec();
    val_rows.sort_unstable();
    train_rows.sort_unstable();
    Ok(Split {
        train: ds.select_rows(&train_rows),
        val: ds.select_rows(&val_rows),
        train_rows,
        val_rows,
    })
}

/// Mean batch-time loss of one epoch per truth bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketMeans {
    pub tp: Option<f64>,
    pub tn: Option<f64>,
    #[serde(rename = "fn")]
    pub fn_: Option<f64>,
}

/// Per-label running maximum of the assume-negative training loss and the
/// epoch where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationTracker {
    max_loss: Array2<f64>,
    /// 0 until the label is first visited.
    argmax_epoch: Array2<usize>,
    epochs: usize,
    bucket_means: Vec<BucketMeans>,
    acc: [(f64, usize); 3],
}

impl MemorizationTracker {
    pub fn new(n: usize, k: usize) -> Self {
        MemorizationTracker {
            max_loss: Array2::from_elem((n, k), f64::NEG_INFINITY),
            argmax_epoch: Array2::zeros((n, k)),
            epochs: 0,
            bucket_means: Vec::new(),
            acc: [(0.0, 0); 3],
        }
    }

    pub fn max_loss(&self) -> ArrayView2<'_, f64> {
        self.max_loss.view()
    }

    pub fn argmax_epoch(&self) -> ArrayView2<'_, usize> {
        self.argmax_epoch.view()
    }

    /// Number of completed epochs.
    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Per-epoch bucket means (empty without ground truth).
    pub fn bucket_means(&self) -> &[BucketMeans] {
        &self.bucket_means
    }

    /// Records batch-time losses for dataset rows `rows`. Only a strictly
    /// larger loss moves the argmax, so the earliest epoch wins ties.
    pub fn update(
        &mut self,
        rows: &[usize],
        losses: ArrayView2<'_, f64>,
        states: ArrayView2<'_, LabelState>,
        truth: Option<&GroundTruth>,
        epoch: usize,
    ) {
        for (b, &i) in rows.iter().enumerate() {
            for k in 0..losses.ncols() {
                let l = losses[[b, k]];
                if l > self.max_loss[[i, k]] {
                    self.max_loss[[i, k]] = l;
                    self.argmax_epoch[[i, k]] = epoch;
                }
                if let Some(truth) = truth {
                    let s = states[[b, k]];
                    let bucket = if s == LabelState::ObsPos {
                        Some(0)
                    } else if s.an_target() == 0.0 {
                        Some(if truth.get(i, k) == 1 { 2 } else { 1 })
                    } else {
                        None
                    };
                    if let Some(bk) = bucket {
                        self.acc[bk].0 += l;
                        self.acc[bk].1 += 1;
                    }
                }
            }
        }
    }

    pub fn end_epoch(&mut self, has_truth: bool) {
        self.epochs += 1;
        if has_truth {
            let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
            self.bucket_means.push(BucketMeans {
                tp: mean(self.acc[0]),
                tn: mean(self.acc[1]),
                fn_: mean(self.acc[2]),
            });
        }
        self.acc = [(0.0, 0); 3];
    }

    pub fn dump(&self, rows: &[usize]) -> TrackerDump {
        let (n, k) = self.max_loss.dim();
        TrackerDump {
            n,
            k,
            epochs: self.epochs,
            rows: rows.to_vec(),
            max_loss: self.max_loss.iter().copied().collect(),
            argmax_epoch: self.argmax_epoch.iter().copied().collect(),
            bucket_means: self.bucket_means.clone(),
        }
    }

    pub fn from_dump(dump: &TrackerDump) -> Result<Self, TrainError> {
        let shape = (dump.n, dump.k);
        let err = |_| TrainError::InvalidConfig("tracker dump has inconsistent sizes".into());
        Ok(MemorizationTracker {
            max_loss: Array2::from_shape_vec(shape, dump.max_loss.clone()).map_err(err)?,
            argmax_epoch: Array2::from_shape_vec(shape, dump.argmax_epoch.clone()).map_err(err)?,
            epochs: dump.epochs,
            bucket_means: dump.bucket_means.clone(),
            acc: [(0.0, 0); 3],
        })
    }
}

/// Serialized tracker state. `rows` maps tracker rows to rows of the dataset
/// the run was started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerDump {
    pub n: usize,
    pub k: usize,
    pub epochs: usize,
    pub rows: Vec<usize>,
    pub max_loss: Vec<f64>,
    pub argmax_epoch: Vec<usize>,
    pub bucket_means: Vec<BucketMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation mAP in percent.
    pub val_map: f64,
    pub flags: usize,
    /// Flags whose true label is positive, when truth is known.
    pub flags_true: Option<usize>,
    pub flag_precision: Option<f64>,
    pub cum_corrections: usize,
    /// Smallest per-batch threshold of the epoch.
    pub threshold_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    /// Samples handed to the run (after any subsampling).
    pub n_samples: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    /// Test mAP of the best-validation model, in percent.
    pub test_map: Option<f64>,
    pub checkpoint: Option<String>,
}

/// One permanent correction, in training-split coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub epoch: usize,
    pub sample: usize,
    pub category: usize,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub best_model: Classifier,
    pub tracker: MemorizationTracker,
    /// Training split with its final label states.
    pub train: PartialDataset,
    pub train_rows: Vec<usize>,
    pub corrections: Vec<Correction>,
}

/// Counters of one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub flags: usize,
    pub flags_true: usize,
    pub corrections: Vec<Correction>,
    pub threshold_min: Option<f64>,
}

/// Precision of modified labels per epoch from `(true, total)` counts.
/// Cumulative mode accumulates counts across epochs (permanent correction).
/// `None` where the denominator is zero.
pub fn modification_precision(counts: &[(usize, usize)], cumulative: bool) -> Vec<Option<f64>> {
    let (mut hit, mut tot) = (0usize, 0usize);
    counts
        .iter()
        .map(|&(h, t)| {
            if cumulative {
                hit += h;
                tot += t;
            } else {
                hit = h;
                tot = t;
            }
            (tot > 0).then(|| hit as f64 / tot as f64)
        })
        .collect()
}

fn check_batch_invariants(
    cfg: &SchemeConfig,
    states: ArrayView2<'_, LabelState>,
    decision: &BatchDecision,
    epoch: usize,
) -> Result<(), TrainError> {
    let fail = |msg: String| Err(TrainError::Invariant { epoch, msg });
    for &idx in &decision.flags {
        if states[idx] != LabelState::Unknown {
            return fail(format!("flag on {} entry {idx:?}", states[idx]));
        }
    }
    let k = states.ncols() as f64;
    for (idx, &s) in states.indexed_iter() {
        if s == LabelState::CorrectedPos {
            let (w, t) = (decision.weights[idx], decision.targets[idx]);
            if w != 1.0 || t != 1.0 {
                return fail(format!(
                    "corrected entry {idx:?} got weight {w}, target {t}"
                ));
            }
            continue;
        }
        if !s.is_observed() {
            continue;
        }
        let (w, t) = (decision.weights[idx], decision.targets[idx]);
        let want_w = if cfg.scheme == Scheme::Wan && s == LabelState::ObsNeg {
            1.0 / (k - 1.0)
        } else {
            1.0
        };
        let want_t = match (cfg.scheme, s) {
            (Scheme::Lsan, LabelState::ObsPos) => 1.0 - cfg.eps_smooth,
            (Scheme::Lsan, _) => cfg.eps_smooth,
            _ => s.an_target(),
        };
        if w != want_w || t != want_t {
            return fail(format!("observed entry {idx:?} got weight {w}, target {t}"));
        }
    }
    Ok(())
}

/// One pass over `train` in seeded shuffled order.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Classifier,
    opt: &mut OptimizerState,
    train: &mut PartialDataset,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    tracker: &mut MemorizationTracker,
) -> Result<EpochStats, TrainError> {
    if epoch < 1 {
        return Err(SchemeError::InvalidEpoch.into());
    }
    let n = train.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut stats = EpochStats::default();
    let mut loss_sum = 0.0;
    for rows in order.chunks(cfg.batch_size) {
        let x = train.features().select(Axis(0), rows);
        let states = train.states().select(Axis(0), rows);
        let probs = model.forward(x.view())?;
        let an = states.mapv(LabelState::an_target);
        let an_losses = bce_elementwise(probs.view(), an.view())?;
        tracker.update(rows, an_losses.view(), states.view(), train.truth(), epoch);

        let decision = decide_batch(&cfg.scheme, probs.view(), states.view(), epoch)?;
        if cfg.debug_checks {
            check_batch_invariants(&cfg.scheme, states.view(), &decision, epoch)?;
        }
        if !decision.flags.is_empty() {
            stats.flags += decision.flags.len();
            if let Some(truth) = train.truth() {
                stats.flags_true += decision
                    .flags
                    .iter()
                    .filter(|&&(b, k)| truth.get(rows[b], k) == 1)
                    .count();
            }
            if !decision.threshold.is_nan() {
                let t = decision.threshold;
                stats.threshold_min = Some(stats.threshold_min.map_or(t, |m: f64| m.min(t)));
            }
        }
        if cfg.scheme.scheme.is_permanent() && !decision.flags.is_empty() {
            let global: Vec<(usize, usize)> =
                decision.flags.iter().map(|&(b, k)| (rows[b], k)).collect();
            let applied = schemes::apply_permanent_corrections(train, &global)?;
            if applied != global.len() {
                return Err(TrainError::Invariant {
                    epoch,
                    msg: format!("{} of {} corrections applied", applied, global.len()),
                });
            }
            stats
                .corrections
                .extend(global.into_iter().map(|(sample, category)| Correction {
                    epoch,
                    sample,
                    category,
                }));
        }

        let (loss, grads) =
            model.backward(x.view(), decision.targets.view(), decision.weights.view())?;
        if !loss.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        loss_sum += loss * rows.len() as f64;
        opt.step(model, &grads).map_err(|e| match e {
            ModelError::NonFiniteGradient => TrainError::Divergence { epoch },
            other => other.into(),
        })?;
    }
    tracker.end_epoch(train.truth().is_some());
    stats.mean_loss = loss_sum / n as f64;
    Ok(stats)
}

fn validation_map(model: &Classifier, val: &PartialDataset) -> Result<f64, TrainError> {
    let scores = model.forward(val.features())?;
    let r = match val.truth() {
        Some(truth) => eval::mean_average_precision(scores.view(), truth.labels())?,
        None => eval::observed_map(scores.view(), val.states())?,
    };
    Ok(r.map_percent())
}

/// Test mAP in percent against ground truth.
pub fn test_map(model: &Classifier, test: &PartialDataset) -> Result<f64, TrainError> {
    let truth = test.truth().ok_or(DatasetError::MissingTruth)?;
    let scores = model.forward(test.features())?;
    Ok(eval::mean_average_precision(scores.view(), truth.labels())?.map_percent())
}

/// Trains for the configured epochs, keeping the model with the highest
/// validation mAP (earliest epoch on ties).
pub fn run(
    cfg: &TrainConfig,
    ds: &PartialDataset,
    test: Option<&PartialDataset>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if ds.n_samples() < 2 {
        return Err(TrainError::EmptySplit {
            n: ds.n_samples(),
            fraction: cfg.val_fraction,
        });
    }
    if let Some(t) = test {
        if t.dim() != ds.dim() || t.n_classes() != ds.n_classes() {
            return Err(TrainError::InvalidConfig(
                "test set dimensions differ from training data".into(),
            ));
        }
    }
    let Split {
        mut train,
        val,
        train_rows,
        val_rows,
    } = split(ds, cfg.val_fraction, cfg.seed)?;

    let mut model = init_classifier(cfg.arch, ds.dim(), ds.n_classes(), cfg.hidden, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &model);
    let mut rng = seeded_rng(cfg.seed, STREAM_SHUFFLE);
    let mut tracker = MemorizationTracker::new(train.n_samples(), train.n_classes());
    let cumulative = cfg.scheme.scheme.is_permanent();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut corrections = Vec::new();
    let mut best: Option<(usize, f64, Classifier)> = None;
    let (mut hit_acc, mut tot_acc) = (0usize, 0usize);
    for epoch in 1..=cfg.epochs {
        model.frozen_hidden = cfg.arch == Architecture::Mlp1 && epoch <= cfg.frozen_epochs;
        let stats = train_epoch(
            &mut model,
            &mut opt,
            &mut train,
            cfg,
            epoch,
            &mut rng,
            &mut tracker,
        )?;
        let prev_corrections = corrections.len();
        corrections.extend_from_slice(&stats.corrections);
        if cfg.debug_checks && corrections.len() < prev_corrections {
            return Err(TrainError::Invariant {
                epoch,
                msg: "cumulative corrections decreased".into(),
            });
        }
        let val_map = validation_map(&model, &val)?;
        if !val_map.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }

        let has_truth = train.truth().is_some();
        let flag_precision = if has_truth {
            if cumulative {
                hit_acc += stats.flags_true;
                tot_acc += stats.flags;
                modification_precision(&[(hit_acc, tot_acc)], false)[0]
            } else {
                modification_precision(&[(stats.flags_true, stats.flags)], false)[0]
            }
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_map,
            flags: stats.flags,
            flags_true: has_truth.then_some(stats.flags_true),
            flag_precision,
            cum_corrections: corrections.len(),
            threshold_min: stats.threshold_min,
        });
        if best.as_ref().is_none_or(|(_, m, _)| val_map > *m) {
            best = Some((epoch, val_map, model.clone()));
        }
    }
    let (best_epoch, best_val_map, mut best_model) = best.expect("at least one epoch");
    best_model.frozen_hidden = false;
    let test_map = test.map(|t| test_map(&best_model, t)).transpose()?;
    let report = RunReport {
        config: cfg.clone(),
        n_samples: ds.n_samples(),
        n_train: train.n_samples(),
        n_val: val_rows.len(),
        epochs: records,
        best_epoch,
        best_val_map,
        test_map,
        checkpoint: None,
    };
    Ok(TrainOutcome {
        report,
        best_model,
        tracker,
        train,
        train_rows,
        corrections,
    })
}

/// Per-epoch metrics table, `#cfg` line first when a config echo is given.
pub fn metrics_csv(report: &RunReport, cfg_line: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(line) = cfg_line {
        out.push_str("#cfg ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("epoch,train_loss,val_map,flags,flag_precision,cum_corrections,threshold_min\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in &report.epochs {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.val_map,
            r.flags,
            opt(r.flag_precision),
            r.cum_corrections,
            opt(r.threshold_min)
        ));
    }
    out
}
