//! Partially labelled multi-label datasets.
//!
//! Every (sample, category) entry carries a [`LabelState`]. Observed labels
//! never change; an unknown label can be promoted to a corrected positive by
//! permanent large-loss correction and by nothing else. Ground truth, when
//! known, is kept in a separate [`GroundTruth`] value that supervision code
//! never reads.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{floor_count, seeded_rng};

const MAGIC: &str = "WSML/1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite feature at sample {sample}, dimension {dim}")]
    NonFiniteFeature { sample: usize, dim: usize },
    #[error("state {state} at ({sample}, {category}) disagrees with ground truth {truth}")]
    TruthMismatch {
        sample: usize,
        category: usize,
        state: LabelState,
        truth: u8,
    },
    #[error("illegal label transition at ({sample}, {category}): {from} -> {to}")]
    IllegalTransition {
        sample: usize,
        category: usize,
        from: LabelState,
        to: LabelState,
    },
    #[error("entry ({sample}, {category}) is out of range")]
    OutOfRange { sample: usize, category: usize },
    #[error("sample {0} has no positive label")]
    NoPositive(usize),
    #[error("operation requires ground-truth labels (TRUTH section)")]
    MissingTruth,
    #[error("fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("subsampling leaves no samples")]
    EmptySubsample,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Annotation status of one (sample, category) entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LabelState {
    ObsPos,
    ObsNeg,
    #[default]
    Unknown,
    CorrectedPos,
}

impl LabelState {
    pub fn token(self) -> char {
        match self {
            LabelState::ObsPos => '1',
            LabelState::ObsNeg => '0',
            LabelState::Unknown => 'u',
            LabelState::CorrectedPos => 'c',
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "1" => Some(LabelState::ObsPos),
            "0" => Some(LabelState::ObsNeg),
            "u" => Some(LabelState::Unknown),
            "c" => Some(LabelState::CorrectedPos),
            _ => None,
        }
    }

    /// Assume-negative target: positives (observed or corrected) are 1,
    /// everything else 0.
    pub fn an_target(self) -> f64 {
        match self {
            LabelState::ObsPos | LabelState::CorrectedPos => 1.0,
            LabelState::ObsNeg | LabelState::Unknown => 0.0,
        }
    }

    /// True for annotator-provided labels.
    pub fn is_observed(self) -> bool {
        matches!(self, LabelState::ObsPos | LabelState::ObsNeg)
    }

    /// Only `Unknown -> CorrectedPos` is allowed (besides staying put).
    pub fn can_become(self, to: LabelState) -> bool {
        self == to || (self == LabelState::Unknown && to == LabelState::CorrectedPos)
    }
}

impl fmt::Display for LabelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LabelState::ObsPos => "OBS_POS",
            LabelState::ObsNeg => "OBS_NEG",
            LabelState::Unknown => "UNKNOWN",
            LabelState::CorrectedPos => "CORRECTED_POS",
        };
        f.write_str(name)
    }
}

/// Full binary labels, for analysis and evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth(Array2<u8>);

impl GroundTruth {
    pub fn new(labels: Array2<u8>) -> Result<Self, DatasetError> {
        if let Some(((i, k), v)) = labels.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(DatasetError::InvalidDimensions(format!(
                "truth value {v} at ({i}, {k}) is not binary"
            )));
        }
        Ok(GroundTruth(labels))
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.0.view()
    }

    pub fn get(&self, sample: usize, category: usize) -> u8 {
        self.0[[sample, category]]
    }

    /// Number of positive samples per category.
    pub fn positive_counts(&self) -> Vec<usize> {
        self.0
            .axis_iter(Axis(1))
            .map(|col| col.iter().filter(|&&v| v == 1).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialDataset {
    features: Array2<f64>,
    states: Array2<LabelState>,
    truth: Option<GroundTruth>,
}

impl PartialDataset {
    pub fn new(
        features: Array2<f64>,
        states: Array2<LabelState>,
        truth: Option<GroundTruth>,
    ) -> Result<Self, DatasetError> {
        let (n, d) = features.dim();
        let (ns, k) = states.dim();
        if n < 1 || d < 1 || k < 2 {
            return Err(DatasetError::InvalidDimensions(format!(
                "need N >= 1, D >= 1, K >= 2 (got N={n}, D={d}, K={k})"
            )));
        }
        if ns != n {
            return Err(DatasetError::InvalidDimensions(format!(
                "features have {n} rows but states have {ns}"
            )));
        }
        if let Some(((i, j), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DatasetError::NonFiniteFeature { sample: i, dim: j });
        }
        let ds = PartialDataset {
            features,
            states,
            truth,
        };
        ds.check_truth()?;
        Ok(ds)
    }

    /// Checks that observed states agree with ground truth, when present.
    pub fn check_truth(&self) -> Result<(), DatasetError> {
        let Some(truth) = &self.truth else {
            return Ok(());
        };
        if truth.0.dim() != self.states.dim() {
            return Err(DatasetError::InvalidDimensions(format!(
                "truth is {:?} but states are {:?}",
                truth.0.dim(),
                self.states.dim()
            )));
        }
        for ((i, k), &s) in self.states.indexed_iter() {
            let t = truth.0[[i, k]];
            let bad = (s == LabelState::ObsPos && t != 1) || (s == LabelState::ObsNeg && t != 0);
            if bad {
                return Err(DatasetError::TruthMismatch {
                    sample: i,
                    category: k,
                    state: s,
                    truth: t,
                });
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.states.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn states(&self) -> ArrayView2<'_, LabelState> {
        self.states.view()
    }

    pub fn state(&self, sample: usize, category: usize) -> LabelState {
        self.states[[sample, category]]
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// Drops ground truth, e.g. to emulate a real partially labelled corpus.
    pub fn without_truth(mut self) -> Self {
        self.truth = None;
        self
    }

    pub fn is_fully_observed(&self) -> bool {
        self.states.iter().all(|s| s.is_observed())
    }

    pub fn count_state(&self, state: LabelState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    pub fn observed_count(&self) -> usize {
        self.states.iter().filter(|s| s.is_observed()).count()
    }

    /// Observed (positive or negative) labels per category.
    pub fn observed_counts_per_class(&self) -> Vec<usize> {
        self.states
            .axis_iter(Axis(1))
            .map(|col| col.iter().filter(|s| s.is_observed()).count())
            .collect()
    }

    /// Assume-negative target matrix, recomputed from the current states.
    pub fn an_targets(&self) -> Array2<f64> {
        self.states.mapv(LabelState::an_target)
    }

    /// Moves one entry to `to`, enforcing the transition lattice and
    /// agreement with ground truth.
    pub fn transition(
        &mut self,
        sample: usize,
        category: usize,
        to: LabelState,
    ) -> Result<(), DatasetError> {
        let from = *self
            .states
            .get([sample, category])
            .ok_or(DatasetError::OutOfRange { sample, category })?;
        if !from.can_become(to) {
            return Err(DatasetError::IllegalTransition {
                sample,
                category,
                from,
                to,
            });
        }
        self.states[[sample, category]] = to;
        Ok(())
    }

    /// Permanently promotes an unknown label to positive.
    pub fn correct(&mut self, sample: usize, category: usize) -> Result<(), DatasetError> {
        match self.states.get([sample, category]) {
            Some(LabelState::Unknown) => {
                self.transition(sample, category, LabelState::CorrectedPos)
            }
            Some(&from) => Err(DatasetError::IllegalTransition {
                sample,
                category,
                from,
                to: LabelState::CorrectedPos,
            }),
            None => Err(DatasetError::OutOfRange { sample, category }),
        }
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> PartialDataset {
        PartialDataset {
            features: self.features.select(Axis(0), rows),
            states: self.states.select(Axis(0), rows),
            truth: self
                .truth
                .as_ref()
                .map(|t| GroundTruth(t.0.select(Axis(0), rows))),
        }
    }

    fn require_truth(&self) -> Result<&GroundTruth, DatasetError> {
        self.truth.as_ref().ok_or(DatasetError::MissingTruth)
    }
}

fn states_from_truth(truth: ArrayView2<'_, u8>) -> Array2<LabelState> {
    truth.mapv(|v| {
        if v == 1 {
            LabelState::ObsPos
        } else {
            LabelState::ObsNeg
        }
    })
}

/// Parameters of the synthetic full-label generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Target fraction of positive entries.
    pub pos_rate: f64,
    /// Logit temperature; smaller values make labels more deterministic.
    pub temperature: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, dim: usize, classes: usize, pos_rate: f64, seed: u64) -> Self {
        SyntheticSpec {
            n,
            dim,
            classes,
            pos_rate,
            temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n < 1 || self.dim < 1 || self.classes < 2 {
            return Err(DatasetError::InvalidSpec(format!(
                "need n >= 1, dim >= 1, classes >= 2 (got {}, {}, {})",
                self.n, self.dim, self.classes
            )));
        }
        if !(self.pos_rate > 0.0 && self.pos_rate < 1.0) {
            return Err(DatasetError::InvalidSpec(format!(
                "pos_rate {} must lie in (0, 1)",
                self.pos_rate
            )));
        }
        if self.pos_rate * (self.classes as f64) < 1.0 {
            return Err(DatasetError::InvalidSpec(format!(
                "pos_rate * classes = {} must be >= 1",
                self.pos_rate * self.classes as f64
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DatasetError::InvalidSpec(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

// RNG streams of the generator.
const STREAM_MODEL: u64 = 0;
const STREAM_FEATURES: u64 = 1;
const STREAM_UNIFORMS: u64 = 2;
const STREAM_HOLDOUT_FEATURES: u64 = 3;
const STREAM_HOLDOUT_UNIFORMS: u64 = 4;

/// Hidden linear labelling model of the generator.
struct HiddenModel {
    weight: Array2<f64>,
    bias: Array1<f64>,
    temperature: f64,
}

impl HiddenModel {
    fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn label(&self, x: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>) -> Array2<u8> {
        let z = self.logits(x);
        let mut truth = Array2::<u8>::zeros(z.dim());
        for (i, row) in z.outer_iter().enumerate() {
            for (k, &zk) in row.iter().enumerate() {
                if u[[i, k]] < sigmoid(zk / self.temperature) {
                    truth[[i, k]] = 1;
                }
            }
            if truth.row(i).iter().all(|&v| v == 0) {
                truth[[i, argmax(row)]] = 1;
            }
        }
        truth
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>())
}

/// Shifts each category's bias by bisection so that its empirical positive
/// count on the given draws reaches `round(pos_rate · N)`.
fn calibrate_bias(
    model: &mut HiddenModel,
    x: ArrayView2<'_, f64>,
    u: ArrayView2<'_, f64>,
    pos_rate: f64,
) {
    let n = x.nrows();
    let target = ((pos_rate * n as f64).round() as usize).max(1);
    let z = x.dot(&model.weight.t());
    let tau = model.temperature;
    for k in 0..model.bias.len() {
        let count = |bias: f64| {
            (0..n)
                .filter(|&i| u[[i, k]] < sigmoid((z[[i, k]] + bias) / tau))
                .count()
        };
        let (mut lo, mut hi) = (model.bias[k] - 1.0, model.bias[k] + 1.0);
        while count(lo) >= target && lo > -1e6 {
            lo -= 2.0 * (hi - lo);
        }
        while count(hi) < target && hi < 1e6 {
            hi += 2.0 * (hi - lo);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if count(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        model.bias[k] = hi;
    }
}

fn hidden_model(spec: &SyntheticSpec) -> (HiddenModel, Array2<f64>, Array2<f64>) {
    let mut rng = seeded_rng(spec.seed, STREAM_MODEL);
    let weight = normal_matrix(&mut rng, spec.classes, spec.dim);
    let bias = Array1::from_shape_simple_fn(spec.classes, || rng.sample(StandardNormal));
    let mut model = HiddenModel {
        weight,
        bias,
        temperature: spec.temperature,
    };
    let x = normal_matrix(
        &mut seeded_rng(spec.seed, STREAM_FEATURES),
        spec.n,
        spec.dim,
    );
    let u = uniform_matrix(
        &mut seeded_rng(spec.seed, STREAM_UNIFORMS),
        spec.n,
        spec.classes,
    );
    calibrate_bias(&mut model, x.view(), u.view(), spec.pos_rate);
    (model, x, u)
}

/// Fully observed synthetic dataset (states equal truth).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PartialDataset, DatasetError> {
    spec.validate()?;
    let (model, x, u) = hidden_model(spec);
    let truth = model.label(x.view(), u.view());
    let states = states_from_truth(truth.view());
    PartialDataset::new(x, states, Some(GroundTruth(truth)))
}

/// Like [`generate_synthetic`], plus a held-out set of `n_holdout` samples
/// labelled by the same hidden model. The first dataset is identical to what
/// [`generate_synthetic`] returns for `spec`.
pub fn generate_synthetic_with_holdout(
    spec: &SyntheticSpec,
    n_holdout: usize,
) -> Result<(PartialDataset, PartialDataset), DatasetError> {
    spec.validate()?;
    if n_holdout < 1 {
        return Err(DatasetError::InvalidSpec(
            "holdout size must be >= 1".into(),
        ));
    }
    let (model, x, u) = hidden_model(spec);
    let truth = model.label(x.view(), u.view());
    let train = PartialDataset::new(x, states_from_truth(truth.view()), Some(GroundTruth(truth)))?;

    let hx = normal_matrix(
        &mut seeded_rng(spec.seed, STREAM_HOLDOUT_FEATURES),
        n_holdout,
        spec.dim,
    );
    let hu = uniform_matrix(
        &mut seeded_rng(spec.seed, STREAM_HOLDOUT_UNIFORMS),
        n_holdout,
        spec.classes,
    );
    let htruth = model.label(hx.view(), hu.view());
    let holdout = PartialDataset::new(
        hx,
        states_from_truth(htruth.view()),
        Some(GroundTruth(htruth)),
    )?;
    Ok((train, holdout))
}

/// Keeps one uniformly chosen true positive per sample as the only observed
/// label; everything else becomes unknown.
pub fn make_single_positive(
    full: &PartialDataset,
    seed: u64,
) -> Result<PartialDataset, DatasetError> {
    let truth = full.require_truth()?;
    let mut rng = seeded_rng(seed, 0);
    let mut states = Array2::from_elem(full.states.dim(), LabelState::Unknown);
    for (i, row) in truth.0.outer_iter().enumerate() {
        let positives: Vec<usize> = row
            .iter()
            .enumerate()
            .filter_map(|(k, &v)| (v == 1).then_some(k))
            .collect();
        if positives.is_empty() {
            return Err(DatasetError::NoPositive(i));
        }
        let keep = positives[rng.random_range(0..positives.len())];
        states[[i, keep]] = LabelState::ObsPos;
    }
    PartialDataset::new(full.features.clone(), states, full.truth.clone())
}

/// Keeps a uniformly random `⌊fraction · N · K⌋` subset of entries observed
/// (with their true values); the rest become unknown.
pub fn make_fraction_observed(
    full: &PartialDataset,
    fraction: f64,
    seed: u64,
) -> Result<PartialDataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let truth = full.require_truth()?;
    let (n, k) = full.states.dim();
    let keep = floor_count(fraction, n * k);
    let mut rng = seeded_rng(seed, 0);
    let mut states = Array2::from_elem((n, k), LabelState::Unknown);
    for flat in index::sample(&mut rng, n * k, keep) {
        let (i, j) = (flat / k, flat % k);
        states[[i, j]] = if truth.0[[i, j]] == 1 {
            LabelState::ObsPos
        } else {
            LabelState::ObsNeg
        };
    }
    PartialDataset::new(full.features.clone(), states, full.truth.clone())
}

/// Keeps `⌊fraction · N⌋` uniformly chosen samples, in their original order.
pub fn subsample(
    ds: &PartialDataset,
    fraction: f64,
    seed: u64,
) -> Result<PartialDataset, DatasetError> {
    Ok(ds.select_rows(&subsample_indices(ds.n_samples(), fraction, seed)?))
}

pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let keep = floor_count(fraction, n);
    if keep == 0 {
        return Err(DatasetError::EmptySubsample);
    }
    let mut rows = index::sample(&mut seeded_rng(seed, 0), n, keep).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset<W: Write>(ds: &PartialDataset, mut w: W) -> io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{} {} {}", ds.n_samples(), ds.dim(), ds.n_classes())?;
    for row in ds.features.outer_iter() {
        let line: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    for row in ds.states.outer_iter() {
        let line: Vec<String> = row.iter().map(|s| s.token().to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    if let Some(truth) = &ds.truth {
        writeln!(w, "TRUTH")?;
        for row in truth.0.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &PartialDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PartialDataset, DatasetError> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Line source that skips `#` comment lines and blank lines while keeping
/// physical line numbers for error messages.
pub(crate) struct Lines<R> {
    inner: io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    pub(crate) fn new(r: R) -> Self {
        Lines {
            inner: r.lines(),
            line_no: 0,
        }
    }

    pub(crate) fn parse_err(&self, line: usize, msg: impl Into<String>) -> DatasetError {
        DatasetError::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Next content line, or `None` at end of input.
    pub(crate) fn next_content(&mut self) -> Result<Option<(usize, String)>, DatasetError> {
        for line in self.inner.by_ref() {
            self.line_no += 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(Some((self.line_no, trimmed.to_string())));
        }
        Ok(None)
    }

    pub(crate) fn expect(&mut self, what: &str) -> Result<(usize, String), DatasetError> {
        match self.next_content()? {
            Some(l) => Ok(l),
            None => Err(self.parse_err(
                self.line_no + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }

    /// Reads one line of exactly `width` whitespace-separated fields.
    pub(crate) fn fields(
        &mut self,
        width: usize,
        what: &str,
    ) -> Result<(usize, Vec<String>), DatasetError> {
        let (no, line) = self.expect(what)?;
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if fields.len() != width {
            return Err(self.parse_err(
                no,
                format!("expected {width} values in {what}, found {}", fields.len()),
            ));
        }
        Ok((no, fields))
    }

    pub(crate) fn reals(&mut self, width: usize, what: &str) -> Result<Vec<f64>, DatasetError> {
        let (no, fields) = self.fields(width, what)?;
        fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| self.parse_err(no, format!("invalid real '{f}'")))
            })
            .collect()
    }
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<PartialDataset, DatasetError> {
    let mut lines = Lines::new(r);
    let (no, header) = lines.expect("header")?;
    if header != MAGIC {
        return Err(lines.parse_err(no, format!("bad header '{header}', expected '{MAGIC}'")));
    }
    let (no, dims) = lines.fields(3, "dimension line")?;
    let mut parsed = [0usize; 3];
    for (slot, f) in parsed.iter_mut().zip(&dims) {
        *slot = f
            .parse()
            .map_err(|_| lines.parse_err(no, format!("invalid dimension '{f}'")))?;
    }
    let [n, d, k] = parsed;
    if n < 1 || d < 1 || k < 2 {
        return Err(lines.parse_err(no, format!("need N >= 1, D >= 1, K >= 2 (got {n} {d} {k})")));
    }

    let mut features = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let row = lines.reals(d, "feature row")?;
        features.row_mut(i).assign(&Array1::from(row));
    }
    let mut states = Array2::from_elem((n, k), LabelState::Unknown);
    for i in 0..n {
        let (no, fields) = lines.fields(k, "label row")?;
        for (j, tok) in fields.iter().enumerate() {
            states[[i, j]] = LabelState::from_token(tok)
                .ok_or_else(|| lines.parse_err(no, format!("illegal state token '{tok}'")))?;
        }
    }
    let truth = match lines.next_content()? {
        None => None,
        Some((no, line)) if line == "TRUTH" => {
            let _ = no;
            let mut truth = Array2::<u8>::zeros((n, k));
            for i in 0..n {
                let (no, fields) = lines.fields(k, "truth row")?;
                for (j, tok) in fields.iter().enumerate() {
                    truth[[i, j]] = match tok.as_str() {
                        "0" => 0,
                        "1" => 1,
                        _ => {
                            return Err(lines.parse_err(no, format!("illegal truth token '{tok}'")))
                        }
                    };
                }
            }
            if let Some((no, _)) = lines.next_content()? {
                return Err(lines.parse_err(no, "trailing content after TRUTH section"));
            }
            Some(GroundTruth(truth))
        }
        Some((no, line)) => {
            return Err(
                lines.parse_err(no, format!("unexpected content '{line}' after label rows"))
            );
        }
    };
    PartialDataset::new(features, states, truth).map_err(|e| match e {
        DatasetError::NonFiniteFeature { sample, dim } => DatasetError::Parse {
            line: 3 + sample,
            msg: format!("non-finite feature in dimension {dim}"),
        },
        other => other,
    })
}
