//! Small multi-label classifier with hand-written gradients.
//!
//! Two architectures are supported: a single linear layer, and one ReLU
//! hidden layer followed by a linear output layer. Outputs go through a
//! sigmoid and are clamped to `[PROB_EPS, 1 - PROB_EPS]`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_real, DatasetError, Lines};
use crate::seeded_rng;

/// Probability clamp used by every forward pass.
pub const PROB_EPS: f64 = 1e-7;

const MAGIC: &str = "WSMLMODEL/1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("non-finite input at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown architecture '{0}' (expected linear or mlp1)")]
    UnknownArchitecture(String),
    #[error("unknown optimizer '{0}' (expected sgd or adam)")]
    UnknownOptimizer(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl From<DatasetError> for ModelError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Parse { line, msg } => ModelError::Parse { line, msg },
            DatasetError::Io(e) => ModelError::Io(e),
            other => ModelError::Parse {
                line: 0,
                msg: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp1,
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp1" => Ok(Architecture::Mlp1),
            _ => Err(ModelError::UnknownArchitecture(s.to_string())),
        }
    }
}

impl Architecture {
    pub fn token(self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp1 => "mlp1",
        }
    }
}

/// Fully connected layer, `y = W x + b` with `W` of shape out × in.
/// Also used as the container for that layer's gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn init(rng: &mut impl Rng, out: usize, inp: usize) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        let weight =
            Array2::from_shape_simple_fn((out, inp), || std * rng.sample::<f64, _>(StandardNormal));
        Dense {
            weight,
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    hidden: Option<Dense>,
    output: Dense,
    /// Blocks optimizer updates to the hidden layer.
    pub frozen_hidden: bool,
}

/// Gradients, shaped like the classifier's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn tensor_slices<'a>(hidden: &'a Option<Dense>, output: &'a Dense) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(4);
    if let Some(h) = hidden {
        out.push(h.weight.as_slice().expect("standard layout"));
        out.push(h.bias.as_slice().expect("standard layout"));
    }
    out.push(output.weight.as_slice().expect("standard layout"));
    out.push(output.bias.as_slice().expect("standard layout"));
    out
}

impl Gradients {
    /// Parameter tensors in the order `[W1, b1,] W, b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        tensor_slices(&self.hidden, &self.output)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Intermediate values of a forward pass that backward needs.
struct ForwardCache {
    hidden_pre: Option<Array2<f64>>,
    hidden_act: Option<Array2<f64>>,
    logits: Array2<f64>,
}

pub fn init_classifier(
    arch: Architecture,
    dim: usize,
    classes: usize,
    hidden: usize,
    seed: u64,
) -> Result<Classifier, ModelError> {
    if dim < 1 || classes < 1 {
        return Err(ModelError::InvalidDimensions(format!(
            "need D >= 1 and K >= 1 (got D={dim}, K={classes})"
        )));
    }
    let mut rng = seeded_rng(seed, 0);
    match arch {
        Architecture::Linear => Ok(Classifier {
            hidden: None,
            output: Dense::init(&mut rng, classes, dim),
            frozen_hidden: false,
        }),
        Architecture::Mlp1 => {
            if hidden < 1 {
                return Err(ModelError::InvalidDimensions("mlp1 needs H >= 1".into()));
            }
            let h = Dense::init(&mut rng, hidden, dim);
            let out = Dense::init(&mut rng, classes, hidden);
            Ok(Classifier {
                hidden: Some(h),
                output: out,
                frozen_hidden: false,
            })
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce(p: f64, t: f64) -> f64 {
    let mut l = 0.0;
    if t != 0.0 {
        l -= t * p.ln();
    }
    if t != 1.0 {
        l -= (1.0 - t) * (1.0 - p).ln();
    }
    l
}

impl Classifier {
    /// Builds a linear classifier from explicit parameters.
    pub fn linear(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self, ModelError> {
        if weight.nrows() != bias.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "weight has {} rows, bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Classifier {
            hidden: None,
            output: Dense {
                weight: weight.as_standard_layout().to_owned(),
                bias,
            },
            frozen_hidden: false,
        })
    }

    pub fn architecture(&self) -> Architecture {
        if self.hidden.is_some() {
            Architecture::Mlp1
        } else {
            Architecture::Linear
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weight.ncols(),
            None => self.output.weight.ncols(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.output.bias.len()
    }

    /// Hidden width, 0 for the linear architecture.
    pub fn hidden_size(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.bias.len())
    }

    pub fn hidden_layer(&self) -> Option<&Dense> {
        self.hidden.as_ref()
    }

    pub fn output_layer(&self) -> &Dense {
        &self.output
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense {
        &mut self.output
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in the order `[W1, b1,] W, b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        tensor_slices(&self.hidden, &self.output)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4);
        if let Some(h) = &mut self.hidden {
            out.push(h.weight.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice_mut().expect("standard layout"));
        out.push(self.output.bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Index of the first output-layer tensor in [`Classifier::tensors`].
    fn output_tensor_offset(&self) -> usize {
        if self.hidden.is_some() {
            2
        } else {
            0
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<(), ModelError> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput { row, col });
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache, ModelError> {
        self.check_input(x)?;
        Ok(match &self.hidden {
            None => ForwardCache {
                hidden_pre: None,
                hidden_act: None,
                logits: self.output.apply(x),
            },
            Some(h) => {
                let pre = h.apply(x);
                let act = pre.mapv(|v| v.max(0.0));
                let logits = self.output.apply(act.view());
                ForwardCache {
                    hidden_pre: Some(pre),
                    hidden_act: Some(act),
                    logits,
                }
            }
        })
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward_cached(x)?.logits)
    }

    /// Clamped sigmoid probabilities, B × K.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.logits(x)?.mapv(|z| clamp_prob(sigmoid(z))))
    }

    /// Weighted batch loss `(1/(B·K)) Σ w ⊙ BCE(P, T)`.
    pub fn loss(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        weights: ArrayView2<'_, f64>,
    ) -> Result<f64, ModelError> {
        let p = self.forward(x)?;
        check_shapes(&p, targets, weights)?;
        Ok(weighted_loss(p.view(), targets, weights))
    }

    /// Loss and gradients of the weighted batch loss. Weights are constants.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        weights: ArrayView2<'_, f64>,
    ) -> Result<(f64, Gradients), ModelError> {
        let cache = self.forward_cached(x)?;
        let (b, k) = cache.logits.dim();
        let probs = cache.logits.mapv(|z| clamp_prob(sigmoid(z)));
        check_shapes(&probs, targets, weights)?;
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(ModelError::ShapeMismatch(
                "targets must lie in [0, 1]".into(),
            ));
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(ModelError::ShapeMismatch(
                "weights must be nonnegative".into(),
            ));
        }
        let loss = weighted_loss(probs.view(), targets, weights);
        let scale = 1.0 / (b * k) as f64;

        // dL/dz = w (p - t) / (B K), zero where the clamp is active.
        let mut dz = Array2::<f64>::zeros((b, k));
        Zip::from(&mut dz)
            .and(&cache.logits)
            .and(targets)
            .and(weights)
            .for_each(|g, &z, &t, &w| {
                let p = sigmoid(z);
                if w != 0.0 && p > PROB_EPS && p < 1.0 - PROB_EPS {
                    *g = w * (p - t) * scale;
                }
            });

        let input_to_output = cache.hidden_act.as_ref().map_or(x, |a| a.view());
        let output = Dense {
            weight: row_major(dz.t().dot(&input_to_output)),
            bias: dz.sum_axis(Axis(0)),
        };
        let hidden = match (&self.hidden, &cache.hidden_pre) {
            (Some(_), Some(pre)) => {
                let mut dpre = dz.dot(&self.output.weight);
                Zip::from(&mut dpre).and(pre).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                Some(Dense {
                    weight: row_major(dpre.t().dot(&x)),
                    bias: dpre.sum_axis(Axis(0)),
                })
            }
            _ => None,
        };
        Ok((loss, Gradients { hidden, output }))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            hidden: self
                .hidden
                .as_ref()
                .map(|h| Dense::zeros(h.weight.nrows(), h.weight.ncols())),
            output: Dense::zeros(self.output.weight.nrows(), self.output.weight.ncols()),
        }
    }
}

fn check_shapes(
    p: &Array2<f64>,
    targets: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
) -> Result<(), ModelError> {
    if targets.dim() != p.dim() || weights.dim() != p.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "outputs {:?}, targets {:?}, weights {:?}",
            p.dim(),
            targets.dim(),
            weights.dim()
        )));
    }
    Ok(())
}

fn weighted_loss(p: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> f64 {
    let mut sum = 0.0;
    Zip::from(p).and(t).and(w).for_each(|&p, &t, &w| {
        if w != 0.0 {
            sum += w * bce(p, t);
        }
    });
    sum / p.len() as f64
}

/// Largest relative error between analytic and central-difference
/// gradients, `|ga - gn| / max(|ga|, |gn|, 1e-8)`, over all parameters.
pub fn grad_check(
    model: &Classifier,
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
    h: f64,
) -> Result<f64, ModelError> {
    let (_, grads) = model.backward(x, targets, weights)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (ti, ga) in analytic.iter().enumerate() {
        for (pi, &g_a) in ga.iter().enumerate() {
            let orig = probe.tensors()[ti][pi];
            probe.tensors_mut()[ti][pi] = orig + h;
            let plus = probe.loss(x, targets, weights)?;
            probe.tensors_mut()[ti][pi] = orig - h;
            let minus = probe.loss(x, targets, weights)?;
            probe.tensors_mut()[ti][pi] = orig;
            let g_n = (plus - minus) / (2.0 * h);
            let denom = g_a.abs().max(g_n.abs()).max(1e-8);
            worst = worst.max((g_a - g_n).abs() / denom);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(ModelError::UnknownOptimizer(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Learning-rate multiplier for the output layer (1 = off).
    pub output_lr_multiplier: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            output_lr_multiplier: 1.0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with per-tensor Adam moments and step counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &Classifier) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        OptimizerState {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    pub fn step(&mut self, model: &mut Classifier, grads: &Gradients) -> Result<(), ModelError> {
        if !grads.is_finite() {
            return Err(ModelError::NonFiniteGradient);
        }
        let frozen = model.frozen_hidden && model.hidden.is_some();
        let out_offset = model.output_tensor_offset();
        let grad_tensors = grads.tensors();
        if grad_tensors.len() != self.m.len() {
            return Err(ModelError::ShapeMismatch(
                "gradients do not match optimizer state".into(),
            ));
        }
        let cfg = self.config;
        for (ti, param) in model.tensors_mut().into_iter().enumerate() {
            if frozen && ti < out_offset {
                continue;
            }
            let g = grad_tensors[ti];
            if g.len() != param.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "tensor {ti} size mismatch"
                )));
            }
            let lr = if ti >= out_offset {
                cfg.lr * cfg.output_lr_multiplier
            } else {
                cfg.lr
            };
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in param.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    self.steps[ti] += 1;
                    let t = self.steps[ti] as i32;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
                    for i in 0..param.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn write_model<W: Write>(model: &Classifier, mut w: W) -> io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", model.architecture().token())?;
    writeln!(
        w,
        "{} {} {}",
        model.input_dim(),
        model.n_classes(),
        model.hidden_size()
    )?;
    let mut layers = Vec::new();
    if let Some(h) = &model.hidden {
        layers.push(h);
    }
    layers.push(&model.output);
    for layer in layers {
        for row in layer.weight.outer_iter() {
            let line: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        let line: Vec<String> = layer.bias.iter().map(|&v| fmt_real(v)).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn save_model(model: &Classifier, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Classifier, ModelError> {
    read_model(BufReader::new(File::open(path)?))
}

fn read_dense<R: BufRead>(
    lines: &mut Lines<R>,
    out: usize,
    inp: usize,
) -> Result<Dense, ModelError> {
    let mut layer = Dense::zeros(out, inp);
    for r in 0..out {
        let row = lines.reals(inp, "weight row")?;
        layer.weight.row_mut(r).assign(&Array1::from(row));
    }
    layer.bias = Array1::from(lines.reals(out, "bias row")?);
    if let Some(bad) = layer
        .weight
        .iter()
        .chain(layer.bias.iter())
        .find(|v| !v.is_finite())
    {
        return Err(ModelError::Parse {
            line: 0,
            msg: format!("non-finite parameter {bad}"),
        });
    }
    Ok(layer)
}

pub fn read_model<R: BufRead>(r: R) -> Result<Classifier, ModelError> {
    let mut lines = Lines::new(r);
    let (no, header) = lines.expect("header")?;
    if header != MAGIC {
        return Err(ModelError::Parse {
            line: no,
            msg: format!("bad header '{header}', expected '{MAGIC}'"),
        });
    }
    let (no, arch) = lines.expect("architecture line")?;
    let arch: Architecture = arch.parse().map_err(|e: ModelError| ModelError::Parse {
        line: no,
        msg: e.to_string(),
    })?;
    let (no, dims) = lines.fields(3, "dimension line")?;
    let mut parsed = [0usize; 3];
    for (slot, f) in parsed.iter_mut().zip(&dims) {
        *slot = f.parse().map_err(|_| ModelError::Parse {
            line: no,
            msg: format!("invalid dimension '{f}'"),
        })?;
    }
    let [d, k, h] = parsed;
    let bad_dims = d < 1
        || k < 1
        || (arch == Architecture::Mlp1 && h < 1)
        || (arch == Architecture::Linear && h != 0);
    if bad_dims {
        return Err(ModelError::Parse {
            line: no,
            msg: format!("invalid dimensions D={d} K={k} H={h} for {}", arch.token()),
        });
    }
    let model = match arch {
        Architecture::Linear => Classifier {
            hidden: None,
            output: read_dense(&mut lines, k, d)?,
            frozen_hidden: false,
        },
        Architecture::Mlp1 => {
            let hidden = read_dense(&mut lines, h, d)?;
            let output = read_dense(&mut lines, k, h)?;
            Classifier {
                hidden: Some(hidden),
                output,
                frozen_hidden: false,
            }
        }
    };
    if let Some((no, _)) = lines.next_content()? {
        return Err(ModelError::Parse {
            line: no,
            msg: "trailing content after parameters".into(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(
        seed: u64,
        b: usize,
        d: usize,
        k: usize,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = seeded_rng(seed, 7);
        let x = Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
        let t =
            Array2::from_shape_simple_fn(
                (b, k),
                || if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 },
            );
        let w = Array2::from_shape_simple_fn((b, k), || {
            if rng.random::<f64>() < 0.2 {
                0.0
            } else {
                rng.random::<f64>() * 2.0
            }
        });
        (x, t, w)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = init_classifier(Architecture::Linear, 2, 3, 0, 0).unwrap();
        assert_eq!(m.output_layer().weight.dim(), (3, 2));
        assert_eq!(m.output_layer().bias.to_vec(), vec![0.0; 3]);
        assert_eq!(
            m,
            init_classifier(Architecture::Linear, 2, 3, 0, 0).unwrap()
        );
        assert!(init_classifier(Architecture::Mlp1, 2, 3, 0, 0).is_err());
        assert!(init_classifier(Architecture::Linear, 0, 3, 0, 0).is_err());
        let mlp = init_classifier(Architecture::Mlp1, 4, 3, 5, 1).unwrap();
        assert_eq!(mlp.n_parameters(), 4 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = Classifier::linear(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let p = m.forward(array![[1.0, -2.0], [3.0, 0.5]].view()).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_logits_are_clamped() {
        let m = Classifier::linear(array![[1.0], [-1.0]], array![0.0, 0.0]).unwrap();
        let p = m.forward(array![[40.0]].view()).unwrap();
        assert_eq!(p[[0, 0]], 1.0 - 1e-7);
        assert_eq!(p[[0, 1]], 1e-7);
    }

    #[test]
    fn forward_is_batch_independent() {
        let m = init_classifier(Architecture::Mlp1, 5, 4, 8, 3).unwrap();
        let (x, _, _) = random_batch(1, 16, 5, 4);
        let all = m.forward(x.view()).unwrap();
        let one = m.forward(x.slice(ndarray::s![6..7, ..])).unwrap();
        assert_eq!(one.row(0), all.row(6));
    }

    #[test]
    fn forward_rejects_non_finite() {
        let m = init_classifier(Architecture::Linear, 2, 2, 0, 0).unwrap();
        assert!(matches!(
            m.forward(array![[1.0, f64::NAN]].view()),
            Err(ModelError::NonFiniteInput { row: 0, col: 1 })
        ));
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let m = init_classifier(Architecture::Mlp1, 3, 2, 4, 0).unwrap();
        let (x, t, _) = random_batch(2, 4, 3, 2);
        let (loss, g) = m
            .backward(x.view(), t.view(), Array2::zeros((4, 2)).view())
            .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(
            grad_check(&m, x.view(), t.view(), Array2::zeros((4, 2)).view(), 1e-5).unwrap(),
            0.0
        );
    }

    #[test]
    fn hand_derived_gradient() {
        let m = Classifier::linear(array![[0.0]], array![0.0]).unwrap();
        let (loss, g) = m
            .backward(
                array![[1.0]].view(),
                array![[1.0]].view(),
                array![[1.0]].view(),
            )
            .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.output.weight[[0, 0]], -0.5);
        assert_eq!(g.output.bias[0], -0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = init_classifier(Architecture::Linear, 2, 3, 0, 0).unwrap();
        let x = Array2::zeros((4, 2));
        assert!(matches!(
            m.backward(
                x.view(),
                Array2::zeros((4, 2)).view(),
                Array2::ones((4, 3)).view()
            ),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn linear_grad_check() {
        let m = init_classifier(Architecture::Linear, 3, 2, 0, 11).unwrap();
        let (x, t, w) = random_batch(5, 4, 3, 2);
        let err = grad_check(&m, x.view(), t.view(), w.view(), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_row_batches_keep_row_major_gradients() {
        let m = init_classifier(Architecture::Mlp1, 4, 3, 5, 2).unwrap();
        let (x, t, w) = random_batch(9, 1, 4, 3);
        let (_, g) = m.backward(x.view(), t.view(), w.view()).unwrap();
        assert_eq!(g.tensors().len(), 4);
        assert!(grad_check(&m, x.view(), t.view(), w.view(), 1e-5).is_ok());
    }

    #[test]
    fn mlp_grad_check_away_from_kinks() {
        let mut seed = 0;
        let (m, x, t, w) = loop {
            let m = init_classifier(Architecture::Mlp1, 3, 2, 6, seed).unwrap();
            let (x, t, w) = random_batch(seed + 100, 5, 3, 2);
            let pre =
                x.dot(&m.hidden_layer().unwrap().weight.t()) + &m.hidden_layer().unwrap().bias;
            if pre.iter().all(|a| a.abs() > 1e-3) {
                break (m, x, t, w);
            }
            seed += 1;
        };
        let err = grad_check(&m, x.view(), t.view(), w.view(), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sgd_step() {
        let mut m = Classifier::linear(array![[1.0]], array![1.0]).unwrap();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            output_lr_multiplier: 1.0,
        };
        let mut opt = OptimizerState::new(cfg, &m);
        let mut g = m.zero_gradients();
        g.output.weight[[0, 0]] = 2.0;
        g.output.bias[0] = 2.0;
        opt.step(&mut m, &g).unwrap();
        assert!((m.output_layer().weight[[0, 0]] - 0.8).abs() < 1e-15);
        assert!((m.output_layer().bias[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = init_classifier(Architecture::Mlp1, 3, 2, 4, 9).unwrap();
        let before: Vec<f64> = m.tensors().concat();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &m);
        let mut g = m.zero_gradients();
        for layer in [g.hidden.as_mut().unwrap(), &mut g.output] {
            layer.weight.fill(1.0);
            layer.bias.fill(1.0);
        }
        opt.step(&mut m, &g).unwrap();
        for (a, b) in before.iter().zip(m.tensors().concat()) {
            assert!(((a - b) - 1e-3).abs() < 1e-10, "{}", a - b);
        }
    }

    #[test]
    fn frozen_hidden_is_not_updated() {
        let mut m = init_classifier(Architecture::Mlp1, 3, 2, 4, 9).unwrap();
        m.frozen_hidden = true;
        let hidden_before = m.hidden_layer().unwrap().clone();
        let out_before = m.output_layer().clone();
        let (x, t, w) = random_batch(3, 6, 3, 2);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &m);
        let (_, g) = m.backward(x.view(), t.view(), w.view()).unwrap();
        opt.step(&mut m, &g).unwrap();
        assert_eq!(m.hidden_layer().unwrap(), &hidden_before);
        assert_ne!(m.output_layer(), &out_before);
    }

    #[test]
    fn output_lr_multiplier_scales_only_output() {
        let base = init_classifier(Architecture::Mlp1, 3, 2, 4, 1).unwrap();
        let (x, t, w) = random_batch(4, 6, 3, 2);
        let (_, g) = base.backward(x.view(), t.view(), w.view()).unwrap();
        let run = |mult: f64| {
            let mut m = base.clone();
            let cfg = OptimizerConfig {
                kind: OptimizerKind::Sgd,
                lr: 0.1,
                output_lr_multiplier: mult,
            };
            OptimizerState::new(cfg, &m).step(&mut m, &g).unwrap();
            m
        };
        let (a, b) = (run(1.0), run(10.0));
        assert_eq!(a.hidden_layer(), b.hidden_layer());
        let da = &a.output_layer().bias - &base.output_layer().bias;
        let db = &b.output_layer().bias - &base.output_layer().bias;
        for (x, y) in da.iter().zip(db.iter()) {
            assert!((10.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_decreases_loss_monotonically() {
        let x = array![
            [1.0, 0.2],
            [0.9, -0.1],
            [-1.0, 0.3],
            [-0.8, -0.4],
            [0.1, 1.2],
            [0.0, -1.1]
        ];
        let t = array![
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [1.0, 1.0],
            [0.0, 0.0]
        ];
        let w = Array2::ones(t.dim());
        for arch in [Architecture::Linear, Architecture::Mlp1] {
            let mut m = init_classifier(arch, 2, 2, 8, 5).unwrap();
            let mut opt = OptimizerState::new(
                OptimizerConfig {
                    kind: OptimizerKind::Sgd,
                    lr: 0.05,
                    output_lr_multiplier: 1.0,
                },
                &m,
            );
            let mut prev = f64::INFINITY;
            for _ in 0..50 {
                let (loss, g) = m.backward(x.view(), t.view(), w.view()).unwrap();
                assert!(loss <= prev + 1e-12, "{arch:?}: {loss} > {prev}");
                prev = loss;
                opt.step(&mut m, &g).unwrap();
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for arch in [Architecture::Linear, Architecture::Mlp1] {
            let m = init_classifier(arch, 4, 3, 5, 21).unwrap();
            let mut buf = Vec::new();
            write_model(&m, &mut buf).unwrap();
            assert_eq!(read_model(buf.as_slice()).unwrap(), m);
        }
        assert!(matches!(
            read_model("WSMLMODEL/1\nconv\n1 1 0\n".as_bytes()),
            Err(ModelError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn gradients_are_permutation_equivariant(seed in 0u64..500, shift in 1usize..4) {
            let k = 4;
            let m = init_classifier(Architecture::Mlp1, 3, k, 5, seed).unwrap();
            let (x, t, w) = random_batch(seed, 6, 3, k);
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let mut pm = m.clone();
            {
                let out = pm.output_layer_mut();
                out.weight = m.output_layer().weight.select(Axis(0), &perm);
                out.bias = m.output_layer().bias.select(Axis(0), &perm);
            }
            let pt = t.select(Axis(1), &perm);
            let pw = w.select(Axis(1), &perm);
            let (l1, g1) = m.backward(x.view(), t.view(), w.view()).unwrap();
            let (l2, g2) = pm.backward(x.view(), pt.view(), pw.view()).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
            let permuted_w = g1.output.weight.select(Axis(0), &perm);
            let permuted_b = g1.output.bias.select(Axis(0), &perm);
            for (a, b) in permuted_w.iter().zip(g2.output.weight.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in permuted_b.iter().zip(g2.output.bias.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let (h1, h2) = (g1.hidden.unwrap(), g2.hidden.unwrap());
            for (a, b) in h1.weight.iter().zip(h2.weight.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
