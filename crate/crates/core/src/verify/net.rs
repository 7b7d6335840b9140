//! A small dense network with reference forward, backward and SGD.
//!
//! Layer `l` computes `q = a·Wᵀ + bias` and `a' = act(q)`, one sample per
//! row. Losses are averaged over the batch; `mse` carries the ½ factor.

use super::matrix::{max_rel_error, Matrix};
use crate::model::{ModelError, ModelGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    /// Row-wise softmax; only valid on the last layer.
    Softmax,
}

impl Activation {
    /// Applies an elementwise activation. Softmax is row-wise and handled
    /// by [`activate`].
    fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity | Activation::Softmax => x,
        }
    }

    fn derivative(self, q: f64) -> f64 {
        match self {
            Activation::Relu => {
                if q > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity | Activation::Softmax => 1.0,
        }
    }
}

/// Applies `act` to full-width pre-activations.
pub fn activate(act: Activation, q: &Matrix) -> Matrix {
    match act {
        Activation::Softmax => {
            let mut out = q.clone();
            for r in 0..q.rows() {
                let row = q.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (c, e) in exps.iter().enumerate() {
                    out.set(r, c, e / sum);
                }
            }
            out
        }
        other => q.map(|x| other.scalar(x)),
    }
}

/// Multiplies an error signal by the elementwise activation derivative.
pub fn apply_derivative(act: Activation, delta: &Matrix, q: &Matrix) -> Matrix {
    delta.zip_map(q, |d, q| d * act.derivative(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cross-entropy needs probability outputs (softmax last layer): {0}")]
    NotProbabilities(String),
    #[error("diverged (non-finite gradients)")]
    NonFiniteGradients,
    #[error("diverged at iteration {iteration} (non-finite loss)")]
    Diverged { iteration: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("softmax is only supported on the last layer (layer {0})")]
    SoftmaxNotLast(usize),
    #[error("label {label} out of range for output width {width}")]
    LabelRange { label: usize, width: usize },
    #[error("{0}")]
    Partitioned(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_out × fan_in`.
    pub w: Matrix,
    pub bias: Vec<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.w.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub layers: Vec<DenseLayer>,
}

impl TinyNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, VerifyError> {
        if layers.is_empty() {
            return Err(VerifyError::Empty);
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(VerifyError::Shape(format!(
                    "layer {} outputs {} but layer {} takes {}",
                    i + 1,
                    pair[0].fan_out(),
                    i + 2,
                    pair[1].fan_in()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(VerifyError::Shape(format!("layer {} bias length", i + 1)));
            }
            if l.act == Activation::Softmax && i + 1 != layers.len() {
                return Err(VerifyError::SoftmaxNotLast(i + 1));
            }
        }
        Ok(Self { layers })
    }

    /// Seeded weights uniform in `[-0.5, 0.5] / sqrt(fan_in)`, zero biases.
    /// `widths` lists the input width followed by every layer's output width.
    pub fn random(widths: &[usize], acts: &[Activation], seed: u64) -> Result<Self, VerifyError> {
        if widths.len() < 2 || acts.len() + 1 != widths.len() {
            return Err(VerifyError::Shape("need one activation per layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .zip(acts)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-0.5..=0.5) * scale)
                    .collect();
                DenseLayer {
                    w: Matrix::from_vec(fan_out, fan_in, data),
                    bias: vec![0.0; fan_out],
                    act,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// Input width followed by every layer's output width.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].fan_in())
            .chain(self.layers.iter().map(DenseLayer::fan_out))
            .collect()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::fan_out)
    }

    /// The abstract layer graph the planner works on.
    pub fn model_graph(&self, name: &str) -> Result<ModelGraph, ModelError> {
        Ok(ModelGraph::dense_chain(name, &self.widths())?.default_costs(8))
    }

    /// Every weight then every bias, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.data().iter().chain(&l.bias).copied())
            .collect()
    }

    /// Largest elementwise relative parameter difference.
    pub fn max_rel_diff(&self, other: &TinyNet, floor: f64) -> f64 {
        max_rel_error(&self.flat_params(), &other.flat_params(), floor)
    }
}

/// Inputs, one sample per row, and one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(x: Matrix, labels: Vec<usize>) -> Result<Self, VerifyError> {
        if x.rows() == 0 {
            return Err(VerifyError::Empty);
        }
        if x.rows() != labels.len() {
            return Err(VerifyError::Shape(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slice(&self, rows: std::ops::Range<usize>) -> Batch {
        Batch {
            x: self.x.slice_rows(rows.clone()),
            labels: self.labels[rows].to_vec(),
        }
    }
}

/// Targets for a loss: one-hot rows, or the label itself for a single
/// output column.
pub fn target_matrix(labels: &[usize], width: usize) -> Result<Matrix, VerifyError> {
    let mut t = Matrix::zeros(labels.len(), width);
    for (r, &label) in labels.iter().enumerate() {
        if width == 1 {
            t.set(r, 0, label as f64);
        } else if label < width {
            t.set(r, label, 1.0);
        } else {
            return Err(VerifyError::LabelRange { label, width });
        }
    }
    Ok(t)
}

/// Per-layer input activations and pre-activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape {
    /// `a[0]` is the input, `a[l]` layer `l`'s output.
    pub a: Vec<Matrix>,
    /// `q[l-1]` is layer `l`'s pre-activation.
    pub q: Vec<Matrix>,
}

impl ActivationTape {
    pub fn output(&self) -> &Matrix {
        self.a.last().expect("tape holds the input")
    }
}

pub fn forward(net: &TinyNet, x: &Matrix) -> Result<ActivationTape, VerifyError> {
    if x.cols() != net.layers[0].fan_in() {
        return Err(VerifyError::Shape(format!(
            "input has {} columns, layer 1 takes {}",
            x.cols(),
            net.layers[0].fan_in()
        )));
    }
    let mut a = vec![x.clone()];
    let mut q = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let mut z = a.last().expect("non-empty").matmul_bt(&layer.w);
        z.add_row_vector(&layer.bias);
        a.push(activate(layer.act, &z));
        q.push(z);
    }
    Ok(ActivationTape { a, q })
}

fn check_probabilities(y: &Matrix) -> Result<(), VerifyError> {
    for r in 0..y.rows() {
        let row = y.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(VerifyError::NotProbabilities(format!("row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// Summed per-sample loss of `y` against the labels, divided by `denom`.
pub fn loss_sum(y: &Matrix, labels: &[usize], kind: LossKind, denom: usize) -> Result<f64, VerifyError> {
    if y.rows() != labels.len() {
        return Err(VerifyError::Shape(format!(
            "{} outputs but {} labels",
            y.rows(),
            labels.len()
        )));
    }
    if y.rows() == 0 {
        return Err(VerifyError::Empty);
    }
    let mut total = 0.0;
    match kind {
        LossKind::Mse => {
            let t = target_matrix(labels, y.cols())?;
            for (p, t) in y.data().iter().zip(t.data()) {
                total += 0.5 * (p - t) * (p - t);
            }
        }
        LossKind::CrossEntropy => {
            check_probabilities(y)?;
            for (r, &label) in labels.iter().enumerate() {
                if label >= y.cols() {
                    return Err(VerifyError::LabelRange { label, width: y.cols() });
                }
                total -= y.get(r, label).ln();
            }
        }
    }
    Ok(total / denom as f64)
}

/// Mean per-sample loss.
pub fn loss(y: &Matrix, labels: &[usize], kind: LossKind) -> Result<f64, VerifyError> {
    loss_sum(y, labels, kind, y.rows())
}

/// Error signal at the last layer's pre-activation, for a loss summed over
/// the rows and divided by `denom`.
pub fn output_delta(
    act: Activation,
    q: &Matrix,
    y: &Matrix,
    labels: &[usize],
    kind: LossKind,
    denom: usize,
) -> Result<Matrix, VerifyError> {
    let scale = 1.0 / denom as f64;
    let t = target_matrix(labels, y.cols())?;
    match (kind, act) {
        (LossKind::CrossEntropy, Activation::Softmax) => Ok(y.zip_map(&t, |p, t| (p - t) * scale)),
        _ => {
            // dL/dy, then through the activation
            let g = match kind {
                LossKind::Mse => y.zip_map(&t, |p, t| (p - t) * scale),
                LossKind::CrossEntropy => y.zip_map(&t, |p, t| if t == 1.0 { -scale / p } else { 0.0 }),
            };
            match act {
                Activation::Softmax => {
                    let mut d = g.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, g)| p * g).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    Ok(d)
                }
                other => Ok(apply_derivative(other, &g, q)),
            }
        }
    }
}

/// Weight and bias gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.data().iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

/// Reverse-mode gradients of the batch-mean loss.
pub fn backward(
    net: &TinyNet,
    tape: &ActivationTape,
    labels: &[usize],
    kind: LossKind,
) -> Result<GradientSet, VerifyError> {
    backward_scaled(net, tape, labels, kind, labels.len())
}

/// Gradients of the loss summed over the tape's rows and divided by `denom`.
pub fn backward_scaled(
    net: &TinyNet,
    tape: &ActivationTape,
    labels: &[usize],
    kind: LossKind,
    denom: usize,
) -> Result<GradientSet, VerifyError> {
    let l = net.layers.len();
    if tape.a.len() != l + 1 || tape.q.len() != l {
        return Err(VerifyError::Shape("tape does not match network depth".into()));
    }
    let last = &net.layers[l - 1];
    let mut delta = output_delta(last.act, &tape.q[l - 1], tape.output(), labels, kind, denom)?;
    let mut grads = Vec::with_capacity(l);
    for idx in (0..l).rev() {
        let layer = &net.layers[idx];
        grads.push(LayerGrad {
            w: delta.tmatmul(&tape.a[idx]),
            bias: delta.col_sums(),
        });
        if idx > 0 {
            let upstream = delta.matmul(&layer.w);
            delta = apply_derivative(net.layers[idx - 1].act, &upstream, &tape.q[idx - 1]);
        }
    }
    grads.reverse();
    Ok(GradientSet { layers: grads })
}

/// `p − α·ω` for every parameter; the input is left untouched.
pub fn sgd_step(net: &TinyNet, grads: &GradientSet, alpha: f64) -> Result<TinyNet, VerifyError> {
    if grads.layers.len() != net.layers.len() {
        return Err(VerifyError::Shape("gradient depth".into()));
    }
    if !grads.is_finite() {
        return Err(VerifyError::NonFiniteGradients);
    }
    let mut out = net.clone();
    for (layer, g) in out.layers.iter_mut().zip(&grads.layers) {
        if layer.w.shape() != g.w.shape() || layer.bias.len() != g.bias.len() {
            return Err(VerifyError::Shape("gradient shape".into()));
        }
        sgd_update(&mut layer.w, &mut layer.bias, g, alpha);
    }
    Ok(out)
}

pub(crate) fn sgd_update(w: &mut Matrix, bias: &mut [f64], g: &LayerGrad, alpha: f64) {
    for (p, d) in w.data_mut().iter_mut().zip(g.w.data()) {
        *p -= alpha * d;
    }
    for (p, d) in bias.iter_mut().zip(&g.bias) {
        *p -= alpha * d;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    /// Per-iteration decay: `α_t = lr / (1 + decay·(t − 1))`.
    pub decay: f64,
    pub loss: LossKind,
    pub iterations: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VerifyError::Config("learning rate must be positive".into()));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(VerifyError::Config("decay must be non-negative".into()));
        }
        if self.iterations == 0 {
            return Err(VerifyError::Config("at least one iteration is required".into()));
        }
        Ok(())
    }

    /// Learning rate of iteration `t` (1-based).
    pub fn rate(&self, t: usize) -> f64 {
        self.lr / (1.0 + self.decay * (t as f64 - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: f64,
    pub acc: f64,
}

/// Training history as CSV.
pub fn history_csv(h: &[HistoryEntry]) -> String {
    let mut out = String::from("iteration,loss,acc\n");
    for e in h {
        out.push_str(&format!("{},{:.12e},{:.6}\n", e.iteration, e.loss, e.acc));
    }
    out
}

/// Batch used at iteration `t` (1-based): batches are cycled.
pub fn batch_for(data: &[Batch], t: usize) -> &Batch {
    &data[(t - 1) % data.len()]
}

/// Predicted class per row: argmax, or `y ≥ 0.5` for one output column.
pub fn predictions(y: &Matrix) -> Vec<usize> {
    (0..y.rows())
        .map(|r| {
            let row = y.row(r);
            if row.len() == 1 {
                usize::from(row[0] >= 0.5)
            } else {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            }
        })
        .collect()
}

/// Binary confusion counts, class 1 being positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[usize], labels: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&p, &l) in pred.iter().zip(labels) {
            match (p == l, l != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.fp += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> Result<f64, VerifyError> {
        let total = self.tp + self.tn + self.fp + self.fn_;
        if total == 0 {
            return Err(VerifyError::Empty);
        }
        Ok((self.tp + self.tn) as f64 / total as f64)
    }
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64, VerifyError> {
    if pred.len() != labels.len() {
        return Err(VerifyError::Shape(format!(
            "{} predictions but {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Confusion::from_predictions(pred, labels).accuracy()
}

/// Plain full-batch gradient descent; the reference for every
/// distributed run.
pub fn train_sequential(
    net: &TinyNet,
    data: &[Batch],
    cfg: &TrainConfig,
) -> Result<(TinyNet, Vec<HistoryEntry>), VerifyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(VerifyError::Empty);
    }
    let mut net = net.clone();
    let mut history = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        let batch = batch_for(data, t);
        let tape = forward(&net, &batch.x)?;
        let value = loss(tape.output(), &batch.labels, cfg.loss)?;
        if !value.is_finite() {
            return Err(VerifyError::Diverged { iteration: t });
        }
        let acc = accuracy(&predictions(tape.output()), &batch.labels)?;
        history.push(HistoryEntry {
            iteration: t,
            loss: value,
            acc,
        });
        let grads = backward(&net, &tape, &batch.labels, cfg.loss)?;
        net = sgd_step(&net, &grads, cfg.rate(t)).map_err(|e| match e {
            VerifyError::NonFiniteGradients => VerifyError::Diverged { iteration: t },
            other => other,
        })?;
    }
    Ok((net, history))
}

/// Size-weighted sum of per-micro-batch mean gradients.
pub fn accumulated_gradients(
    net: &TinyNet,
    batch: &Batch,
    kind: LossKind,
    sizes: &[usize],
) -> Result<GradientSet, VerifyError> {
    if sizes.iter().sum::<usize>() != batch.len() {
        return Err(VerifyError::Shape("micro-batch sizes do not sum to the batch".into()));
    }
    let b = batch.len() as f64;
    let mut acc: Option<GradientSet> = None;
    let mut lo = 0;
    for &s in sizes {
        let part = batch.slice(lo..lo + s);
        lo += s;
        let tape = forward(net, &part.x)?;
        let g = backward(net, &tape, &part.labels, kind)?;
        let weight = s as f64 / b;
        let scaled: Vec<LayerGrad> = g
            .layers
            .iter()
            .map(|l| LayerGrad {
                w: l.w.map(|x| x * weight),
                bias: l.bias.iter().map(|x| x * weight).collect(),
            })
            .collect();
        match acc.as_mut() {
            None => acc = Some(GradientSet { layers: scaled }),
            Some(total) => {
                for (t, s) in total.layers.iter_mut().zip(&scaled) {
                    t.w.add_assign(&s.w);
                    for (x, y) in t.bias.iter_mut().zip(&s.bias) {
                        *x += y;
                    }
                }
            }
        }
    }
    acc.ok_or(VerifyError::Empty)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crosses a relu kink.
    pub excluded: usize,
}

/// Denominator floor of the gradient check's relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn relu_pattern(net: &TinyNet, tape: &ActivationTape) -> Vec<i8> {
    net.layers
        .iter()
        .zip(&tape.q)
        .filter(|(l, _)| l.act == Activation::Relu)
        .flat_map(|(_, q)| q.data().iter().map(|&v| (v > 0.0) as i8 - (v < 0.0) as i8))
        .collect()
}

/// Compares backward's gradients with central differences of step `h` over
/// every parameter.
pub fn grad_check(
    net: &TinyNet,
    x: &Matrix,
    labels: &[usize],
    kind: LossKind,
    h: f64,
) -> Result<GradCheck, VerifyError> {
    if !(h > 0.0) {
        return Err(VerifyError::Config("step must be positive".into()));
    }
    let tape = forward(net, x)?;
    let analytic = backward(net, &tape, labels, kind)?;
    let base_pattern = relu_pattern(net, &tape);
    let eval = |n: &TinyNet| -> Result<(f64, Vec<i8>), VerifyError> {
        let t = forward(n, x)?;
        Ok((loss(t.output(), labels, kind)?, relu_pattern(n, &t)))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for (li, layer) in net.layers.iter().enumerate() {
        let count = layer.w.data().len() + layer.bias.len();
        for k in 0..count {
            let nudge = |delta: f64| {
                let mut n = net.clone();
                let target = &mut n.layers[li];
                let wl = target.w.data().len();
                if k < wl {
                    target.w.data_mut()[k] += delta;
                } else {
                    target.bias[k - wl] += delta;
                }
                n
            };
            let (plus, pp) = eval(&nudge(h))?;
            let (minus, pm) = eval(&nudge(-h))?;
            if pp != base_pattern || pm != base_pattern {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let g = &analytic.layers[li];
            let a = if k < g.w.data().len() {
                g.w.data()[k]
            } else {
                g.bias[k - g.w.data().len()]
            };
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
