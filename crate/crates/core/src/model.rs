//! A small fully connected softmax classifier with hand-written backprop.
//!
//! Parameters live in one flat vector. Layer `l` with fan-in `a` and fan-out
//! `b` occupies `b * a` row-major weights followed by `b` biases. The last
//! layer produces logits; the model output is their softmax, so every
//! prediction lies strictly inside the simplex.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::simplex::{ProbVector, SimplexError};

/// Default cap on the parameter count for exact Jacobians.
pub const JACOBIAN_PARAM_LIMIT: usize = 10_000;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid training schedule: {0}")]
    InvalidSchedule(String),
    #[error("expected input of dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("parameter vector has length {actual}, architecture needs {expected}")]
    ParamLength { expected: usize, actual: usize },
    #[error("jacobian requested for {params} parameters, limit is {limit}")]
    ArchTooLarge { params: usize, limit: usize },
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Target(#[from] SimplexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the activation.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    /// Cross-entropy `-sum_i target_i log h_i`.
    Cel,
    /// `0.5 * ||h - target||^2`.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianOf {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        activation: Activation,
    ) -> Result<Self, ModelError> {
        let arch = Self {
            input_dim,
            hidden,
            classes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidArchitecture("input_dim must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidArchitecture("classes must be >= 2".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidArchitecture(
                "hidden widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self, ModelError> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(ModelError::ParamLength {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub fn init(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = rng::stream(&[rng::domain::MODEL_INIT, seed]);
    let mut values = Vec::with_capacity(arch.param_count());
    for w in arch.widths().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelParams {
        arch: arch.clone(),
        values,
    }
}

/// Reusable activation buffers for one forward/backward pass.
struct Scratch {
    /// `pre[l]`: pre-activations of layer `l` (the last one holds logits).
    pre: Vec<Vec<f64>>,
    /// `post[l]`: input to layer `l`; `post[0]` is the sample itself.
    post: Vec<Vec<f64>>,
    probs: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    fn new(arch: &Architecture) -> Self {
        let widths = arch.widths();
        let max_w = widths.iter().copied().max().unwrap_or(0);
        Self {
            pre: widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            post: widths[..widths.len() - 1]
                .iter()
                .map(|&w| vec![0.0; w])
                .collect(),
            probs: vec![0.0; arch.classes],
            delta: Vec::with_capacity(max_w),
            delta_prev: Vec::with_capacity(max_w),
        }
    }

    fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn forward_into(params: &ModelParams, x: &[f64], s: &mut Scratch) {
    let arch = &params.arch;
    let layers = arch.hidden.len() + 1;
    s.post[0].copy_from_slice(x);
    let mut offset = 0;
    for l in 0..layers {
        let fan_in = s.post[l].len();
        let fan_out = s.pre[l].len();
        let weights = &params.values[offset..offset + fan_in * fan_out];
        let bias = &params.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let (input, pre) = (&s.post[l], &mut s.pre[l]);
        for (j, z) in pre.iter_mut().enumerate() {
            let row = &weights[j * fan_in..(j + 1) * fan_in];
            *z = bias[j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
        }
        if l + 1 < layers {
            let (pre, post) = (&s.pre[l], &mut s.post[l + 1]);
            for (a, &z) in post.iter_mut().zip(pre) {
                *a = arch.activation.apply(z);
            }
        }
    }
    let (logits, probs) = (s.pre.last().unwrap(), &mut s.probs);
    softmax_into(logits, probs);
}

/// Accumulates `scale * d(logits . dlogits)/dw` into `grad`, using the
/// activations left in `s` by the preceding forward pass.
fn backward_into(params: &ModelParams, s: &mut Scratch, dlogits: &[f64], scale: f64, grad: &mut [f64]) {
    let arch = &params.arch;
    let layers = arch.hidden.len() + 1;
    let widths = arch.widths();
    let mut offsets = Vec::with_capacity(layers);
    let mut offset = 0;
    for w in widths.windows(2) {
        offsets.push(offset);
        offset += w[0] * w[1] + w[1];
    }
    s.delta.clear();
    s.delta.extend(dlogits.iter().map(|d| d * scale));
    for l in (0..layers).rev() {
        let fan_in = widths[l];
        let fan_out = widths[l + 1];
        let base = offsets[l];
        let input = &s.post[l];
        for j in 0..fan_out {
            let dj = s.delta[j];
            if dj == 0.0 {
                continue;
            }
            let g = &mut grad[base + j * fan_in..base + (j + 1) * fan_in];
            for (gw, a) in g.iter_mut().zip(input) {
                *gw += dj * a;
            }
            grad[base + fan_in * fan_out + j] += dj;
        }
        if l > 0 {
            let weights = &params.values[base..base + fan_in * fan_out];
            s.delta_prev.clear();
            s.delta_prev.resize(fan_in, 0.0);
            for j in 0..fan_out {
                let dj = s.delta[j];
                if dj == 0.0 {
                    continue;
                }
                let row = &weights[j * fan_in..(j + 1) * fan_in];
                for (dp, w) in s.delta_prev.iter_mut().zip(row) {
                    *dp += w * dj;
                }
            }
            let (pre, post) = (&s.pre[l - 1], &s.post[l]);
            for ((dp, &z), &a) in s.delta_prev.iter_mut().zip(pre).zip(post) {
                *dp *= arch.activation.derivative(z, a);
            }
            std::mem::swap(&mut s.delta, &mut s.delta_prev);
        }
    }
}

/// Gradient of the loss with respect to the logits, given `h = softmax`.
fn loss_logit_grad(kind: LossKind, probs: &[f64], target: &[f64], out: &mut Vec<f64>) {
    out.clear();
    match kind {
        // softmax + cross-entropy collapses to h - y because sum(y) = 1
        LossKind::Cel => out.extend(probs.iter().zip(target).map(|(h, y)| h - y)),
        LossKind::Mse => {
            let inner: f64 = probs
                .iter()
                .zip(target)
                .map(|(h, y)| (h - y) * h)
                .sum();
            out.extend(
                probs
                    .iter()
                    .zip(target)
                    .map(|(h, y)| h * ((h - y) - inner)),
            );
        }
    }
}

fn loss_value(kind: LossKind, probs: &[f64], target: &[f64]) -> f64 {
    match kind {
        LossKind::Cel => -probs
            .iter()
            .zip(target)
            .map(|(h, y)| if *y == 0.0 { 0.0 } else { y * h.max(LOG_FLOOR).ln() })
            .sum::<f64>(),
        LossKind::Mse => 0.5 * probs.iter().zip(target).map(|(h, y)| (h - y) * (h - y)).sum::<f64>(),
    }
}

/// Loss of an arbitrary prediction against a target; `prediction` plays the
/// role of the model output.
pub fn loss_between(kind: LossKind, prediction: &[f64], target: &[f64]) -> f64 {
    loss_value(kind, prediction, target)
}

fn check_input(params: &ModelParams, x: &[f64]) -> Result<(), ModelError> {
    if x.len() != params.arch.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: params.arch.input_dim,
            actual: x.len(),
        });
    }
    Ok(())
}

pub fn logits(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_input(params, x)?;
    let mut s = Scratch::new(&params.arch);
    forward_into(params, x, &mut s);
    Ok(s.logits().to_vec())
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ProbVector, ModelError> {
    check_input(params, x)?;
    let mut s = Scratch::new(&params.arch);
    forward_into(params, x, &mut s);
    Ok(ProbVector::new(s.probs.clone())?)
}

pub fn loss(params: &ModelParams, x: &[f64], target: &ProbVector, kind: LossKind) -> Result<f64, ModelError> {
    check_input(params, x)?;
    let mut s = Scratch::new(&params.arch);
    forward_into(params, x, &mut s);
    Ok(loss_value(kind, &s.probs, target.as_slice()))
}

/// Softmax outputs for every row of a flat `rows x input_dim` feature matrix,
/// returned as one flat `rows x classes` buffer.
pub fn predict_batch(params: &ModelParams, features: &[f64]) -> Vec<f64> {
    let d = params.arch.input_dim;
    let mut s = Scratch::new(&params.arch);
    let mut out = Vec::with_capacity(features.len() / d * params.arch.classes);
    for x in features.chunks_exact(d) {
        forward_into(params, x, &mut s);
        out.extend_from_slice(&s.probs);
    }
    out
}

pub fn accuracy(params: &ModelParams, features: &[f64], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let probs = predict_batch(params, features);
    let correct = probs
        .chunks_exact(params.arch.classes)
        .zip(labels)
        .filter(|(p, &y)| crate::simplex::argmax(p) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Features paired with soft targets, both stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    features: Vec<f64>,
    targets: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl TrainingSet {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, dim: usize, classes: usize) -> Result<Self, ModelError> {
        if dim == 0 || features.len() % dim != 0 || classes < 2 {
            return Err(ModelError::InvalidArchitecture(
                "training set shape does not match its dimensions".into(),
            ));
        }
        let rows = features.len() / dim;
        if rows == 0 {
            return Err(ModelError::EmptyDataset);
        }
        if targets.len() != rows * classes {
            return Err(ModelError::DimensionMismatch {
                expected: rows * classes,
                actual: targets.len(),
            });
        }
        for t in targets.chunks_exact(classes) {
            crate::simplex::validate(t)?;
        }
        Ok(Self {
            features,
            targets,
            dim,
            classes,
        })
    }

    /// One-hot targets from hard labels.
    pub fn from_labels(features: Vec<f64>, labels: &[usize], dim: usize, classes: usize) -> Result<Self, ModelError> {
        let mut targets = vec![0.0; labels.len() * classes];
        for (row, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(ModelError::InvalidArchitecture(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            targets[row * classes + y] = 1.0;
        }
        Self::new(features, targets, dim, classes)
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, row: usize) -> &[f64] {
        &self.features[row * self.dim..(row + 1) * self.dim]
    }

    pub fn target(&self, row: usize) -> &[f64] {
        &self.targets[row * self.classes..(row + 1) * self.classes]
    }

    fn check(&self, arch: &Architecture) -> Result<(), ModelError> {
        if self.dim != arch.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: arch.input_dim,
                actual: self.dim,
            });
        }
        if self.classes != arch.classes {
            return Err(ModelError::DimensionMismatch {
                expected: arch.classes,
                actual: self.classes,
            });
        }
        Ok(())
    }
}

/// Sums per-sample gradients of `rows` into `grad` (not averaged) and
/// returns the summed loss. Rows are visited in the given order.
fn accumulate(
    params: &ModelParams,
    set: &TrainingSet,
    rows: &[usize],
    kind: LossKind,
    s: &mut Scratch,
    dlogits: &mut Vec<f64>,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for &r in rows {
        forward_into(params, set.features(r), s);
        let target = set.target(r);
        total += loss_value(kind, &s.probs, target);
        loss_logit_grad(kind, &s.probs, target, dlogits);
        backward_into(params, s, dlogits, 1.0, grad);
    }
    total
}

/// Mean gradient of the loss over the whole set.
///
/// For one sample this equals `J^T (h - target)`, with `J` the Jacobian of
/// the logits (cross-entropy) or of the softmax output (MSE).
pub fn grad(params: &ModelParams, set: &TrainingSet, kind: LossKind) -> Result<Vec<f64>, ModelError> {
    set.check(&params.arch)?;
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut s = Scratch::new(&params.arch);
    let mut dl = Vec::with_capacity(params.arch.classes);
    let mut g = vec![0.0; params.len()];
    accumulate(params, set, &rows, kind, &mut s, &mut dl, &mut g);
    let inv = 1.0 / set.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

/// Mean loss over the whole set.
pub fn mean_loss(params: &ModelParams, set: &TrainingSet, kind: LossKind) -> Result<f64, ModelError> {
    set.check(&params.arch)?;
    let mut s = Scratch::new(&params.arch);
    let total: f64 = (0..set.len())
        .map(|r| {
            forward_into(params, set.features(r), &mut s);
            loss_value(kind, &s.probs, set.target(r))
        })
        .sum();
    Ok(total / set.len() as f64)
}

pub fn jacobian(params: &ModelParams, x: &[f64], of: JacobianOf) -> Result<Vec<Vec<f64>>, ModelError> {
    jacobian_with_limit(params, x, of, JACOBIAN_PARAM_LIMIT)
}

/// Exact `classes x params` Jacobian, one reverse pass per output row.
pub fn jacobian_with_limit(
    params: &ModelParams,
    x: &[f64],
    of: JacobianOf,
    limit: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    check_input(params, x)?;
    if params.len() > limit {
        return Err(ModelError::ArchTooLarge {
            params: params.len(),
            limit,
        });
    }
    let c = params.arch.classes;
    let mut s = Scratch::new(&params.arch);
    forward_into(params, x, &mut s);
    let probs = s.probs.clone();
    let mut seed = vec![0.0; c];
    (0..c)
        .map(|k| {
            match of {
                JacobianOf::Logits => {
                    seed.iter_mut().for_each(|v| *v = 0.0);
                    seed[k] = 1.0;
                }
                JacobianOf::Probabilities => {
                    for (j, v) in seed.iter_mut().enumerate() {
                        let delta = if j == k { 1.0 } else { 0.0 };
                        *v = probs[k] * (delta - probs[j]);
                    }
                }
            }
            let mut row = vec![0.0; params.len()];
            backward_into(params, &mut s, &seed, 1.0, &mut row);
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrDecay {
    /// Linear decay to zero over this call's own epochs.
    OwnEpochs,
    /// Linear decay to zero over a budget spanning several calls; this call
    /// starts `start_epoch` epochs into it.
    GlobalBudget { start_epoch: usize, total_epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay: LrDecay,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSchedule(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if let LrDecay::GlobalBudget { start_epoch, total_epochs } = self.decay {
            if start_epoch + self.epochs > total_epochs {
                return bad("epochs run past the global budget");
            }
        }
        Ok(())
    }

    /// `(epochs already spent, total epochs)` of the linear decay.
    fn horizon(&self) -> (usize, usize) {
        match self.decay {
            LrDecay::OwnEpochs => (0, self.epochs),
            LrDecay::GlobalBudget { start_epoch, total_epochs } => (start_epoch, total_epochs),
        }
    }
}

/// Mini-batch SGD with momentum, L2 weight decay and a per-step linear
/// learning-rate decay. The shuffle order is drawn from `seed`.
pub fn train(
    params: &ModelParams,
    set: &TrainingSet,
    schedule: &TrainSchedule,
    kind: LossKind,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    schedule.validate()?;
    set.check(&params.arch)?;
    let mut rng = rng::stream(&[rng::domain::CLIENT_TRAIN, seed]);
    let mut w = params.clone();
    let n = set.len();
    let steps_per_epoch = n.div_ceil(schedule.batch_size);
    let (spent, total) = schedule.horizon();
    let total_steps = (total * steps_per_epoch) as f64;

    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![0.0; w.len()];
    let mut g = vec![0.0; w.len()];
    let mut s = Scratch::new(&w.arch);
    let mut dl = Vec::with_capacity(w.arch.classes);

    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let global_step = ((spent + epoch) * steps_per_epoch + step) as f64;
            let lr = schedule.lr * (1.0 - global_step / total_steps);
            g.iter_mut().for_each(|v| *v = 0.0);
            epoch_loss += accumulate(&w, set, batch, kind, &mut s, &mut dl, &mut g);
            let inv = 1.0 / batch.len() as f64;
            for ((wi, vi), gi) in w.values.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                let step_grad = gi * inv + schedule.weight_decay * *wi;
                *vi = schedule.momentum * *vi + step_grad;
                *wi -= lr * *vi;
            }
        }
        if !epoch_loss.is_finite() || !w.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
    }
    Ok(w)
}
