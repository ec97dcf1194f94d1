//! Likelihood models as graph builders.
//!
//! Parameters of `K` posterior samples are stacked as the rows of a `K×P`
//! node. Labels are passed as a `B×C` matrix of class probabilities: one-hot
//! rows for observed labels, softmax rows for soft pseudo-labels.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Axis, Join, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// Binary classifier with one logit `w·x + b`.
    LogisticRegression,
    /// Fully connected network with a softmax output layer.
    FeedforwardBnn {
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// Scalar location model `x ~ N(θ, noise_std²)`; the "input" is the
    /// observation itself. Conjugate to the Gaussian prior, so every
    /// posterior quantity has a closed form.
    GaussianMean { noise_std: f64 },
}

fn default_prior_std() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    /// Per-layer prior scale for networks; overrides `prior_std`.
    #[serde(default)]
    pub layer_prior_std: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticRegression,
            input_dim,
            num_classes: 2,
            prior_std: 1.0,
            layer_prior_std: None,
        }
    }

    pub fn bnn(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::FeedforwardBnn { hidden, activation: Activation::Tanh },
            input_dim,
            num_classes,
            prior_std: 1.0,
            layer_prior_std: None,
        }
    }

    pub fn gaussian_mean(noise_std: f64, prior_std: f64) -> Self {
        ModelSpec {
            kind: ModelKind::GaussianMean { noise_std },
            input_dim: 1,
            num_classes: 1,
            prior_std,
            layer_prior_std: None,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A named block of the flat parameter vector, read as a `rows×cols` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter values together with their shape map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<ParamSlice>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Vec<ParamSlice>) -> Result<Self> {
        let total: usize = layout.iter().map(ParamSlice::len).sum();
        if total != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a layout of length {total}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn block(&self, name: &str) -> Option<Tensor> {
        let s = self.layout.iter().find(|s| s.name == name)?;
        Some(Tensor::new(s.rows, s.cols, self.values[s.range()].to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: Vec<ParamSlice>,
    /// Prior std of every parameter.
    prior_std: Vec<f64>,
    /// `(weight slice, bias slice)` per layer, networks only.
    layers: Vec<(usize, usize)>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Model> {
        let d = spec.input_dim;
        if d == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if !(spec.prior_std > 0.0) {
            return Err(Error::invalid("prior std must be positive"));
        }
        let mut layout = Vec::new();
        let mut layers = Vec::new();
        let push = |layout: &mut Vec<ParamSlice>, name: String, rows, cols| {
            let offset = layout.last().map_or(0, |s: &ParamSlice| s.offset + s.len());
            layout.push(ParamSlice { name, offset, rows, cols });
            layout.len() - 1
        };
        match &spec.kind {
            ModelKind::LogisticRegression => {
                if spec.num_classes != 2 {
                    return Err(Error::invalid("logistic regression needs exactly 2 classes"));
                }
                push(&mut layout, "w".into(), 1, d);
                push(&mut layout, "b".into(), 1, 1);
            }
            ModelKind::FeedforwardBnn { hidden, .. } => {
                if spec.num_classes < 2 {
                    return Err(Error::invalid("classifier needs at least 2 classes"));
                }
                if hidden.contains(&0) {
                    return Err(Error::invalid("hidden widths must be positive"));
                }
                let mut widths = vec![d];
                widths.extend(hidden);
                widths.push(spec.num_classes);
                for (l, w) in widths.windows(2).enumerate() {
                    let wi = push(&mut layout, format!("W{l}"), w[0], w[1]);
                    let bi = push(&mut layout, format!("b{l}"), 1, w[1]);
                    layers.push((wi, bi));
                }
            }
            ModelKind::GaussianMean { noise_std } => {
                if !(*noise_std > 0.0) || d != 1 || spec.num_classes != 1 {
                    return Err(Error::invalid(
                        "gaussian-mean model needs noise_std > 0, input_dim 1, num_classes 1",
                    ));
                }
                push(&mut layout, "mu".into(), 1, 1);
            }
        }
        let mut prior_std = Vec::new();
        match (&spec.layer_prior_std, layers.is_empty()) {
            (Some(per_layer), false) => {
                if per_layer.len() != layers.len() {
                    return Err(Error::invalid(format!(
                        "{} layer prior stds for {} layers",
                        per_layer.len(),
                        layers.len()
                    )));
                }
                for (&(wi, bi), &s) in layers.iter().zip(per_layer) {
                    if !(s > 0.0) {
                        return Err(Error::invalid("prior std must be positive"));
                    }
                    prior_std.extend(std::iter::repeat_n(s, layout[wi].len() + layout[bi].len()));
                }
            }
            _ => {
                let p: usize = layout.iter().map(ParamSlice::len).sum();
                prior_std = vec![spec.prior_std; p];
            }
        }
        Ok(Model { spec, layout, prior_std, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn param_len(&self) -> usize {
        self.prior_std.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn prior_std(&self) -> &[f64] {
        &self.prior_std
    }

    /// True for the continuous-observation model, which has no classes.
    pub fn is_regression(&self) -> bool {
        matches!(self.spec.kind, ModelKind::GaussianMean { .. })
    }

    /// Starting point for variational means: networks get weights and biases
    /// uniform in `±1/sqrt(fan_in)` so hidden units differ; other models
    /// start at zero.
    pub fn init_means(&self, seed: u64) -> Vec<f64> {
        let mut means = vec![0.0; self.param_len()];
        let mut rng = rng::substream(seed, Stream::Init, 1);
        for &(wi, bi) in &self.layers {
            let bound = 1.0 / (self.layout[wi].rows as f64).sqrt();
            for s in [&self.layout[wi], &self.layout[bi]] {
                for m in &mut means[s.range()] {
                    *m = rng.random_range(-bound..bound);
                }
            }
        }
        means
    }

    pub fn parameters(&self, values: Vec<f64>) -> Result<ParameterVector> {
        ParameterVector::new(values, self.layout.clone())
    }

    fn check_theta(&self, tape: &Tape, theta: Var) -> Result<usize> {
        let (k, p) = tape.shape(theta);
        if p != self.param_len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter length {p}, model expects {}",
                self.param_len()
            )));
        }
        Ok(k)
    }

    fn check_inputs(&self, tape: &Tape, x: Var) -> Result<usize> {
        let (b, d) = tape.shape(x);
        if d != self.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input dim {d}, model expects {}",
                self.spec.input_dim
            )));
        }
        Ok(b)
    }

    /// `log N(θ_k; 0, diag(prior_std²))` for each row: `K×1`.
    pub fn log_prior(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        self.check_theta(tape, theta)?;
        let inv_var = Tensor::row(self.prior_std.iter().map(|s| 1.0 / (s * s)).collect());
        let inv_var = tape.constant(inv_var);
        let sq = tape.square(theta);
        let scaled = tape.mul(sq, inv_var);
        let quad = tape.sum(scaled, Axis::Cols);
        let norm: f64 = self.prior_std.iter().map(|s| 0.5 * LN_2PI + s.ln()).sum();
        Ok(tape.affine(quad, -0.5, -norm))
    }

    /// Per-class log-probabilities for a single parameter row: `B×C`.
    /// For the Gaussian-mean model this is the `B×1` observation density.
    pub fn log_probs(&self, tape: &mut Tape, theta_row: Var, x: Var) -> Result<Var> {
        let k = self.check_theta(tape, theta_row)?;
        if k != 1 {
            return Err(Error::ShapeMismatch(format!("expected one parameter row, got {k}")));
        }
        self.check_inputs(tape, x)?;
        let d = self.spec.input_dim;
        match &self.spec.kind {
            ModelKind::LogisticRegression => {
                let w = tape.slice(theta_row, 0, 0, 1, d);
                let b = tape.slice(theta_row, 0, d, 1, 1);
                let wt = tape.transpose(w);
                let xw = tape.matmul(x, wt);
                let a = tape.add(xw, b);
                let na = tape.neg(a);
                let l0 = tape.log_sigmoid(na);
                let l1 = tape.log_sigmoid(a);
                Ok(tape.concat(&[l0, l1], Join::Cols))
            }
            ModelKind::FeedforwardBnn { activation, .. } => {
                let logits = self.network(tape, theta_row, x, *activation);
                tape.log_softmax(logits)
            }
            ModelKind::GaussianMean { noise_std } => {
                let diff = tape.sub(x, theta_row);
                let sq = tape.square(diff);
                let s2 = noise_std * noise_std;
                Ok(tape.affine(sq, -0.5 / s2, -0.5 * (2.0 * PI * s2).ln()))
            }
        }
    }

    fn network(&self, tape: &mut Tape, theta_row: Var, x: Var, act: Activation) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let ws = &self.layout[wi];
            let bs = &self.layout[bi];
            let w = tape.slice(theta_row, 0, ws.offset, 1, ws.len());
            let w = tape.reshape(w, ws.rows, ws.cols);
            let b = tape.slice(theta_row, 0, bs.offset, 1, bs.len());
            let hw = tape.matmul(h, w);
            h = tape.add(hw, b);
            if l < last {
                h = match act {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        h
    }

    /// Log-likelihood of every (sample, point) pair: `K×B`. `labels` is
    /// `B×C` class probabilities; each entry is `Σ_c labels[b,c]·log p(c|x_b,θ_k)`.
    /// For the Gaussian-mean model `labels` is ignored and may be `B×1`.
    pub fn loglik_matrix(&self, tape: &mut Tape, theta: Var, x: Var, labels: Var) -> Result<Var> {
        let k = self.check_theta(tape, theta)?;
        let b = self.check_inputs(tape, x)?;
        let (lb, lc) = tape.shape(labels);
        if lb != b || (lc != self.spec.num_classes && !self.is_regression()) {
            return Err(Error::ShapeMismatch(format!(
                "labels {lb}x{lc} for {b} points and {} classes",
                self.spec.num_classes
            )));
        }
        let d = self.spec.input_dim;
        match &self.spec.kind {
            ModelKind::LogisticRegression => {
                let w = tape.slice(theta, 0, 0, k, d);
                let bias = tape.slice(theta, 0, d, k, 1);
                let wt = tape.transpose(w);
                let xw = tape.matmul(x, wt);
                let bt = tape.transpose(bias);
                let a = tape.add(xw, bt);
                let na = tape.neg(a);
                let l1 = tape.log_sigmoid(a);
                let l0 = tape.log_sigmoid(na);
                let p0 = tape.slice(labels, 0, 0, b, 1);
                let p1 = tape.slice(labels, 0, 1, b, 1);
                let t0 = tape.mul(l0, p0);
                let t1 = tape.mul(l1, p1);
                let ll = tape.add(t0, t1);
                Ok(tape.transpose(ll))
            }
            ModelKind::FeedforwardBnn { .. } => {
                let mut rows = Vec::with_capacity(k);
                for i in 0..k {
                    let th = tape.row(theta, i);
                    let lp = self.log_probs(tape, th, x)?;
                    let weighted = tape.mul(lp, labels);
                    let per_point = tape.sum(weighted, Axis::Cols);
                    rows.push(tape.transpose(per_point));
                }
                Ok(tape.concat(&rows, Join::Rows))
            }
            ModelKind::GaussianMean { noise_std } => {
                let xt = tape.transpose(x);
                let diff = tape.sub(xt, theta);
                let sq = tape.square(diff);
                let s2 = noise_std * noise_std;
                Ok(tape.affine(sq, -0.5 / s2, -0.5 * (2.0 * PI * s2).ln()))
            }
        }
    }

    /// `log p(y | x, θ)` for one point and a hard class index: `1×1`.
    pub fn log_likelihood_point(&self, tape: &mut Tape, theta_row: Var, x_row: Var, y: usize) -> Result<Var> {
        let c = if self.is_regression() { 1 } else { self.spec.num_classes };
        if y >= c {
            return Err(Error::invalid(format!("class index {y} outside 0..{c}")));
        }
        let lp = self.log_probs(tape, theta_row, x_row)?;
        Ok(tape.slice(lp, 0, y, 1, 1))
    }

    /// Class probabilities `B×C` at a fixed parameter vector.
    pub fn predict_probs(&self, theta: &[f64], x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let th = tape.constant(Tensor::row(theta.to_vec()));
        let xv = tape.constant(x.clone());
        let lp = self.log_probs(&mut tape, th, xv)?;
        Ok(tape.value(lp).map(f64::exp))
    }

    /// Class probabilities for a single input.
    pub fn predict_prob(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_probs(theta, &Tensor::row(x.to_vec()))?.into_data())
    }
}
