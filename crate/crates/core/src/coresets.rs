//! Weighted pseudo-data: locations `u`, outputs `z`, and the weight
//! parametrizations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `v = (N/M)·1`.
    FixedRatio,
    /// `v = v_raw`, kept nonnegative by projection.
    FreeNonneg,
    /// `v = N·softmax(β)`.
    #[default]
    Softmax,
    /// `v = α·N·softmax(β)`, `α` learnable and initialized to 1.
    SoftmaxAlpha,
    /// `v = 1`: no rescaling for the size reduction.
    Unit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Class-stratified random subset of the data.
    #[default]
    Subset,
    /// Gaussian draws around the class means.
    Gaussian,
}

/// Coreset parameter groups, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Field {
    U,
    Z,
    Beta,
    V,
    Alpha,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::U, Field::Z, Field::Beta, Field::V, Field::Alpha];

    pub fn name(self) -> &'static str {
        match self {
            Field::U => "coreset.u",
            Field::Z => "coreset.z",
            Field::Beta => "coreset.beta",
            Field::V => "coreset.v",
            Field::Alpha => "coreset.alpha",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "kebab-case")]
pub enum Labels {
    /// Class index per point.
    Hard(Vec<usize>),
    /// `M×C` logits; probabilities are their row-wise softmax.
    Soft(Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub u: bool,
    pub z: bool,
    pub beta: bool,
    pub v: bool,
    pub alpha: bool,
}

impl Trainable {
    /// Locations plus whatever weight parameters the mode has.
    pub fn for_mode(mode: WeightMode, learn_u: bool) -> Self {
        Trainable {
            u: learn_u,
            z: false,
            beta: matches!(mode, WeightMode::Softmax | WeightMode::SoftmaxAlpha),
            v: mode == WeightMode::FreeNonneg,
            alpha: mode == WeightMode::SoftmaxAlpha,
        }
    }

    pub fn get(&self, f: Field) -> bool {
        match f {
            Field::U => self.u,
            Field::Z => self.z,
            Field::Beta => self.beta,
            Field::V => self.v,
            Field::Alpha => self.alpha,
        }
    }

    pub fn none() -> Self {
        Trainable { u: false, z: false, beta: false, v: false, alpha: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    pub u: Tensor,
    pub labels: Labels,
    pub num_classes: usize,
    pub mode: WeightMode,
    pub beta: Vec<f64>,
    pub v_raw: Vec<f64>,
    pub alpha: f64,
    /// Size of the dataset being summarized.
    pub n: usize,
    pub seed: u64,
    pub trainable: Trainable,
    /// For coresets built from real points: their dataset indices.
    #[serde(default)]
    pub source_index: Option<Vec<usize>>,
    #[serde(default)]
    pub model_hash: Option<String>,
}

/// A coreset placed on a tape.
#[derive(Clone, Debug)]
pub struct CoresetVars {
    pub u: Var,
    /// `M×C` label probabilities.
    pub labels: Var,
    /// Soft-label logits, when the labels are soft.
    pub z: Option<Var>,
    /// `M×1` materialized weights.
    pub weights: Var,
    /// Trainable leaves in the order of [`Field::ALL`].
    pub leaves: Vec<(Field, Var)>,
}

impl Coreset {
    pub fn new(u: Tensor, labels: Labels, num_classes: usize, mode: WeightMode, n: usize) -> Result<Self> {
        let m = u.rows();
        match &labels {
            Labels::Hard(y) => {
                if y.len() != m {
                    return Err(Error::ShapeMismatch(format!("{} labels for {m} points", y.len())));
                }
                if y.iter().any(|&c| c >= num_classes) {
                    return Err(Error::invalid("coreset label out of range"));
                }
            }
            Labels::Soft(z) => {
                if z.shape() != (m, num_classes) {
                    return Err(Error::ShapeMismatch(format!(
                        "soft labels {:?} for {m} points and {num_classes} classes",
                        z.shape()
                    )));
                }
            }
        }
        let ratio = if m == 0 { 0.0 } else { n as f64 / m as f64 };
        Ok(Coreset {
            u,
            labels,
            num_classes,
            mode,
            beta: vec![0.0; m],
            v_raw: vec![ratio; m],
            alpha: 1.0,
            n,
            seed: 0,
            trainable: Trainable::for_mode(mode, true),
            source_index: None,
            model_hash: None,
        })
    }

    /// Real datapoints `idx` with free nonnegative weights `v` and frozen
    /// locations and labels.
    pub fn from_data(ds: &Dataset, idx: &[usize], v: Vec<f64>) -> Result<Self> {
        if v.len() != idx.len() {
            return Err(Error::ShapeMismatch(format!("{} weights for {} points", v.len(), idx.len())));
        }
        let sub = ds.subset(idx);
        let mut c = Coreset::new(sub.x, Labels::Hard(sub.y), ds.num_classes, WeightMode::FreeNonneg, ds.len())?;
        c.v_raw = v;
        c.trainable = Trainable { u: false, z: false, beta: false, v: true, alpha: false };
        c.source_index = Some(idx.to_vec());
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.u.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }

    /// Replace hard labels by logits placing probability `confidence` on the
    /// labelled class; the logits then become trainable.
    pub fn soften_labels(&mut self, confidence: f64) {
        if let Labels::Hard(y) = &self.labels {
            let c = self.num_classes;
            let gap = if c > 1 { (confidence * (c - 1) as f64 / (1.0 - confidence)).ln() } else { 0.0 };
            let mut z = Tensor::zeros(y.len(), c);
            for (i, &k) in y.iter().enumerate() {
                z.set(i, k, gap);
            }
            self.labels = Labels::Soft(z);
            self.trainable.z = true;
        }
    }

    /// Label probabilities `M×C`.
    pub fn label_probs(&self) -> Tensor {
        match &self.labels {
            Labels::Hard(y) => Tensor::one_hot(y, self.num_classes),
            Labels::Soft(z) => softmax_rows(z),
        }
    }

    /// Numeric materialized weights.
    pub fn weights(&self) -> Vec<f64> {
        let m = self.len();
        let n = self.n as f64;
        match self.mode {
            WeightMode::FixedRatio => vec![n / m as f64; m],
            WeightMode::FreeNonneg => self.v_raw.clone(),
            WeightMode::Softmax => softmax(&self.beta).into_iter().map(|p| n * p).collect(),
            WeightMode::SoftmaxAlpha => {
                softmax(&self.beta).into_iter().map(|p| self.alpha * n * p).collect()
            }
            WeightMode::Unit => vec![1.0; m],
        }
    }

    /// Indices with strictly positive weight.
    pub fn support(&self) -> Vec<usize> {
        self.weights().iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| i).collect()
    }

    pub fn field(&self, f: Field) -> Tensor {
        match f {
            Field::U => self.u.clone(),
            Field::Z => match &self.labels {
                Labels::Soft(z) => z.clone(),
                Labels::Hard(_) => Tensor::zeros(0, 0),
            },
            Field::Beta => Tensor::column(self.beta.clone()),
            Field::V => Tensor::column(self.v_raw.clone()),
            Field::Alpha => Tensor::scalar(self.alpha),
        }
    }

    pub fn set_field(&mut self, f: Field, value: Tensor) {
        match f {
            Field::U => self.u = value,
            Field::Z => self.labels = Labels::Soft(value),
            Field::Beta => self.beta = value.into_data(),
            Field::V => self.v_raw = value.into_data(),
            Field::Alpha => self.alpha = value.item(),
        }
    }

    /// Fields that get gradients: trainable and used by the current mode.
    pub fn active_fields(&self) -> Vec<Field> {
        Field::ALL
            .into_iter()
            .filter(|&f| self.trainable.get(f))
            .filter(|&f| match f {
                Field::Z => matches!(self.labels, Labels::Soft(_)),
                Field::Beta => matches!(self.mode, WeightMode::Softmax | WeightMode::SoftmaxAlpha),
                Field::V => self.mode == WeightMode::FreeNonneg,
                Field::Alpha => self.mode == WeightMode::SoftmaxAlpha,
                Field::U => true,
            })
            .collect()
    }

    /// Keep weights in the feasible set after a gradient step.
    pub fn project(&mut self) {
        for v in &mut self.v_raw {
            *v = v.max(0.0);
        }
        self.alpha = self.alpha.max(0.0);
    }

    /// Place the coreset on `tape`; active fields become named variables.
    pub fn on_tape(&self, tape: &mut Tape) -> CoresetVars {
        let active = self.active_fields();
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape, f: Field| {
            let value = self.field(f);
            if active.contains(&f) {
                let v = tape.variable(f.name(), value);
                leaves.push((f, v));
                v
            } else {
                tape.constant(value)
            }
        };
        let u = leaf(tape, Field::U);
        let (labels, z) = match &self.labels {
            Labels::Hard(y) => (tape.constant(Tensor::one_hot(y, self.num_classes)), None),
            Labels::Soft(_) => {
                let z = leaf(tape, Field::Z);
                (tape.softmax(z).expect("finite logits"), Some(z))
            }
        };
        let m = self.len();
        let n = self.n as f64;
        let weights = match self.mode {
            WeightMode::FixedRatio => tape.constant(Tensor::filled(m, 1, n / m as f64)),
            WeightMode::Unit => tape.constant(Tensor::ones(m, 1)),
            WeightMode::FreeNonneg => leaf(tape, Field::V),
            WeightMode::Softmax | WeightMode::SoftmaxAlpha => {
                let beta = leaf(tape, Field::Beta);
                let bt = tape.transpose(beta);
                let p = tape.softmax(bt).expect("finite weight logits");
                let pc = tape.transpose(p);
                let scaled = tape.scale(pc, n);
                if self.mode == WeightMode::SoftmaxAlpha {
                    let alpha = leaf(tape, Field::Alpha);
                    tape.mul(scaled, alpha)
                } else {
                    scaled
                }
            }
        };
        leaves.sort_by_key(|(f, _)| Field::ALL.iter().position(|g| g == f));
        CoresetVars { u, labels, z, weights, leaves }
    }

    /// Append a real datapoint with weight 0 (incremental constructions).
    pub fn push_point(&mut self, x: &[f64], y: usize, source: Option<usize>) {
        let mut data = self.u.data().to_vec();
        data.extend_from_slice(x);
        self.u = Tensor::new(self.len() + 1, x.len(), data);
        if let Labels::Hard(labels) = &mut self.labels {
            labels.push(y);
        }
        self.beta.push(0.0);
        self.v_raw.push(0.0);
        if let (Some(idx), Some(s)) = (&mut self.source_index, source) {
            idx.push(s);
        }
    }

    /// Widen label space to `classes` (new logits start at 0).
    pub fn widen_classes(&mut self, classes: usize) {
        if classes <= self.num_classes {
            return;
        }
        if let Labels::Soft(z) = &self.labels {
            let mut w = Tensor::zeros(z.rows(), classes);
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    w.set(i, j, z.get(i, j));
                }
            }
            self.labels = Labels::Soft(w);
        }
        self.num_classes = classes;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Coreset::from_json(&fs::read_to_string(path)?)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        data.extend(softmax(z.row_slice(r)));
    }
    Tensor::new(z.rows(), z.cols(), data)
}

/// `Σ_i v_i log p(z_i | u_i, θ_k)` for every row of `theta`: `K×1`.
pub fn weighted_coreset_loglik(tape: &mut Tape, model: &Model, cs: &CoresetVars, theta: Var) -> Result<Var> {
    if tape.shape(cs.u).0 == 0 {
        let k = tape.shape(theta).0;
        return Ok(tape.constant(Tensor::zeros(k, 1)));
    }
    let ll = model.loglik_matrix(tape, theta, cs.u, cs.labels)?;
    Ok(tape.matmul(ll, cs.weights))
}

/// Split `m` into per-class quotas no larger than each class' size.
fn stratified_quotas(m: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let c = sizes.len();
    if sizes.iter().sum::<usize>() < m {
        return Err(Error::invalid(format!("coreset size {m} exceeds dataset size")));
    }
    let mut quota: Vec<usize> = (0..c).map(|k| m / c + usize::from(k < m % c)).collect();
    // hand excess from small classes to the others
    loop {
        let excess: usize = quota.iter().zip(sizes).map(|(q, s)| q.saturating_sub(*s)).sum();
        if excess == 0 {
            return Ok(quota);
        }
        for (q, s) in quota.iter_mut().zip(sizes) {
            *q = (*q).min(*s);
        }
        let mut left = excess;
        for (q, s) in quota.iter_mut().zip(sizes) {
            let room = s - *q;
            let add = room.min(left);
            *q += add;
            left -= add;
        }
    }
}

/// Initial pseudo-data drawn from `ds`. Deterministic in `seed`.
pub fn init_coreset(
    strategy: InitStrategy,
    ds: &Dataset,
    m: usize,
    mode: WeightMode,
    seed: u64,
) -> Result<Coreset> {
    ds.ensure_nonempty()?;
    let classes = ds.class_indices();
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("class {c} has no points")));
    }
    let mut rng = rng::stream(seed, Stream::Init);
    let (u, y) = match strategy {
        InitStrategy::Subset => {
            let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
            let quota = stratified_quotas(m, &sizes)?;
            let mut idx = Vec::with_capacity(m);
            for (members, &q) in classes.iter().zip(&quota) {
                for j in rng::sample_without_replacement(&mut rng, members.len(), q) {
                    idx.push(members[j]);
                }
            }
            let sub = ds.subset(&idx);
            (sub.x, sub.y)
        }
        InitStrategy::Gaussian => {
            let d = ds.dim();
            let scaler = data::Scaler::fit(&ds.x);
            let means: Vec<Vec<f64>> = classes
                .iter()
                .map(|members| {
                    (0..d)
                        .map(|j| members.iter().map(|&i| ds.x.get(i, j)).sum::<f64>() / members.len() as f64)
                        .collect()
                })
                .collect();
            let mut u = Tensor::zeros(m, d);
            let mut y = Vec::with_capacity(m);
            for i in 0..m {
                let c = i % ds.num_classes;
                for j in 0..d {
                    u.set(i, j, data::normal(&mut rng, means[c][j], scaler.std[j]));
                }
                y.push(c);
            }
            (u, y)
        }
    };
    let mut cs = Coreset::new(u, Labels::Hard(y), ds.num_classes, mode, ds.len())?;
    cs.seed = seed;
    Ok(cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use approx::assert_abs_diff_eq;

    fn toy(m: usize, mode: WeightMode, n: usize) -> Coreset {
        Coreset::new(Tensor::zeros(m, 1), Labels::Hard(vec![0; m]), 2, mode, n).unwrap()
    }

    #[test]
    fn materialized_weights() {
        assert_eq!(toy(20, WeightMode::FixedRatio, 800).weights(), vec![40.0; 20]);
        assert_eq!(toy(4, WeightMode::Softmax, 100).weights(), vec![25.0; 4]);
        let mut c = toy(4, WeightMode::SoftmaxAlpha, 6);
        c.beta = vec![3f64.ln(), 0.0, 0.0, 0.0];
        for (w, e) in c.weights().iter().zip([3.0, 1.0, 1.0, 1.0]) {
            assert_abs_diff_eq!(*w, e, epsilon = 1e-12);
        }
        assert_eq!(toy(3, WeightMode::Unit, 100).weights(), vec![1.0; 3]);
    }

    #[test]
    fn tape_weights_match_numeric() {
        for mode in [WeightMode::FixedRatio, WeightMode::FreeNonneg, WeightMode::Softmax, WeightMode::SoftmaxAlpha, WeightMode::Unit] {
            let mut c = toy(3, mode, 30);
            c.beta = vec![0.3, -1.0, 2.0];
            c.v_raw = vec![1.0, 0.0, 4.0];
            c.alpha = 1.7;
            let mut t = Tape::new();
            let cv = c.on_tape(&mut t);
            let got = t.value(cv.weights).data().to_vec();
            for (a, b) in got.iter().zip(c.weights()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weighted_loglik_examples() {
        let model = Model::new(ModelSpec::logistic(1)).unwrap();
        let mut c = toy(1, WeightMode::FreeNonneg, 1);
        c.v_raw = vec![2.0];
        let mut t = Tape::new();
        let cv = c.on_tape(&mut t);
        let th = t.constant(Tensor::zeros(1, 2));
        let ll = weighted_coreset_loglik(&mut t, &model, &cv, th).unwrap();
        assert_abs_diff_eq!(t.item(ll), -2.0 * 2f64.ln(), epsilon = 1e-12);

        c.v_raw = vec![0.0];
        let mut t = Tape::new();
        let cv = c.on_tape(&mut t);
        let th = t.constant(Tensor::row(vec![1.0, 2.0]));
        let ll = weighted_coreset_loglik(&mut t, &model, &cv, th).unwrap();
        assert_eq!(t.item(ll), 0.0);
    }

    #[test]
    fn subset_init_is_stratified() {
        let ds = crate::data::gen_half_moon(40, 0.1, 1);
        let c = init_coreset(InitStrategy::Subset, &ds, 4, WeightMode::Softmax, 3).unwrap();
        let Labels::Hard(y) = &c.labels else { panic!() };
        assert_eq!(y.iter().filter(|&&k| k == 0).count(), 2);
        let all = init_coreset(InitStrategy::Subset, &ds, 40, WeightMode::Softmax, 3).unwrap();
        let mut rows: Vec<Vec<u64>> =
            (0..40).map(|i| all.u.row_slice(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        let mut want: Vec<Vec<u64>> =
            (0..40).map(|i| ds.x.row_slice(i).iter().map(|v| v.to_bits()).collect()).collect();
        want.sort();
        assert_eq!(rows, want);
        assert!(init_coreset(InitStrategy::Subset, &ds, 41, WeightMode::Softmax, 3).is_err());
    }

    #[test]
    fn gaussian_init_round_robin() {
        let ds = crate::data::gen_four_class(200, 2);
        let c = init_coreset(InitStrategy::Gaussian, &ds, 20, WeightMode::Softmax, 5).unwrap();
        let Labels::Hard(y) = &c.labels else { panic!() };
        for k in 0..4 {
            assert_eq!(y.iter().filter(|&&v| v == k).count(), 5);
        }
        assert!(c.u.is_finite());
        let again = init_coreset(InitStrategy::Gaussian, &ds, 20, WeightMode::Softmax, 5).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn empty_class_rejected() {
        let x = Tensor::zeros(3, 1);
        let ds = Dataset::new(x, vec![0, 0, 0], 2).unwrap();
        assert!(init_coreset(InitStrategy::Subset, &ds, 2, WeightMode::Softmax, 0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let ds = crate::data::gen_four_class(100, 4);
        let mut c = init_coreset(InitStrategy::Gaussian, &ds, 7, WeightMode::SoftmaxAlpha, 1).unwrap();
        c.beta = vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0, 1e300, 0.0, -0.0];
        c.soften_labels(0.9);
        let back = Coreset::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn soft_labels_probabilities() {
        let mut c = toy(2, WeightMode::Unit, 2);
        c.soften_labels(0.9);
        let p = c.label_probs();
        assert_abs_diff_eq!(p.get(0, 0), 0.9, epsilon = 1e-12);
        assert!(c.active_fields().contains(&Field::Z));
    }
}
