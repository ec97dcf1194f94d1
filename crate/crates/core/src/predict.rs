//! Importance-corrected posterior predictive and test metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::coresets::{Coreset, Labels, Trainable, WeightMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::objectives::{self, normalized_ess, WeightForm};
use crate::par::Exec;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::variational::VariationalGaussian;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean negative log predictive probability per test point, in nats.
    pub nll: f64,
    /// `nll · 1000`, NLL per thousand test points, for comparison with
    /// results reported on that scale.
    pub nll_per_1000_presumed: f64,
    pub ess: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub n_test: usize,
}

/// Samples from `ψ` and their normalized importance weights towards the
/// coreset posterior (uniform when there is no coreset).
pub fn weighted_samples(
    model: &Model,
    psi: &VariationalGaussian,
    coreset: Option<&Coreset>,
    noise: &Tensor,
    form: WeightForm,
) -> Result<(Tensor, Vec<f64>)> {
    let theta = psi.sample_values(noise)?;
    let k = noise.rows();
    let Some(cs) = coreset else {
        return Ok((theta, vec![1.0 / k as f64; k]));
    };
    let mut tape = Tape::new();
    let pv = psi.constants(&mut tape);
    let mut frozen = cs.clone();
    frozen.trainable = Trainable::none();
    let cv = frozen.on_tape(&mut tape);
    let batch = objectives::importance_weights(&mut tape, model, pv, &cv, noise, form)?;
    Ok((theta, batch.weights(&tape)))
}

/// `p̂(y | x) = Σ_k w̃_k p(y | x, θ_k)` for every row of `x`: `B×C`.
pub fn posterior_predictive(
    model: &Model,
    psi: &VariationalGaussian,
    coreset: Option<&Coreset>,
    x: &Tensor,
    noise: &Tensor,
    form: WeightForm,
    exec: Exec,
) -> Result<(Tensor, Vec<f64>)> {
    let (theta, w) = weighted_samples(model, psi, coreset, noise, form)?;
    let per_sample = exec.map(theta.rows(), |k| model.predict_probs(theta.row_slice(k), x));
    let mut out = Tensor::zeros(x.rows(), model.num_classes().max(1));
    for (probs, wk) in per_sample.into_iter().zip(&w) {
        let probs = probs?;
        for (o, p) in out.data_mut().iter_mut().zip(probs.data()) {
            *o += wk * p;
        }
    }
    Ok((out, w))
}

/// Self-normalized estimate of `E[f(θ)]` with its standard error.
pub fn is_expectation(
    model: &Model,
    psi: &VariationalGaussian,
    coreset: Option<&Coreset>,
    noise: &Tensor,
    form: WeightForm,
    f: impl Fn(&[f64]) -> f64,
) -> Result<(f64, f64)> {
    let (theta, w) = weighted_samples(model, psi, coreset, noise, form)?;
    let vals: Vec<f64> = (0..theta.rows()).map(|k| f(theta.row_slice(k))).collect();
    let mean: f64 = vals.iter().zip(&w).map(|(v, w)| v * w).sum();
    let var: f64 = vals.iter().zip(&w).map(|(v, w)| w * w * (v - mean).powi(2)).sum();
    Ok((mean, var.sqrt()))
}

/// Accuracy, NLL and ESS on `test` with one shared batch of `k` samples.
pub fn evaluate(
    model: &Model,
    psi: &VariationalGaussian,
    coreset: Option<&Coreset>,
    test: &Dataset,
    k: usize,
    seed: u64,
    form: WeightForm,
    exec: Exec,
) -> Result<EvalReport> {
    test.ensure_nonempty()?;
    if k == 0 {
        return Err(Error::invalid("need at least one posterior sample"));
    }
    let noise = rng::standard_normal(&mut rng::stream(seed, Stream::Eval), k, psi.dim());
    let (probs, w) = posterior_predictive(model, psi, coreset, &test.x, &noise, form, exec)?;
    let mut correct = 0;
    let mut nll = 0.0;
    for (i, &y) in test.y.iter().enumerate() {
        let row = probs.row_slice(i);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (j, &p)| if p > row[b] { j } else { b });
        correct += usize::from(best == y);
        nll -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    let n = test.len() as f64;
    let nll = nll / n;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        nll,
        nll_per_1000_presumed: nll * 1000.0,
        ess: normalized_ess(&w),
        mc_samples: k,
        seed,
        n_test: test.len(),
    })
}

/// Black-box coreset objective on a full dataset (no minibatching), using
/// `k` samples drawn with `seed`. Without a coreset this is the classical
/// ELBO with a Monte Carlo KL term.
pub fn full_data_elbo(
    model: &Model,
    psi: &VariationalGaussian,
    coreset: Option<&Coreset>,
    data: &Dataset,
    k: usize,
    seed: u64,
    form: WeightForm,
) -> Result<f64> {
    let noise = rng::standard_normal(&mut rng::stream(seed, Stream::Eval), k, psi.dim());
    let mut tape = Tape::new();
    let pv = psi.constants(&mut tape);
    let empty;
    let cs = match coreset {
        Some(c) => c,
        None => {
            let u = Tensor::zeros(0, data.dim());
            empty = Coreset::new(u, Labels::Hard(vec![]), data.num_classes, WeightMode::Unit, data.len())?;
            &empty
        }
    };
    let mut frozen = cs.clone();
    frozen.trainable = Trainable::none();
    let cv = frozen.on_tape(&mut tape);
    let batch = objectives::importance_weights(&mut tape, model, pv, &cv, &noise, form)?;
    let x = tape.constant(data.x.clone());
    let labels = tape.constant(data.label_matrix());
    let elbo = objectives::elbo_psvi_is_bb(&mut tape, model, &batch, x, labels, 1.0)?;
    Ok(tape.item(elbo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_sample_prediction() {
        let model = Model::new(ModelSpec::logistic(1)).unwrap();
        let psi = VariationalGaussian { means: vec![2.0, 0.0], log_stds: vec![-1.0, -1.0] };
        let noise = Tensor::row(vec![0.5, -0.3]);
        let x = Tensor::column(vec![1.0, -0.4]);
        let (p, w) = posterior_predictive(&model, &psi, None, &x, &noise, WeightForm::PerSample, Exec::Sequential).unwrap();
        assert_eq!(w, vec![1.0]);
        let theta = psi.sample_values(&noise).unwrap();
        let want = model.predict_probs(theta.data(), &x).unwrap();
        assert!(p.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn uniform_predictive_nll_is_ln2() {
        let model = Model::new(ModelSpec::logistic(1)).unwrap();
        // θ ≈ 0 makes every prediction [0.5, 0.5]
        let psi = VariationalGaussian::new(2, 1e-300);
        let test = Dataset::new(Tensor::zeros(10, 1), vec![0, 1, 1, 0, 1, 0, 0, 0, 1, 1], 2).unwrap();
        let r = evaluate(&model, &psi, None, &test, 5, 1, WeightForm::PerSample, Exec::Sequential).unwrap();
        assert_abs_diff_eq!(r.nll, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.ess, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn separable_confident_posterior() {
        let model = Model::new(ModelSpec::logistic(1)).unwrap();
        let psi = VariationalGaussian { means: vec![50.0, 0.0], log_stds: vec![-5.0, -5.0] };
        let x = Tensor::column(vec![-2.0, -1.0, 1.0, 3.0]);
        let test = Dataset::new(x, vec![0, 0, 1, 1], 2).unwrap();
        let r = evaluate(&model, &psi, None, &test, 10, 3, WeightForm::PerSample, Exec::Parallel).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = Model::new(ModelSpec::bnn(2, vec![6], 4)).unwrap();
        let psi = VariationalGaussian::new(model.param_len(), 0.7);
        let ds = crate::data::gen_four_class(40, 1);
        let cs = crate::coresets::init_coreset(crate::coresets::InitStrategy::Subset, &ds, 8, WeightMode::Softmax, 0)
            .unwrap();
        let noise = rng::standard_normal(&mut rng::stream(0, Stream::Eval), 7, psi.dim());
        let (p, w) = posterior_predictive(&model, &psi, Some(&cs), &ds.x, &noise, WeightForm::PerSample, Exec::Parallel).unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 0..p.rows() {
            assert_abs_diff_eq!(p.row_slice(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }
}
