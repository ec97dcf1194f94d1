//! Variational objectives and the self-normalized importance correction.
//!
//! All functions work on a shared batch of `K` reparameterized samples so
//! that every term is differentiable in ψ and in the coreset parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Join, Tape, Var};
use crate::coresets::{weighted_coreset_loglik, CoresetVars, Field};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;
use crate::variational::{self, PsiVars};

/// How the importance log-weights account for the prior/proposal ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightForm {
    /// `log p(θ_k) − log r(θ_k)` per sample.
    #[default]
    PerSample,
    /// The expected version, `−KL(r ‖ p)`, shared by all samples.
    ExpectedKl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlForm {
    #[default]
    Analytic,
    MonteCarlo,
}

/// `K` samples with their density terms and importance weights.
#[derive(Clone, Debug)]
pub struct WeightedSampleBatch {
    /// `K×P` samples.
    pub theta: Var,
    /// `K×1` weighted coreset log-likelihood.
    pub core: Var,
    /// `K×1` prior log-density.
    pub log_prior: Var,
    /// `K×1` variational log-density.
    pub log_r: Var,
    /// `K×1` raw log-weights.
    pub log_w: Var,
    /// `K×1` normalized weights.
    pub w: Var,
    pub noise: Tensor,
}

impl WeightedSampleBatch {
    pub fn k(&self, tape: &Tape) -> usize {
        tape.shape(self.theta).0
    }

    pub fn weights(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.w).data().to_vec()
    }

    pub fn ess(&self, tape: &Tape) -> f64 {
        normalized_ess(tape.value(self.w).data())
    }
}

/// Draw `θ` from ψ with the given noise and attach importance weights for
/// the coreset posterior.
pub fn importance_weights(
    tape: &mut Tape,
    model: &Model,
    psi: PsiVars,
    cs: &CoresetVars,
    noise: &Tensor,
    form: WeightForm,
) -> Result<WeightedSampleBatch> {
    let theta = variational::sample(tape, psi, noise)?;
    let core = weighted_coreset_loglik(tape, model, cs, theta)?;
    let log_prior = model.log_prior(tape, theta)?;
    let log_r = variational::log_density(tape, psi, theta)?;
    let log_w = match form {
        WeightForm::PerSample => {
            let ratio = tape.sub(log_prior, log_r);
            tape.add(core, ratio)
        }
        WeightForm::ExpectedKl => {
            let kl = variational::kl_to_prior(tape, psi, model.prior_std());
            tape.sub(core, kl)
        }
    };
    let w = normalize_log_weights(tape, log_w)?;
    Ok(WeightedSampleBatch { theta, core, log_prior, log_r, log_w, w, noise: noise.clone() })
}

/// Stabilized softmax of a `K×1` column of log-weights. Non-finite entries
/// get weight zero; if none is finite the weights are degenerate.
pub fn normalize_log_weights(tape: &mut Tape, log_w: Var) -> Result<Var> {
    let vals = tape.value(log_w).data();
    if vals.iter().any(|v| v.is_nan() || *v == f64::INFINITY) || vals.iter().all(|v| !v.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    let row = tape.transpose(log_w);
    let p = tape.softmax(row).map_err(|_| Error::DegenerateWeights)?;
    Ok(tape.transpose(p))
}

/// `1 / (K Σ w̃²)`, in `(0, 1]`.
pub fn normalized_ess(w: &[f64]) -> f64 {
    let s2: f64 = w.iter().map(|x| x * x).sum();
    1.0 / (w.len() as f64 * s2)
}

/// `Σ_b log p(y_b | x_b, θ_k)` for each sample: `K×1`.
pub fn data_loglik(tape: &mut Tape, model: &Model, theta: Var, x: Var, labels: Var) -> Result<Var> {
    let ll = model.loglik_matrix(tape, theta, x, labels)?;
    Ok(tape.sum(ll, Axis::Cols))
}

/// `mean_k[scale · Σ_b log p(y_b|x_b,θ_k)] − KL(r ‖ p)`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_classical(
    tape: &mut Tape,
    model: &Model,
    psi: PsiVars,
    theta: Var,
    x: Var,
    labels: Var,
    scale: f64,
    kl: KlForm,
) -> Result<Var> {
    let k = tape.shape(theta).0 as f64;
    let lik = if tape.shape(x).0 == 0 {
        tape.scalar(0.0)
    } else {
        let data = data_loglik(tape, model, theta, x, labels)?;
        let total = tape.sum_all(data);
        tape.scale(total, scale / k)
    };
    let kl = match kl {
        KlForm::Analytic => variational::kl_to_prior(tape, psi, model.prior_std()),
        KlForm::MonteCarlo => {
            let log_prior = model.log_prior(tape, theta)?;
            let log_r = variational::log_density(tape, psi, theta)?;
            let diff = tape.sub(log_r, log_prior);
            mean(tape, diff)
        }
    };
    Ok(tape.sub(lik, kl))
}

fn mean(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len() as f64;
    let s = tape.sum_all(x);
    tape.scale(s, 1.0 / n)
}

/// `mean_k[core_k + log p(θ_k) − log r(θ_k)]`: lower bound on the coreset
/// marginal likelihood.
pub fn elbo_ip(tape: &mut Tape, batch: &WeightedSampleBatch) -> Var {
    let ratio = tape.sub(batch.log_prior, batch.log_r);
    let terms = tape.add(batch.core, ratio);
    mean(tape, terms)
}

/// The black-box pseudocoreset objective with explicit sample weights `w`
/// (`K×1`); `data` is `Σ_b log p(y_b|x_b,θ_k)` over the minibatch.
pub fn elbo_psvi_is_bb_weighted(
    tape: &mut Tape,
    batch: &WeightedSampleBatch,
    w: Var,
    data: Var,
    scale: f64,
) -> Var {
    let scaled = tape.scale(data, scale);
    let resid = tape.sub(scaled, batch.core);
    let corrected = tape.dot(w, resid);
    let ip = elbo_ip(tape, batch);
    tape.add(corrected, ip)
}

/// The black-box pseudocoreset objective with the batch's own weights.
pub fn elbo_psvi_is_bb(
    tape: &mut Tape,
    model: &Model,
    batch: &WeightedSampleBatch,
    x: Var,
    labels: Var,
    scale: f64,
) -> Result<Var> {
    let data = if tape.shape(x).0 == 0 {
        let k = batch.k(tape);
        tape.constant(Tensor::zeros(k, 1))
    } else {
        data_loglik(tape, model, batch.theta, x, labels)?
    };
    Ok(elbo_psvi_is_bb_weighted(tape, batch, batch.w, data, scale))
}

/// Same objective for a coreset of real datapoints: only the weights (and ψ)
/// may carry gradients.
pub fn elbo_sparse_bbvi(
    tape: &mut Tape,
    model: &Model,
    cs: &CoresetVars,
    batch: &WeightedSampleBatch,
    x: Var,
    labels: Var,
    scale: f64,
) -> Result<Var> {
    if cs.leaves.iter().any(|(f, _)| matches!(f, Field::U | Field::Z)) {
        return Err(Error::invalid("sparse objective requires frozen locations and labels"));
    }
    elbo_psvi_is_bb(tape, model, batch, x, labels, scale)
}

/// Importance-weighted `KL(p(·|z_m) ‖ p(·|u_m, θ))` for coreset point `m`.
pub fn soft_label_term(
    tape: &mut Tape,
    model: &Model,
    cs: &CoresetVars,
    m: usize,
    batch: &WeightedSampleBatch,
) -> Result<Var> {
    let z = cs.z.ok_or_else(|| Error::invalid("coreset labels are not soft"))?;
    let c = tape.shape(z).1;
    let zm = tape.row(z, m);
    let log_q = tape.log_softmax(zm)?;
    let q = tape.exp(log_q);
    let neg_entropy = tape.dot(q, log_q);
    let um = tape.row(cs.u, m);
    let k = batch.k(tape);
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let th = tape.row(batch.theta, i);
        rows.push(model.log_probs(tape, th, um)?);
    }
    let lp = tape.concat(&rows, Join::Rows);
    debug_assert_eq!(tape.shape(lp).1, c);
    let qt = tape.transpose(q);
    let cross = tape.matmul(lp, qt);
    let expected = tape.dot(batch.w, cross);
    Ok(tape.sub(neg_entropy, expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coresets::{Coreset, Labels, WeightMode};
    use crate::models::ModelSpec;
    use crate::variational::VariationalGaussian;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalized_weights_examples() {
        let mut t = Tape::new();
        let lw = t.constant(Tensor::column(vec![0.0, 3f64.ln()]));
        let w = normalize_log_weights(&mut t, lw).unwrap();
        assert_abs_diff_eq!(t.value(w).get(0, 0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(w).get(1, 0), 0.75, epsilon = 1e-12);
        let lw = t.constant(Tensor::column(vec![-1234.5]));
        let w = normalize_log_weights(&mut t, lw).unwrap();
        assert_eq!(t.value(w).item(), 1.0);
        let lw = t.constant(Tensor::column(vec![f64::NEG_INFINITY; 3]));
        assert!(matches!(normalize_log_weights(&mut t, lw), Err(Error::DegenerateWeights)));
    }

    #[test]
    fn ess_examples() {
        assert_abs_diff_eq!(normalized_ess(&[0.2; 5]), 1.0, epsilon = 1e-12);
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        assert_abs_diff_eq!(normalized_ess(&one_hot), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(normalized_ess(&[0.25, 0.75]), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn empty_coreset_at_prior_gives_uniform_weights() {
        let model = Model::new(ModelSpec::logistic(2)).unwrap();
        let mut cs = Coreset::new(Tensor::zeros(2, 2), Labels::Hard(vec![0, 1]), 2, WeightMode::FreeNonneg, 10).unwrap();
        cs.v_raw = vec![0.0, 0.0];
        let psi = VariationalGaussian::from_prior(model.prior_std());
        let mut t = Tape::new();
        let pv = psi.variables(&mut t);
        let cv = cs.on_tape(&mut t);
        let noise = Tensor::new(3, 3, (0..9).map(|i| (i as f64 * 0.7).sin()).collect());
        let b = importance_weights(&mut t, &model, pv, &cv, &noise, WeightForm::PerSample).unwrap();
        for w in b.weights(&t) {
            assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-12);
        }
        let ip = elbo_ip(&mut t, &b);
        assert_abs_diff_eq!(t.item(ip), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn classical_elbo_without_data() {
        let model = Model::new(ModelSpec::logistic(1)).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(0, 1));
        let y = t.constant(Tensor::zeros(0, 2));
        let noise = Tensor::zeros(2, 2);
        let prior = VariationalGaussian::from_prior(model.prior_std()).variables(&mut t);
        let th = variational::sample(&mut t, prior, &noise).unwrap();
        let e = elbo_classical(&mut t, &model, prior, th, x, y, 1.0, KlForm::Analytic).unwrap();
        assert_eq!(t.item(e), 0.0);
        let q = VariationalGaussian { means: vec![1.0, 0.0], log_stds: vec![0.0, 0.5] };
        let qv = q.variables(&mut t);
        let th = variational::sample(&mut t, qv, &noise).unwrap();
        let e = elbo_classical(&mut t, &model, qv, th, x, y, 1.0, KlForm::Analytic).unwrap();
        assert_abs_diff_eq!(t.item(e), -q.kl_to_prior(&[1.0, 1.0]), epsilon = 1e-12);
        assert!(t.item(e) < 0.0);
    }

    #[test]
    fn soft_label_term_examples() {
        let model = Model::new(ModelSpec::logistic(1)).unwrap();
        // zero weights on x: predictive is [0.5, 0.5] whatever θ
        let mut cs = Coreset::new(Tensor::zeros(1, 1), Labels::Hard(vec![1]), 2, WeightMode::Unit, 1).unwrap();
        cs.labels = Labels::Soft(Tensor::zeros(1, 2));
        cs.trainable.z = true;
        let psi = VariationalGaussian { means: vec![0.4, 0.0], log_stds: vec![-1.0, -30.0] };
        let mut t = Tape::new();
        let pv = psi.variables(&mut t);
        let cv = cs.on_tape(&mut t);
        let noise = Tensor::new(2, 2, vec![0.3, 0.0, -1.0, 0.0]);
        let b = importance_weights(&mut t, &model, pv, &cv, &noise, WeightForm::PerSample).unwrap();
        let term = soft_label_term(&mut t, &model, &cv, 0, &b).unwrap();
        assert_abs_diff_eq!(t.item(term), 0.0, epsilon = 1e-12);

        // near one-hot soft label: hard expected NLL
        cs.labels = Labels::Soft(Tensor::row(vec![-60.0, 60.0]));
        cs.u = Tensor::row(vec![1.5]);
        let mut t = Tape::new();
        let pv = psi.variables(&mut t);
        let cv = cs.on_tape(&mut t);
        let b = importance_weights(&mut t, &model, pv, &cv, &noise, WeightForm::PerSample).unwrap();
        let term = soft_label_term(&mut t, &model, &cv, 0, &b).unwrap();
        let w = b.weights(&t);
        let th = t.value(b.theta).clone();
        let want: f64 = (0..2)
            .map(|k| -w[k] * crate::autodiff::log_sigmoid(th.get(k, 0) * 1.5 + th.get(k, 1)))
            .sum();
        assert_abs_diff_eq!(t.item(term), want, epsilon = 1e-9);
    }
}
