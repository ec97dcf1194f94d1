//! Adam (numeric and on-tape) and the bilevel coreset update.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{unrolled_gradient, Tape, Var};
use crate::coresets::{weighted_coreset_loglik, Coreset, CoresetVars, Field};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::objectives::{self, WeightForm};
use crate::tensor::Tensor;
use crate::variational::{self, PsiVars, VariationalGaussian};

/// Added under the square root of the second-moment estimate so the update
/// stays twice differentiable when a gradient entry is exactly zero.
const SQRT_GUARD: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Grow the moment vectors with zeros (new parameters appended).
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.len() || grad.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state of length {} got {} params and {} grads",
                self.len(),
                params.len(),
                grad.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / ((v_hat + SQRT_GUARD).sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam whose updates are recorded on the tape, so a trajectory of steps can
/// be differentiated end to end.
#[derive(Clone, Debug)]
pub struct TapeAdam {
    pub config: AdamConfig,
    step: u32,
    m: Vec<Var>,
    v: Vec<Var>,
}

impl TapeAdam {
    pub fn new(config: AdamConfig) -> Self {
        TapeAdam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Start from existing moment estimates (held as constants).
    pub fn resume(tape: &mut Tape, state: &AdamState, shapes: &[(usize, usize)]) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut off = 0;
        for &(r, c) in shapes {
            let n = r * c;
            m.push(tape.constant(Tensor::new(r, c, state.m[off..off + n].to_vec())));
            v.push(tape.constant(Tensor::new(r, c, state.v[off..off + n].to_vec())));
            off += n;
        }
        TapeAdam { config: state.config, step: state.step as u32, m, v }
    }

    /// Numeric snapshot of the moments, flattened in parameter order.
    pub fn snapshot(&self, tape: &Tape) -> AdamState {
        let flat = |vs: &[Var]| vs.iter().flat_map(|&x| tape.value(x).data().to_vec()).collect();
        AdamState { config: self.config, step: u64::from(self.step), m: flat(&self.m), v: flat(&self.v) }
    }

    pub fn step(&mut self, tape: &mut Tape, params: &[Var], grads: &[Var]) -> Vec<Var> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let first = self.m.is_empty();
        let mut out = Vec::with_capacity(params.len());
        for (i, (&p, &g)) in params.iter().zip(grads).enumerate() {
            let g2 = tape.square(g);
            let (m, v) = if first {
                (tape.scale(g, 1.0 - beta1), tape.scale(g2, 1.0 - beta2))
            } else {
                let a = tape.scale(self.m[i], beta1);
                let b = tape.scale(g, 1.0 - beta1);
                let m = tape.add(a, b);
                let a = tape.scale(self.v[i], beta2);
                let b = tape.scale(g2, 1.0 - beta2);
                (m, tape.add(a, b))
            };
            let v_hat = tape.affine(v, 1.0 / c2, SQRT_GUARD);
            let denom = tape.sqrt(v_hat);
            let denom = tape.affine(denom, 1.0, eps);
            let ratio = tape.div(m, denom);
            let delta = tape.scale(ratio, lr / c1);
            out.push(tape.sub(p, delta));
            if first {
                self.m.push(m);
                self.v.push(v);
            } else {
                self.m[i] = m;
                self.v[i] = v;
            }
        }
        out
    }
}

/// Plain gradient descent step on the tape.
pub fn gd_step(tape: &mut Tape, params: &[Var], grads: &[Var], lr: f64) -> Vec<Var> {
    params
        .iter()
        .zip(grads)
        .map(|(&p, &g)| {
            let d = tape.scale(g, lr);
            tape.sub(p, d)
        })
        .collect()
}

/// Outer learning rate per coreset parameter group, plus ψ for joint mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub u: f64,
    pub z: f64,
    pub beta: f64,
    pub v: f64,
    pub alpha: f64,
    pub psi: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { u: 1e-2, z: 1e-2, beta: 1e-1, v: 1e-1, alpha: 1e-3, psi: 1e-3 }
    }
}

impl LearningRates {
    pub fn get(&self, f: Field) -> f64 {
        match f {
            Field::U => self.u,
            Field::Z => self.z,
            Field::Beta => self.beta,
            Field::V => self.v,
            Field::Alpha => self.alpha,
        }
    }

    pub fn zero() -> Self {
        LearningRates { u: 0.0, z: 0.0, beta: 0.0, v: 0.0, alpha: 0.0, psi: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilevelConfig {
    /// Differentiable inner Adam steps per outer update.
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: LearningRates,
    pub outer_iters: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    /// Start each inner solve from the previous ψ* rather than ψ₀.
    pub warm_start: bool,
    /// Fresh inner Adam moments every outer step.
    pub reset_inner_state: bool,
    pub weight_form: WeightForm,
    /// Optimize ψ on the outer loss alongside the coreset, without an inner
    /// problem. Kept for comparison; it lets ψ ignore the coreset.
    pub joint: bool,
    pub seed: u64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            inner_steps: 50,
            inner_lr: 1e-3,
            outer_lr: LearningRates::default(),
            outer_iters: 200,
            batch_size: 128,
            mc_samples: 10,
            warm_start: true,
            reset_inner_state: true,
            weight_form: WeightForm::PerSample,
            joint: false,
            seed: 0,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={n}",
                self.batch_size
            )));
        }
        if !self.joint && self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random inputs for one bilevel step.
pub struct StepNoise {
    /// One `K×P` matrix per inner step.
    pub inner: Vec<Tensor>,
    pub outer: Tensor,
}

/// Minibatch of true data for the outer loss.
pub struct Minibatch<'a> {
    pub x: &'a Tensor,
    /// `B×C` label probabilities.
    pub labels: &'a Tensor,
    /// `N/B`.
    pub scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub outer_loss: f64,
    pub inner_initial_loss: f64,
    pub inner_final_loss: f64,
    pub ess: f64,
    pub grad_norm: f64,
}

/// `−ELBO_IP` for ψ on the coreset, with the given noise.
pub fn inner_loss(tape: &mut Tape, model: &Model, psi: PsiVars, cs: &CoresetVars, noise: &Tensor) -> Result<Var> {
    let theta = variational::sample(tape, psi, noise)?;
    let core = weighted_coreset_loglik(tape, model, cs, theta)?;
    let log_prior = model.log_prior(tape, theta)?;
    let log_r = variational::log_density(tape, psi, theta)?;
    let ratio = tape.sub(log_prior, log_r);
    let terms = tape.add(core, ratio);
    let k = tape.shape(terms).0 as f64;
    let s = tape.sum_all(terms);
    Ok(tape.scale(s, -1.0 / k))
}

/// Outer-loop state that persists across bilevel steps.
#[derive(Clone, Debug)]
pub struct BilevelDriver {
    pub config: BilevelConfig,
    /// Starting point for cold-started inner solves.
    pub psi_init: VariationalGaussian,
    outer: HashMap<Field, AdamState>,
    psi_outer: Option<AdamState>,
    inner_state: Option<AdamState>,
    iteration: usize,
}

impl BilevelDriver {
    pub fn new(config: BilevelConfig, psi_init: VariationalGaussian) -> Self {
        BilevelDriver { config, psi_init, outer: HashMap::new(), psi_outer: None, inner_state: None, iteration: 0 }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Forget all optimizer state.
    pub fn reset(&mut self) {
        self.outer.clear();
        self.psi_outer = None;
        self.inner_state = None;
    }

    /// One outer update of the coreset `cs`; `psi` is replaced by the inner
    /// solution ψ*.
    pub fn step(
        &mut self,
        model: &Model,
        cs: &mut Coreset,
        psi: &mut VariationalGaussian,
        batch: &Minibatch<'_>,
        noise: &StepNoise,
    ) -> Result<StepDiagnostics> {
        let it = self.iteration;
        self.iteration += 1;
        let cfg = self.config.clone();
        let mut tape = Tape::new();
        let cv = cs.on_tape(&mut tape);
        let leaves: Vec<Var> = cv.leaves.iter().map(|&(_, v)| v).collect();
        let x = tape.constant(batch.x.clone());
        let labels = tape.constant(batch.labels.clone());

        let mut inner_losses = Vec::new();
        let mut final_psi = None;
        let mut outer_value = None;
        let mut ess = 1.0;

        let (grads, psi_grads) = if cfg.joint {
            let pv = psi.variables(&mut tape);
            let b = objectives::importance_weights(&mut tape, model, pv, &cv, &noise.outer, cfg.weight_form)?;
            let elbo = objectives::elbo_psvi_is_bb(&mut tape, model, &b, x, labels, batch.scale)?;
            let loss = tape.neg(elbo);
            ess = b.ess(&tape);
            outer_value = Some(tape.item(loss));
            let mut wrt = leaves.clone();
            wrt.extend([pv.means, pv.log_stds]);
            let mut g = tape.gradient(loss, &wrt)?;
            let pg = g.split_off(leaves.len());
            final_psi = Some(VariationalGaussian::from_tape(&tape, pv));
            (g, Some(pg))
        } else {
            let start = if cfg.warm_start { &*psi } else { &self.psi_init };
            let p0 = start.constants(&mut tape);
            let shapes = [tape.shape(p0.means), tape.shape(p0.log_stds)];
            let mut adam = match (&self.inner_state, cfg.reset_inner_state) {
                (Some(s), false) => TapeAdam::resume(&mut tape, s, &shapes),
                _ => TapeAdam::new(AdamConfig::with_lr(cfg.inner_lr)),
            };
            if noise.inner.len() < cfg.inner_steps {
                return Err(Error::invalid(format!(
                    "{} inner noise draws for {} inner steps",
                    noise.inner.len(),
                    cfg.inner_steps
                )));
            }
            let g = unrolled_gradient(
                &mut tape,
                &leaves,
                vec![p0.means, p0.log_stds],
                cfg.inner_steps,
                |tape, t, state| {
                    let pv = PsiVars { means: state[0], log_stds: state[1] };
                    let loss = inner_loss(tape, model, pv, &cv, &noise.inner[t])?;
                    inner_losses.push(tape.item(loss));
                    let g = tape.grad(loss, state)?;
                    Ok(adam.step(tape, state, &g))
                },
                |tape, state| {
                    let pv = PsiVars { means: state[0], log_stds: state[1] };
                    let b = objectives::importance_weights(tape, model, pv, &cv, &noise.outer, cfg.weight_form)?;
                    let elbo = objectives::elbo_psvi_is_bb(tape, model, &b, x, labels, batch.scale)?;
                    let loss = tape.neg(elbo);
                    ess = b.ess(tape);
                    outer_value = Some(tape.item(loss));
                    final_psi = Some(VariationalGaussian::from_tape(tape, pv));
                    Ok(loss)
                },
            )?;
            if !cfg.reset_inner_state {
                self.inner_state = Some(adam.snapshot(&tape));
            }
            (g, None)
        };

        let outer_loss = outer_value.expect("outer loss evaluated");
        if !outer_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, what: "outer loss".into() });
        }
        if let Some(bad) = inner_losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it, what: format!("inner loss at step {bad}") });
        }
        let mut grad_norm = 0.0;
        for ((field, _), g) in cv.leaves.iter().zip(&grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it, what: format!("gradient of {}", field.name()) });
            }
            grad_norm += g.data().iter().map(|v| v * v).sum::<f64>();
            let lr = cfg.outer_lr.get(*field);
            let mut value = cs.field(*field);
            let state = self
                .outer
                .entry(*field)
                .or_insert_with(|| AdamState::new(value.len(), AdamConfig::with_lr(lr)));
            state.resize(value.len());
            state.step(value.data_mut(), g.data())?;
            cs.set_field(*field, value);
        }
        cs.project();

        let mut new_psi = final_psi.expect("final ψ recorded");
        if let Some(pg) = psi_grads {
            let p = new_psi.dim();
            let state = self
                .psi_outer
                .get_or_insert_with(|| AdamState::new(2 * p, AdamConfig::with_lr(cfg.outer_lr.psi)));
            let mut flat: Vec<f64> = new_psi.means.iter().chain(&new_psi.log_stds).copied().collect();
            let g: Vec<f64> = pg[0].data().iter().chain(pg[1].data()).copied().collect();
            state.step(&mut flat, &g)?;
            new_psi.log_stds = flat.split_off(p);
            new_psi.means = flat;
        }
        if !new_psi.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, what: "variational parameters".into() });
        }
        *psi = new_psi;
        Ok(StepDiagnostics {
            outer_loss,
            inner_initial_loss: inner_losses.first().copied().unwrap_or(f64::NAN),
            inner_final_loss: inner_losses.last().copied().unwrap_or(f64::NAN),
            ess,
            grad_norm: grad_norm.sqrt(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut s = AdamState::new(2, AdamConfig::with_lr(0.1));
        s.m = vec![1.0, -1.0];
        s.v = vec![1.0, 1.0];
        s.step = 3;
        let mut p = vec![0.5, 0.5];
        let before = s.m.clone();
        s.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!(s.m.iter().zip(&before).all(|(a, b)| a.abs() < b.abs()));
        let mut fresh = AdamState::new(2, AdamConfig::with_lr(0.1));
        let mut q = vec![0.5, -2.0];
        fresh.step(&mut q, &[0.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.5, -2.0]);
    }

    #[test]
    fn adam_first_step_bounded() {
        for g in [1e-6, 0.3, -5.0, 1e6] {
            let mut s = AdamState::new(1, AdamConfig::with_lr(0.01));
            let mut p = vec![0.0];
            s.step(&mut p, &[g]).unwrap();
            assert!(p[0].abs() <= 0.01 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn adam_constant_gradient_two_steps() {
        let mut s = AdamState::new(1, AdamConfig::with_lr(0.1));
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0]).unwrap();
        s.step(&mut p, &[1.0]).unwrap();
        assert_abs_diff_eq!(p[0], -0.2, epsilon = 1e-6);
        assert!(s.step(&mut p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tape_adam_matches_numeric() {
        let mut s = AdamState::new(2, AdamConfig::with_lr(0.05));
        let mut p = vec![0.3, -1.2];
        let mut tape = Tape::new();
        let mut tp = TapeAdam::new(AdamConfig::with_lr(0.05));
        let mut x = tape.variable("x", Tensor::row(p.clone()));
        for _ in 0..5 {
            let sq = tape.square(x);
            let cube = tape.mul(sq, x);
            let loss = tape.sum_all(cube);
            let g = tape.grad(loss, &[x]).unwrap();
            let gv = tape.value(g[0]).data().to_vec();
            s.step(&mut p, &gv).unwrap();
            x = tp.step(&mut tape, &[x], &g)[0];
        }
        for (a, b) in tape.value(x).data().iter().zip(&p) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn quadratic_hypergradient_matches_closed_form() {
        // ℓ(ψ, φ) = a/2 (ψ − bφ)², L(ψ, φ) = (ψ − 1)² + φ²
        let (a, b, phi0, lr, steps) = (2.0, 1.5, 0.4, 0.1, 50);
        let mut tape = Tape::new();
        let phi = tape.variable("phi", Tensor::scalar(phi0));
        let psi0 = tape.scalar(0.0);
        let g = unrolled_gradient(
            &mut tape,
            &[phi],
            vec![psi0],
            steps,
            |tape, _, s| {
                let bphi = tape.scale(phi, b);
                let d = tape.sub(s[0], bphi);
                let sq = tape.square(d);
                let l = tape.scale(sq, a / 2.0);
                let g = tape.grad(l, s)?;
                Ok(gd_step(tape, s, &g, lr))
            },
            |tape, s| {
                let d = tape.affine(s[0], 1.0, -1.0);
                let d2 = tape.square(d);
                let p2 = tape.square(phi);
                Ok(tape.add(d2, p2))
            },
        )
        .unwrap();
        let exact = 2.0 * (b * phi0 - 1.0) * b + 2.0 * phi0;
        assert!((g[0].item() - exact).abs() <= 1e-3 * exact.abs());
    }
}
