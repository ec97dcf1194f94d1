//! Mean-field Gaussian approximations `r(θ; ψ)`, `ψ = (means, log_stds)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalGaussian {
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
}

/// ψ placed on a tape, each part as a `1×P` node.
#[derive(Clone, Copy, Debug)]
pub struct PsiVars {
    pub means: Var,
    pub log_stds: Var,
}

impl VariationalGaussian {
    /// Means at zero, all stds equal to `init_std`.
    pub fn new(dim: usize, init_std: f64) -> Self {
        VariationalGaussian { means: vec![0.0; dim], log_stds: vec![init_std.ln(); dim] }
    }

    pub fn from_prior(prior_std: &[f64]) -> Self {
        VariationalGaussian {
            means: vec![0.0; prior_std.len()],
            log_stds: prior_std.iter().map(|s| s.ln()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.log_stds.iter().map(|s| s.exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().chain(&self.log_stds).all(|v| v.is_finite())
    }

    /// Register as the trainable leaves `psi.means` and `psi.log_stds`.
    pub fn variables(&self, tape: &mut Tape) -> PsiVars {
        PsiVars {
            means: tape.variable("psi.means", Tensor::row(self.means.clone())),
            log_stds: tape.variable("psi.log_stds", Tensor::row(self.log_stds.clone())),
        }
    }

    pub fn constants(&self, tape: &mut Tape) -> PsiVars {
        PsiVars {
            means: tape.constant(Tensor::row(self.means.clone())),
            log_stds: tape.constant(Tensor::row(self.log_stds.clone())),
        }
    }

    pub fn from_tape(tape: &Tape, psi: PsiVars) -> Self {
        VariationalGaussian {
            means: tape.value(psi.means).data().to_vec(),
            log_stds: tape.value(psi.log_stds).data().to_vec(),
        }
    }

    /// Closed-form `KL(r ‖ N(0, diag(prior_std²)))`.
    pub fn kl_to_prior(&self, prior_std: &[f64]) -> f64 {
        self.means
            .iter()
            .zip(&self.log_stds)
            .zip(prior_std)
            .map(|((m, s), p)| {
                let var = (2.0 * s).exp();
                p.ln() - s + (var + m * m) / (2.0 * p * p) - 0.5
            })
            .sum()
    }

    /// `θ = μ + σ ⊙ ε` for the rows of a numeric noise matrix.
    pub fn sample_values(&self, noise: &Tensor) -> Result<Tensor> {
        check_noise(noise, self.dim())?;
        let stds = self.stds();
        let mut out = noise.clone();
        let p = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % p;
            *v = self.means[j] + stds[j] * *v;
        }
        Ok(out)
    }
}

fn check_noise(noise: &Tensor, dim: usize) -> Result<()> {
    if noise.cols() != dim || noise.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "noise is {}x{}, expected K×{dim} with K ≥ 1",
            noise.rows(),
            noise.cols()
        )));
    }
    Ok(())
}

/// Reparameterized draws `θ_k = μ + exp(s) ⊙ ε_k`: `K×P`.
pub fn sample(tape: &mut Tape, psi: PsiVars, noise: &Tensor) -> Result<Var> {
    check_noise(noise, tape.shape(psi.means).1)?;
    let eps = tape.constant(noise.clone());
    let std = tape.exp(psi.log_stds);
    let scaled = tape.mul(eps, std);
    Ok(tape.add(scaled, psi.means))
}

/// `log r(θ_k; ψ)` for each row of `theta`: `K×1`.
pub fn log_density(tape: &mut Tape, psi: PsiVars, theta: Var) -> Result<Var> {
    let p = tape.shape(psi.means).1;
    if tape.shape(theta).1 != p {
        return Err(Error::ShapeMismatch(format!(
            "θ has {} columns, ψ has dimension {p}",
            tape.shape(theta).1
        )));
    }
    let diff = tape.sub(theta, psi.means);
    let neg_s = tape.neg(psi.log_stds);
    let inv_std = tape.exp(neg_s);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let quad = tape.sum(z2, Axis::Cols);
    let log_det = tape.sum_all(psi.log_stds);
    let half_quad = tape.affine(quad, -0.5, -0.5 * LN_2PI * p as f64);
    Ok(tape.sub(half_quad, log_det))
}

/// Closed-form KL to the prior as a `1×1` node.
pub fn kl_to_prior(tape: &mut Tape, psi: PsiVars, prior_std: &[f64]) -> Var {
    let inv_2p2 = tape.constant(Tensor::row(prior_std.iter().map(|p| 0.5 / (p * p)).collect()));
    let const_part: f64 = prior_std.iter().map(|p| p.ln() - 0.5).sum();
    let two_s = tape.scale(psi.log_stds, 2.0);
    let var = tape.exp(two_s);
    let m2 = tape.square(psi.means);
    let second = tape.add(var, m2);
    let scaled = tape.mul(second, inv_2p2);
    let terms = tape.sub(scaled, psi.log_stds);
    let total = tape.sum_all(terms);
    tape.affine(total, 1.0, const_part)
}
