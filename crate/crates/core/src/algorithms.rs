//! Coreset construction algorithms and the baselines they are compared to.
//!
//! * [`train_bb_psvi`]: learned pseudo-data via unrolled bilevel updates.
//! * [`train_bb_sparse_incremental`], [`train_bb_sparse_batch`], [`prune`]:
//!   weighted subsets of real points trained with the same objective.
//! * [`train_sparse_vi_baseline`]: greedy selection with the analytic
//!   KL-gradient estimate under a Laplace sampler.
//! * [`train_random_coreset_baseline`], [`train_full_mfvi`],
//!   [`train_subset_laplace`]: reference fits.

use std::collections::HashSet;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::coresets::{init_coreset, weighted_coreset_loglik, Coreset, InitStrategy, Labels, Trainable, WeightMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::objectives::WeightForm;
use crate::optim::{AdamConfig, AdamState, BilevelConfig, BilevelDriver, Minibatch, StepDiagnostics, StepNoise};
use crate::par::Exec;
use crate::predict;
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;
use crate::variational::{self, VariationalGaussian};

/// Settings for the Laplace fits used by the Sparse VI baseline and the
/// subset-Laplace reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Smallest admissible curvature; smaller diagonal entries are clipped.
    pub floor: f64,
    /// Warm-started MAP steps between weight updates.
    pub refit_steps: usize,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig { steps: 500, lr: 1e-2, batch_size: 256, floor: 1e-8, refit_steps: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub coreset_size: usize,
    pub weight_mode: WeightMode,
    pub init: InitStrategy,
    pub learn_locations: bool,
    pub soft_labels: bool,
    /// Initial std of the variational approximation.
    pub init_std: f64,
    pub bilevel: BilevelConfig,
    /// Greedy selection rounds for incremental constructions.
    pub rounds: usize,
    /// Decreasing coreset sizes for pruning.
    pub prune_sizes: Vec<usize>,
    /// Outer updates per pruning round; defaults to an equal split of
    /// `bilevel.outer_iters`.
    pub prune_steps: Option<usize>,
    /// Adam steps and learning rate for plain VI fits.
    pub vi_steps: usize,
    pub vi_lr: f64,
    pub laplace: LaplaceConfig,
    /// Evaluate on the test set every this many outer iterations (0: only
    /// at the end).
    pub eval_every: usize,
    pub eval_samples: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            coreset_size: 20,
            weight_mode: WeightMode::Softmax,
            init: InitStrategy::Subset,
            learn_locations: true,
            soft_labels: false,
            init_std: 1e-3,
            bilevel: BilevelConfig::default(),
            rounds: 20,
            prune_sizes: Vec::new(),
            prune_steps: None,
            vi_steps: 2000,
            vi_lr: 1e-2,
            laplace: LaplaceConfig::default(),
            eval_every: 0,
            eval_samples: 10,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub round: usize,
    pub outer_loss: f64,
    pub inner_final_loss: f64,
    pub ess: f64,
    pub coreset_size: usize,
    /// Wall-clock since the start of training; excluded from replay checks.
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ess: f64,
    pub coreset_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<IterRecord>,
    pub evaluations: Vec<EvalRecord>,
}

impl TrainTrace {
    /// Copy with wall-clock fields zeroed, for comparing replays.
    pub fn without_timing(&self) -> TrainTrace {
        let mut t = self.clone();
        t.iterations.iter_mut().for_each(|r| r.elapsed_ms = 0.0);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub coreset: Option<Coreset>,
    pub psi: VariationalGaussian,
    pub trace: TrainTrace,
    /// Whether predictions should be importance-corrected towards the coreset.
    pub corrected: bool,
}

/// Shared plumbing of one training run.
struct Run<'a> {
    model: &'a Model,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    cfg: &'a TrainConfig,
    labels: Tensor,
    batch_rng: Rng,
    noise_rng: Rng,
    start: Instant,
    trace: TrainTrace,
    iteration: usize,
}

struct Batch {
    x: Tensor,
    labels: Tensor,
    idx: Vec<usize>,
    scale: f64,
}

impl<'a> Run<'a> {
    fn new(model: &'a Model, train: &'a Dataset, test: Option<&'a Dataset>, cfg: &'a TrainConfig) -> Result<Self> {
        train.ensure_nonempty()?;
        if train.dim() != model.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "data has {} features, model expects {}",
                train.dim(),
                model.input_dim()
            )));
        }
        let seed = cfg.bilevel.seed;
        Ok(Run {
            model,
            train,
            test,
            cfg,
            labels: train.label_matrix(),
            batch_rng: rng::stream(seed, Stream::Minibatch),
            noise_rng: rng::stream(seed, Stream::Noise),
            start: Instant::now(),
            trace: TrainTrace::default(),
            iteration: 0,
        })
    }

    fn minibatch(&mut self) -> Batch {
        let n = self.train.len();
        let b = self.cfg.bilevel.batch_size.clamp(1, n);
        let idx = rng::sample_without_replacement(&mut self.batch_rng, n, b);
        Batch {
            x: self.train.x.select_rows(&idx),
            labels: self.labels.select_rows(&idx),
            scale: n as f64 / b as f64,
            idx,
        }
    }

    fn noise(&mut self) -> Tensor {
        rng::standard_normal(&mut self.noise_rng, self.cfg.bilevel.mc_samples, self.model.param_len())
    }

    fn step_noise(&mut self) -> StepNoise {
        let inner = if self.cfg.bilevel.joint { 0 } else { self.cfg.bilevel.inner_steps };
        StepNoise { inner: (0..inner).map(|_| self.noise()).collect(), outer: self.noise() }
    }

    fn bilevel_step(
        &mut self,
        driver: &mut BilevelDriver,
        cs: &mut Coreset,
        psi: &mut VariationalGaussian,
        round: usize,
    ) -> Result<StepDiagnostics> {
        let batch = self.minibatch();
        let noise = self.step_noise();
        let mb = Minibatch { x: &batch.x, labels: &batch.labels, scale: batch.scale };
        let diag = driver.step(self.model, cs, psi, &mb, &noise)?;
        self.record(round, diag.outer_loss, diag.inner_final_loss, diag.ess, cs.support().len());
        Ok(diag)
    }

    fn record(&mut self, round: usize, outer_loss: f64, inner_final_loss: f64, ess: f64, size: usize) {
        self.trace.iterations.push(IterRecord {
            iteration: self.iteration,
            round,
            outer_loss,
            inner_final_loss,
            ess,
            coreset_size: size,
            elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
        });
        self.iteration += 1;
    }

    fn due(&self) -> bool {
        self.cfg.eval_every > 0 && self.iteration.is_multiple_of(self.cfg.eval_every)
    }

    fn evaluate(&mut self, psi: &VariationalGaussian, cs: Option<&Coreset>) -> Result<()> {
        let Some(test) = self.test else { return Ok(()) };
        if self.trace.evaluations.last().is_some_and(|e| e.iteration == self.iteration) {
            return Ok(());
        }
        let r = predict::evaluate(
            self.model,
            psi,
            cs,
            test,
            self.cfg.eval_samples,
            self.cfg.bilevel.seed,
            self.cfg.bilevel.weight_form,
            self.cfg.exec,
        )?;
        self.trace.evaluations.push(EvalRecord {
            iteration: self.iteration,
            accuracy: r.accuracy,
            nll: r.nll,
            ess: r.ess,
            coreset_size: cs.map_or(0, |c| c.support().len()),
        });
        Ok(())
    }
}

/// Variational starting point: model-specific means, `cfg.init_std` stds.
pub fn init_psi(model: &Model, cfg: &TrainConfig) -> VariationalGaussian {
    let mut psi = VariationalGaussian::new(model.param_len(), cfg.init_std);
    psi.means = model.init_means(cfg.bilevel.seed);
    psi
}

/// Learned pseudo-coreset: `bilevel.outer_iters` bilevel updates of
/// locations, (soft) labels and weights.
pub fn train_bb_psvi(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut cs = init_coreset(cfg.init, train, cfg.coreset_size, cfg.weight_mode, cfg.bilevel.seed)?;
    cs.trainable = Trainable::for_mode(cfg.weight_mode, cfg.learn_locations);
    if cfg.soft_labels {
        cs.soften_labels(0.9);
    }
    train_bb_psvi_from(model, train, test, cfg, cs)
}

/// [`train_bb_psvi`] starting from a given coreset; its `trainable` flags
/// decide which fields move.
pub fn train_bb_psvi_from(
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut cs: Coreset,
) -> Result<TrainOutput> {
    cfg.bilevel.validate(train.len())?;
    if cs.dim() != model.input_dim() || cs.num_classes != model.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "coreset of dim {} with {} classes for a model with dim {} and {} classes",
            cs.dim(),
            cs.num_classes,
            model.input_dim(),
            model.num_classes()
        )));
    }
    let mut run = Run::new(model, train, test, cfg)?;
    cs.model_hash = Some(model.spec().hash());
    let mut psi = init_psi(model, cfg);
    let mut driver = BilevelDriver::new(cfg.bilevel.clone(), psi.clone());
    for _ in 0..cfg.bilevel.outer_iters {
        run.bilevel_step(&mut driver, &mut cs, &mut psi, 0)?;
        if run.due() {
            run.evaluate(&psi, Some(&cs))?;
        }
    }
    run.evaluate(&psi, Some(&cs))?;
    Ok(TrainOutput { coreset: Some(cs), psi, trace: run.trace, corrected: true })
}

/// Log-likelihood matrix `K×n` of labelled points at fixed samples.
pub fn loglik_values(model: &Model, theta: &Tensor, x: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if x.rows() == 0 {
        return Ok(Tensor::zeros(theta.rows(), 0));
    }
    let mut tape = Tape::new();
    let th = tape.constant(theta.clone());
    let xv = tape.constant(x.clone());
    let lv = tape.constant(labels.clone());
    let ll = model.loglik_matrix(&mut tape, th, xv, lv)?;
    Ok(tape.value(ll).clone())
}

/// Subtract each column's mean over samples: the `w`-weighted mean, or the
/// plain mean when `w` is `None`.
pub fn centered_loglik(ll: &Tensor, w: Option<&[f64]>) -> Tensor {
    let (k, n) = ll.shape();
    let uniform = vec![1.0 / k as f64; k];
    let w = w.unwrap_or(&uniform);
    let mut out = ll.clone();
    for j in 0..n {
        let center: f64 = (0..k).map(|s| w[s] * ll.get(s, j)).sum();
        for s in 0..k {
            out.set(s, j, ll.get(s, j) - center);
        }
    }
    out
}

/// Statistics driving greedy selection and the Sparse VI weight gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyStats {
    /// `S×M` centered log-likelihoods of coreset points.
    pub g: Tensor,
    /// `S×B` centered log-likelihoods of minibatch points.
    pub g_prime: Tensor,
    /// `r_s = scale·Σ_b g′_sb − Σ_m v_m g_sm`.
    pub residual: Vec<f64>,
    pub corr: Vec<f64>,
    pub corr_prime: Vec<f64>,
}

fn correlations(g: &Tensor, residual: &[f64]) -> Vec<f64> {
    let (s, n) = g.shape();
    (0..n)
        .map(|j| {
            let var: f64 = (0..s).map(|k| g.get(k, j).powi(2)).sum::<f64>() / s as f64;
            let cov: f64 = (0..s).map(|k| g.get(k, j) * residual[k]).sum::<f64>() / s as f64;
            if var > 0.0 {
                cov / var.sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

impl GreedyStats {
    /// From already-centered log-likelihood matrices.
    pub fn new(g: Tensor, g_prime: Tensor, v: &[f64], scale: f64) -> Result<Self> {
        if g.cols() != v.len() || g.rows() != g_prime.rows() {
            return Err(Error::ShapeMismatch(format!(
                "g {:?}, g' {:?}, {} weights",
                g.shape(),
                g_prime.shape(),
                v.len()
            )));
        }
        let residual: Vec<f64> = (0..g.rows())
            .map(|s| {
                let data: f64 = g_prime.row_slice(s).iter().sum();
                let core: f64 = g.row_slice(s).iter().zip(v).map(|(a, b)| a * b).sum();
                scale * data - core
            })
            .collect();
        let corr = correlations(&g, &residual);
        let corr_prime = correlations(&g_prime, &residual);
        Ok(GreedyStats { g, g_prime, residual, corr, corr_prime })
    }

    /// Monte Carlo estimate of the gradient of `KL(π_v ‖ π)` in `v`.
    pub fn kl_gradient(&self) -> Vec<f64> {
        let (s, m) = self.g.shape();
        (0..m)
            .map(|j| -(0..s).map(|k| self.g.get(k, j) * self.residual[k]).sum::<f64>() / s as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Candidate {
    /// Index into the coreset.
    Coreset(usize),
    /// Index into the minibatch.
    Batch(usize),
}

/// Coreset points score `|corr|` when their weight is positive and `corr`
/// otherwise; eligible minibatch points score `corr′`. The highest score
/// wins, ties going to the earliest candidate (coreset before minibatch).
pub fn greedy_select(stats: &GreedyStats, v: &[f64], eligible: &[bool]) -> Result<Candidate> {
    let coreset = stats.corr.iter().zip(v).enumerate().map(|(i, (&c, &w))| {
        (Candidate::Coreset(i), if w > 0.0 { c.abs() } else { c })
    });
    let batch = stats
        .corr_prime
        .iter()
        .enumerate()
        .filter(|&(j, _)| eligible.get(j).copied().unwrap_or(false))
        .map(|(j, &c)| (Candidate::Batch(j), c));
    let mut best: Option<(Candidate, f64)> = None;
    for (cand, score) in coreset.chain(batch) {
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((cand, score));
        }
    }
    best.map(|(c, _)| c).ok_or_else(|| Error::invalid("no candidates for selection"))
}

/// Centered statistics for a coreset of real points and a minibatch.
fn selection_stats(
    model: &Model,
    theta: &Tensor,
    w: Option<&[f64]>,
    cs: &Coreset,
    batch: &Batch,
) -> Result<GreedyStats> {
    let g = centered_loglik(&loglik_values(model, theta, &cs.u, &cs.label_probs())?, w);
    let gp = centered_loglik(&loglik_values(model, theta, &batch.x, &batch.labels)?, w);
    GreedyStats::new(g, gp, &cs.weights(), batch.scale)
}

/// Attach the chosen point; returns whether the coreset grew.
fn apply_selection(cs: &mut Coreset, train: &Dataset, batch: &Batch, choice: Candidate) -> bool {
    match choice {
        Candidate::Coreset(_) => false,
        Candidate::Batch(j) => {
            let i = batch.idx[j];
            cs.push_point(train.x.row_slice(i), train.y[i], Some(i));
            true
        }
    }
}

fn eligible(cs: &Coreset, batch: &Batch) -> Vec<bool> {
    let taken: HashSet<usize> = cs.source_index.iter().flatten().copied().collect();
    batch.idx.iter().map(|i| !taken.contains(i)).collect()
}

/// Settings for plain mean-field VI fits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub mc_samples: usize,
    pub batch_size: usize,
}

/// Classical-ELBO fit of `psi` to the posterior given the weighted points
/// of `cs` (analytic KL). Points are subsampled to `batch_size` with
/// weights rescaled accordingly. Returns the final loss.
pub fn fit_vi(
    model: &Model,
    psi: &mut VariationalGaussian,
    cs: &Coreset,
    fit: &FitConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(f64),
) -> Result<f64> {
    let p = psi.dim();
    let mut adam = AdamState::new(2 * p, AdamConfig::with_lr(fit.lr));
    let mut last = f64::NAN;
    let mut frozen = cs.clone();
    frozen.trainable = Trainable::none();
    for step in 0..fit.steps {
        let sub = subsample(&frozen, fit.batch_size, rng)?;
        let noise = rng::standard_normal(rng, fit.mc_samples.max(1), p);
        let mut tape = Tape::new();
        let pv = psi.variables(&mut tape);
        let cv = sub.on_tape(&mut tape);
        let theta = variational::sample(&mut tape, pv, &noise)?;
        let core = weighted_coreset_loglik(&mut tape, model, &cv, theta)?;
        let mean_core = tape.mean_all(core);
        let kl = variational::kl_to_prior(&mut tape, pv, model.prior_std());
        let elbo = tape.sub(mean_core, kl);
        let loss = tape.neg(elbo);
        last = tape.item(loss);
        if !last.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step, what: "variational fit".into() });
        }
        let g = tape.gradient(loss, &[pv.means, pv.log_stds])?;
        let mut flat: Vec<f64> = psi.means.iter().chain(&psi.log_stds).copied().collect();
        let gf: Vec<f64> = g[0].data().iter().chain(g[1].data()).copied().collect();
        adam.step(&mut flat, &gf)?;
        psi.log_stds = flat.split_off(p);
        psi.means = flat;
        on_step(last);
    }
    Ok(last)
}

/// Uniform subsample of `b` coreset points with weights scaled by `M/b`.
fn subsample(cs: &Coreset, b: usize, rng: &mut Rng) -> Result<Coreset> {
    let m = cs.len();
    if b == 0 || m <= b {
        return Ok(cs.clone());
    }
    let idx = rng::sample_without_replacement(rng, m, b);
    let w = cs.weights();
    let scale = m as f64 / b as f64;
    let mut sub = cs.clone();
    sub.u = cs.u.select_rows(&idx);
    sub.labels = match &cs.labels {
        Labels::Hard(y) => Labels::Hard(idx.iter().map(|&i| y[i]).collect()),
        Labels::Soft(z) => Labels::Soft(z.select_rows(&idx)),
    };
    sub.mode = WeightMode::FreeNonneg;
    sub.beta = vec![0.0; b];
    sub.source_index = cs.source_index.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect());
    sub.v_raw = idx.iter().map(|&i| w[i] * scale).collect();
    sub.trainable = Trainable::none();
    Ok(sub)
}

/// Laplace approximation: MAP point and diagonal curvature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceFit {
    pub psi: VariationalGaussian,
    /// Diagonal entries that were below the floor and got clipped.
    pub clipped: usize,
}

fn laplace(
    model: &Model,
    cs: &Coreset,
    cfg: &LaplaceConfig,
    steps: usize,
    init: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<LaplaceFit> {
    let p = model.param_len();
    let mut theta = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut adam = AdamState::new(p, AdamConfig::with_lr(cfg.lr));
    let mut frozen = cs.clone();
    frozen.trainable = Trainable::none();
    let neg_log_joint = |tape: &mut Tape, sub: &Coreset, th: Var| -> Result<Var> {
        let cv = sub.on_tape(tape);
        let core = weighted_coreset_loglik(tape, model, &cv, th)?;
        let lp = model.log_prior(tape, th)?;
        let joint = tape.add(core, lp);
        Ok(tape.neg(joint))
    };
    for step in 0..steps {
        let sub = subsample(&frozen, cfg.batch_size, rng)?;
        let mut tape = Tape::new();
        let th = tape.variable("theta", Tensor::row(theta.clone()));
        let loss = neg_log_joint(&mut tape, &sub, th)?;
        let g = tape.gradient(loss, &[th])?;
        if !g[0].is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step, what: "Laplace MAP gradient".into() });
        }
        adam.step(&mut theta, g[0].data())?;
    }
    let mut tape = Tape::new();
    let th = tape.variable("theta", Tensor::row(theta.clone()));
    let loss = neg_log_joint(&mut tape, &frozen, th)?;
    let g = tape.grad(loss, &[th])?[0];
    let mut clipped = 0;
    let mut log_stds = Vec::with_capacity(p);
    for j in 0..p {
        let gj = tape.slice(g, 0, j, 1, 1);
        let h = tape.gradient(gj, &[th])?[0].data()[j];
        let h = if h.is_finite() && h >= cfg.floor {
            h
        } else {
            clipped += 1;
            cfg.floor
        };
        log_stds.push(-0.5 * h.ln());
    }
    if clipped > 0 {
        log::warn!("Laplace fit: {clipped} curvature entries clipped to {}", cfg.floor);
    }
    Ok(LaplaceFit { psi: VariationalGaussian { means: theta, log_stds }, clipped })
}

/// Diagonal Laplace approximation to the posterior given the weighted
/// points of `subset`.
pub fn fit_subset_laplace(model: &Model, subset: &Coreset, cfg: &LaplaceConfig, seed: u64) -> Result<LaplaceFit> {
    if subset.is_empty() {
        return Err(Error::invalid("Laplace fit needs a nonempty subset"));
    }
    laplace(model, subset, cfg, cfg.steps, None, &mut rng::stream(seed, Stream::Minibatch))
}

fn uniform_subset(train: &Dataset, m: usize, seed: u64, mode: WeightMode) -> Result<Coreset> {
    if m == 0 || m > train.len() {
        return Err(Error::invalid(format!("coreset size {m} must lie in 1..={}", train.len())));
    }
    let idx = rng::sample_without_replacement(&mut rng::stream(seed, Stream::Init), train.len(), m);
    let mut cs = Coreset::from_data(train, &idx, vec![train.len() as f64 / m as f64; m])?;
    cs.mode = mode;
    cs.seed = seed;
    Ok(cs)
}

fn empty_data_coreset(train: &Dataset) -> Result<Coreset> {
    let mut cs = Coreset::from_data(train, &[], vec![])?;
    cs.u = Tensor::zeros(0, train.dim());
    Ok(cs)
}

/// Greedy growth of a weighted subset; weights trained on the black-box
/// objective after each selection.
pub fn train_bb_sparse_incremental(
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.bilevel.validate(train.len())?;
    if cfg.rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let mut run = Run::new(model, train, test, cfg)?;
    let mut cs = empty_data_coreset(train)?;
    cs.model_hash = Some(model.spec().hash());
    let mut psi = init_psi(model, cfg);
    let mut driver = BilevelDriver::new(cfg.bilevel.clone(), psi.clone());
    let fit = FitConfig {
        steps: cfg.bilevel.inner_steps,
        lr: cfg.bilevel.inner_lr,
        mc_samples: cfg.bilevel.mc_samples,
        batch_size: 0,
    };
    let mut fit_rng = rng::stream(cfg.bilevel.seed, Stream::Selection);
    for round in 0..cfg.rounds {
        let batch = run.minibatch();
        fit_vi(model, &mut psi, &cs, &fit, &mut fit_rng, |_| {})?;
        let noise = run.noise();
        let (theta, w) = predict::weighted_samples(model, &psi, Some(&cs), &noise, cfg.bilevel.weight_form)?;
        let stats = selection_stats(model, &theta, Some(&w), &cs, &batch)?;
        let choice = greedy_select(&stats, &cs.weights(), &eligible(&cs, &batch))?;
        apply_selection(&mut cs, train, &batch, choice);
        for _ in 0..cfg.bilevel.outer_iters {
            run.bilevel_step(&mut driver, &mut cs, &mut psi, round)?;
            if run.due() {
                run.evaluate(&psi, Some(&cs))?;
            }
        }
    }
    run.evaluate(&psi, Some(&cs))?;
    Ok(TrainOutput { coreset: Some(cs), psi, trace: run.trace, corrected: true })
}

fn train_subset_weights(
    run: &mut Run<'_>,
    cs: &mut Coreset,
    psi: &mut VariationalGaussian,
    driver: &mut BilevelDriver,
    steps: usize,
    round: usize,
) -> Result<()> {
    for _ in 0..steps {
        run.bilevel_step(driver, cs, psi, round)?;
        if run.due() {
            run.evaluate(psi, Some(cs))?;
        }
    }
    Ok(())
}

/// Uniform random subset with weights `N/M`, then weights trained on the
/// black-box objective; locations stay fixed.
pub fn train_bb_sparse_batch(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    prune_with_sizes(model, train, test, cfg, &[cfg.coreset_size], Some(cfg.bilevel.outer_iters))
}

/// Batch construction at `sizes[0]`, then repeated multinomial thinning to
/// each following size with retraining from scratch.
pub fn prune(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    prune_with_sizes(model, train, test, cfg, &cfg.prune_sizes, cfg.prune_steps)
}

fn prune_with_sizes(
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sizes: &[usize],
    steps: Option<usize>,
) -> Result<TrainOutput> {
    cfg.bilevel.validate(train.len())?;
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("pruning sizes {sizes:?} must be strictly decreasing")));
    }
    let steps = steps.unwrap_or(cfg.bilevel.outer_iters / sizes.len());
    let mut run = Run::new(model, train, test, cfg)?;
    let mut prune_rng = rng::stream(cfg.bilevel.seed, Stream::Prune);
    let mut cs = uniform_subset(train, sizes[0], cfg.bilevel.seed, WeightMode::FreeNonneg)?;
    cs.model_hash = Some(model.spec().hash());
    let mut psi = init_psi(model, cfg);
    let mut driver = BilevelDriver::new(cfg.bilevel.clone(), psi.clone());
    train_subset_weights(&mut run, &mut cs, &mut psi, &mut driver, steps, 0)?;
    for (round, &c) in sizes.iter().enumerate().skip(1) {
        let support = multinomial_counts(&cs.weights(), c, &mut prune_rng)?;
        let source = cs.source_index.clone().unwrap_or_default();
        let idx: Vec<usize> = support.iter().map(|&(i, _)| source[i]).collect();
        let mut next = Coreset::from_data(train, &idx, vec![train.len() as f64 / c as f64; idx.len()])?;
        next.model_hash = cs.model_hash.clone();
        next.seed = cs.seed;
        cs = next;
        psi = init_psi(model, cfg);
        driver = BilevelDriver::new(cfg.bilevel.clone(), psi.clone());
        train_subset_weights(&mut run, &mut cs, &mut psi, &mut driver, steps, round)?;
    }
    run.evaluate(&psi, Some(&cs))?;
    Ok(TrainOutput { coreset: Some(cs), psi, trace: run.trace, corrected: true })
}

/// Distinct indices hit by `draws` multinomial draws with probabilities
/// proportional to `v`, in increasing order, with their hit counts.
pub fn multinomial_counts(v: &[f64], draws: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if !v.iter().any(|&w| w > 0.0) {
        return Err(Error::invalid("cannot sample from all-zero weights"));
    }
    let dist = WeightedIndex::new(v.iter().map(|w| w.max(0.0))).map_err(|e| Error::invalid(e.to_string()))?;
    let mut hits = vec![0; v.len()];
    for _ in 0..draws {
        hits[dist.sample(rng)] += 1;
    }
    Ok(hits.into_iter().enumerate().filter(|&(_, h)| h > 0).collect())
}

/// Greedy selection with the analytic KL-gradient estimate and projected
/// Adam updates of the weights, sampling from a Laplace approximation of
/// the current coreset posterior.
pub fn train_sparse_vi_baseline(
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.bilevel.validate(train.len())?;
    if cfg.rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let mut run = Run::new(model, train, test, cfg)?;
    let mut cs = empty_data_coreset(train)?;
    cs.model_hash = Some(model.spec().hash());
    let mut lap_rng = rng::stream(cfg.bilevel.seed, Stream::Selection);
    let mut fit = laplace(model, &cs, &cfg.laplace, cfg.laplace.steps, None, &mut lap_rng)?;
    let mut adam = AdamState::new(0, AdamConfig::with_lr(cfg.bilevel.outer_lr.v));
    for round in 0..cfg.rounds {
        let batch = run.minibatch();
        let theta = fit.psi.sample_values(&run.noise())?;
        let stats = selection_stats(model, &theta, None, &cs, &batch)?;
        let choice = greedy_select(&stats, &cs.weights(), &eligible(&cs, &batch))?;
        if apply_selection(&mut cs, train, &batch, choice) {
            adam.resize(cs.len());
        }
        for _ in 0..cfg.bilevel.outer_iters {
            let map = fit.psi.means.clone();
            fit = laplace(model, &cs, &cfg.laplace, cfg.laplace.refit_steps, Some(&map), &mut lap_rng)?;
            let batch = run.minibatch();
            let theta = fit.psi.sample_values(&run.noise())?;
            let stats = selection_stats(model, &theta, None, &cs, &batch)?;
            let grad = stats.kl_gradient();
            adam.step(&mut cs.v_raw, &grad)?;
            cs.project();
            let resid_sq = stats.residual.iter().map(|r| r * r).sum::<f64>() / stats.residual.len() as f64;
            let size = cs.support().len();
            run.record(round, 0.5 * resid_sq, f64::NAN, 1.0, size);
            if run.due() {
                run.evaluate(&fit.psi, None)?;
            }
        }
    }
    let map = fit.psi.means.clone();
    fit = laplace(model, &cs, &cfg.laplace, cfg.laplace.refit_steps, Some(&map), &mut lap_rng)?;
    run.evaluate(&fit.psi, None)?;
    Ok(TrainOutput { coreset: Some(cs), psi: fit.psi, trace: run.trace, corrected: false })
}

fn fit_and_trace(
    run: &mut Run<'_>,
    cs: &Coreset,
    steps: usize,
    batch_size: usize,
) -> Result<VariationalGaussian> {
    let cfg = run.cfg;
    let mut psi = init_psi(run.model, cfg);
    let fit = FitConfig { steps, lr: cfg.vi_lr, mc_samples: cfg.bilevel.mc_samples, batch_size };
    let mut rng = rng::stream(cfg.bilevel.seed, Stream::Selection);
    let size = cs.support().len();
    let mut losses = Vec::with_capacity(steps);
    fit_vi(run.model, &mut psi, cs, &fit, &mut rng, |l| losses.push(l))?;
    for l in losses {
        run.record(0, l, f64::NAN, 1.0, size);
    }
    run.evaluate(&psi, None)?;
    Ok(psi)
}

/// Mean-field VI on a uniform random subset weighted by `N/M`.
pub fn train_random_coreset_baseline(
    model: &Model,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let mut run = Run::new(model, train, test, cfg)?;
    let cs = uniform_subset(train, cfg.coreset_size, cfg.bilevel.seed, WeightMode::FixedRatio)?;
    let psi = fit_and_trace(&mut run, &cs, cfg.vi_steps, cfg.bilevel.batch_size)?;
    Ok(TrainOutput { coreset: Some(cs), psi, trace: run.trace, corrected: false })
}

/// Mean-field VI on the full training set with minibatches.
pub fn train_full_mfvi(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut run = Run::new(model, train, test, cfg)?;
    let idx: Vec<usize> = (0..train.len()).collect();
    let cs = Coreset::from_data(train, &idx, vec![1.0; train.len()])?;
    let psi = fit_and_trace(&mut run, &cs, cfg.vi_steps, cfg.bilevel.batch_size)?;
    Ok(TrainOutput { coreset: None, psi, trace: run.trace, corrected: false })
}

/// Diagonal Laplace approximation on a uniform random subset weighted by
/// `N/M`.
pub fn train_subset_laplace(model: &Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut run = Run::new(model, train, test, cfg)?;
    let cs = uniform_subset(train, cfg.coreset_size, cfg.bilevel.seed, WeightMode::FixedRatio)?;
    let fit = fit_subset_laplace(model, &cs, &cfg.laplace, cfg.bilevel.seed)?;
    run.evaluate(&fit.psi, None)?;
    Ok(TrainOutput { coreset: Some(cs), psi: fit.psi, trace: run.trace, corrected: false })
}

/// Test metrics of a finished run, with importance correction when the
/// method calls for it.
pub fn evaluate_output(
    model: &Model,
    out: &TrainOutput,
    test: &Dataset,
    k: usize,
    seed: u64,
    form: WeightForm,
    exec: Exec,
) -> Result<predict::EvalReport> {
    let cs = if out.corrected { out.coreset.as_ref() } else { None };
    predict::evaluate(model, &out.psi, cs, test, k, seed, form, exec)
}

/// Final objective value of a run on the full training set.
pub fn final_elbo(model: &Model, out: &TrainOutput, train: &Dataset, k: usize, seed: u64, form: WeightForm) -> Result<f64> {
    let cs = if out.corrected { out.coreset.as_ref() } else { None };
    predict::full_data_elbo(model, &out.psi, cs, train, k, seed, form)
}
