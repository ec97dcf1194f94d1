//! Config-driven experiments: data and model assembly, multi-seed runs,
//! coreset-size sweeps, the class-incremental protocol, and report files.
//!
//! A config is a TOML document deserialized into [`ExperimentConfig`].
//! Dotted `key=value` overrides are applied to the parsed document before
//! deserialization, so `train.bilevel.inner_steps=20` and
//! `seeds=[0,1,2]` both work.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{self, TrainConfig, TrainOutput, TrainTrace};
use crate::coresets::{init_coreset, softmax, Coreset, Labels, Trainable, WeightMode};
use crate::data::{self, Dataset, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind, ModelSpec};
use crate::par::Exec;
use crate::predict::{self, EvalReport};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::variational::VariationalGaussian;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    HalfMoon { n: usize, noise: f64 },
    FourClass { n: usize },
    SyntheticLogreg { n: usize, dim: usize },
    /// Sparse text file `<name>`, `<name>.libsvm` or `<name>.txt` in the data
    /// directory.
    Libsvm { name: String, dim: Option<usize> },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Scale features with training-set statistics.
    #[serde(default)]
    pub standardize: bool,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub kind: ModelKind,
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    #[serde(default)]
    pub layer_prior_std: Option<Vec<f64>>,
}

fn default_prior_std() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BbPsvi,
    BbSparseIncremental,
    BbSparseBatch,
    BbSparsePrune,
    SparseVi,
    RandomCoreset,
    SubsetLaplace,
    FullMfvi,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::BbPsvi => "bb-psvi",
            Method::BbSparseIncremental => "bb-sparse-incremental",
            Method::BbSparseBatch => "bb-sparse-batch",
            Method::BbSparsePrune => "bb-sparse-prune",
            Method::SparseVi => "sparse-vi",
            Method::RandomCoreset => "random-coreset",
            Method::SubsetLaplace => "subset-laplace",
            Method::FullMfvi => "full-mfvi",
        }
    }

    /// Whether the coreset size is a free parameter of the method.
    pub fn uses_coreset_size(self) -> bool {
        !matches!(self, Method::FullMfvi | Method::BbSparsePrune)
    }

    pub fn train(
        self,
        model: &Model,
        train: &Dataset,
        test: Option<&Dataset>,
        cfg: &TrainConfig,
    ) -> Result<TrainOutput> {
        match self {
            Method::BbPsvi => algorithms::train_bb_psvi(model, train, test, cfg),
            Method::BbSparseIncremental => algorithms::train_bb_sparse_incremental(model, train, test, cfg),
            Method::BbSparseBatch => algorithms::train_bb_sparse_batch(model, train, test, cfg),
            Method::BbSparsePrune => algorithms::prune(model, train, test, cfg),
            Method::SparseVi => algorithms::train_sparse_vi_baseline(model, train, test, cfg),
            Method::RandomCoreset => algorithms::train_random_coreset_baseline(model, train, test, cfg),
            Method::SubsetLaplace => algorithms::train_subset_laplace(model, train, test, cfg),
            Method::FullMfvi => algorithms::train_full_mfvi(model, train, test, cfg),
        }
    }
}

/// Class-incremental schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    /// Classes revealed at each task; together they must be `0..C`.
    pub tasks: Vec<Vec<usize>>,
    /// Coreset size after each task.
    pub coreset_sizes: Vec<usize>,
    /// Ablation: every task sees only its own fresh data and no replay.
    pub fresh_only: bool,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        ContinualConfig { tasks: vec![vec![0, 1], vec![2], vec![3]], coreset_sizes: vec![10, 15, 20], fresh_only: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub method: Method,
    /// Sizes for sweeps; `run` uses the first.
    #[serde(default)]
    pub coreset_sizes: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Posterior samples for the final test evaluation and ELBO.
    #[serde(default = "default_final_samples")]
    pub final_samples: usize,
    #[serde(default)]
    pub continual: Option<ContinualConfig>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_final_samples() -> usize {
    100
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Set `a.b.c = value` in a TOML document; `value` is read as TOML when it
/// parses and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in path {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.method == Method::BbSparsePrune && self.train.prune_sizes.is_empty() {
            return Err(Error::Config("bb-sparse-prune needs train.prune_sizes".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        if let Some(c) = &self.continual {
            if c.tasks.is_empty() || c.tasks.len() != c.coreset_sizes.len() {
                return Err(Error::Config("continual.tasks and continual.coreset_sizes must have equal nonzero length".into()));
            }
        }
        Ok(())
    }

    /// Sizes for a sweep: the configured list, else `train.coreset_size`.
    pub fn sizes(&self) -> Vec<usize> {
        if !self.method.uses_coreset_size() {
            return vec![0];
        }
        if self.coreset_sizes.is_empty() {
            vec![self.train.coreset_size]
        } else {
            self.coreset_sizes.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the config, minus its output
    /// location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// `out_dir/<name>-<hash>`: distinct configs never share a directory.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.name, self.hash()))
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn find_libsvm(name: &str) -> Result<PathBuf> {
    let dir = data_dir();
    [name.to_string(), format!("{name}.libsvm"), format!("{name}.txt")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset `{name}` not found in {} (set {DATA_DIR_ENV})", dir.display()),
            ))
        })
}

/// Load or generate the dataset for `seed` and split it into train/test.
pub fn prepare_data(cfg: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (full, name) = match &cfg.source {
        DataSource::HalfMoon { n, noise } => (data::gen_half_moon(*n, *noise, seed), None),
        DataSource::FourClass { n } => (data::gen_four_class(*n, seed), None),
        DataSource::SyntheticLogreg { n, dim } => (data::gen_synthetic_logreg(*n, *dim, seed), None),
        DataSource::Libsvm { name, dim } => (data::load_libsvm(find_libsvm(name)?, *dim)?, Some(name.as_str())),
        DataSource::Csv { path } => (data::load_csv(path)?, None),
    };
    full.ensure_nonempty()?;
    let (train, test) = full.split(cfg.test_fraction, &mut rng::stream(seed, Stream::Split));
    if let Some(name) = name {
        data::check_known_shape(name, &train, &test);
    }
    if cfg.standardize {
        let (train, mut others, _) = data::standardize(&train, &[&test]);
        return Ok((train, others.remove(0)));
    }
    Ok((train, test))
}

pub fn build_model(cfg: &ModelConfig, input_dim: usize, num_classes: usize) -> Result<Model> {
    let spec = ModelSpec {
        kind: cfg.kind.clone(),
        input_dim,
        num_classes,
        prior_std: cfg.prior_std,
        layer_prior_std: cfg.layer_prior_std.clone(),
    };
    Model::new(spec)
}

/// Everything one `(method, M, seed)` trial produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config_hash: String,
    pub method: Method,
    pub coreset_size: usize,
    pub seed: u64,
    pub model: ModelSpec,
    pub report: EvalReport,
    /// Black-box coreset objective on the full training set.
    pub final_elbo: f64,
    pub corrected: bool,
    pub coreset: Option<Coreset>,
    pub psi: VariationalGaussian,
    pub trace: TrainTrace,
}

impl TrialResult {
    fn file_name(&self) -> String {
        format!("trial-m{}-seed{}.json", self.coreset_size, self.seed)
    }

    /// Coreset used for importance correction, if any.
    pub fn correction(&self) -> Option<&Coreset> {
        self.coreset.as_ref().filter(|_| self.corrected)
    }
}

pub fn run_trial(cfg: &ExperimentConfig, coreset_size: usize, seed: u64) -> Result<TrialResult> {
    let (train, test) = prepare_data(&cfg.data, seed)?;
    let model = build_model(&cfg.model, train.dim(), train.num_classes)?;
    let mut tc = cfg.train.clone();
    tc.bilevel.seed = seed;
    if cfg.method.uses_coreset_size() {
        tc.coreset_size = coreset_size;
    }
    let out = cfg.method.train(&model, &train, Some(&test), &tc)?;
    let form = tc.bilevel.weight_form;
    let report = algorithms::evaluate_output(&model, &out, &test, cfg.final_samples, seed, form, tc.exec)?;
    let final_elbo = algorithms::final_elbo(&model, &out, &train, cfg.final_samples, seed, form)?;
    Ok(TrialResult {
        config_hash: cfg.hash(),
        method: cfg.method,
        coreset_size,
        seed,
        model: model.spec().clone(),
        report,
        final_elbo,
        corrected: out.corrected,
        coreset: out.coreset,
        psi: out.psi,
        trace: out.trace,
    })
}

/// Mean and standard error (`sd/√n`, zero for a single value).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config_hash: String,
    pub method: Method,
    pub coreset_size: usize,
    pub trials: usize,
    pub accuracy_mean: f64,
    pub accuracy_se: f64,
    pub nll_mean: f64,
    pub nll_se: f64,
    pub ess_mean: f64,
    pub elbo_mean: f64,
    pub elbo_se: f64,
}

/// One row per coreset size, ordered by size then first appearance.
pub fn aggregate(trials: &[TrialResult]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Method, usize), Vec<&TrialResult>> = BTreeMap::new();
    for t in trials {
        groups.entry((t.method, t.coreset_size)).or_default().push(t);
    }
    groups
        .into_iter()
        .map(|((method, m), ts)| {
            let col = |f: fn(&TrialResult) -> f64| ts.iter().map(|t| f(t)).collect::<Vec<_>>();
            let (accuracy_mean, accuracy_se) = mean_se(&col(|t| t.report.accuracy));
            let (nll_mean, nll_se) = mean_se(&col(|t| t.report.nll));
            let (ess_mean, _) = mean_se(&col(|t| t.report.ess));
            let (elbo_mean, elbo_se) = mean_se(&col(|t| t.final_elbo));
            AggregateRow {
                config_hash: ts[0].config_hash.clone(),
                method,
                coreset_size: m,
                trials: ts.len(),
                accuracy_mean,
                accuracy_se,
                nll_mean,
                nll_se,
                ess_mean,
                elbo_mean,
                elbo_se,
            }
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per-trial JSON files in a run directory.
pub fn read_trials(dir: &Path) -> Result<Vec<TrialResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trial-")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect()
}

#[derive(Clone, Debug, Serialize)]
struct TrialError<'a> {
    config_hash: &'a str,
    method: Method,
    coreset_size: usize,
    seed: u64,
    kind: &'static str,
    error: String,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub trials: Vec<TrialResult>,
    pub rows: Vec<AggregateRow>,
}

/// All `(size, seed)` trials, in parallel per `exec`; per-trial JSON plus
/// `aggregate.csv` land in [`ExperimentConfig::run_dir`]. Any failed trial
/// leaves an `error.json` and fails the run.
pub fn run_experiment(cfg: &ExperimentConfig, sizes: &[usize], exec: Exec) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?)?;
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let results = exec.map_slice(&jobs, |&(m, s)| run_trial(cfg, m, s));
    let hash = cfg.hash();
    let mut trials = Vec::with_capacity(jobs.len());
    for ((m, s), r) in jobs.iter().zip(results) {
        match r {
            Ok(t) => trials.push(t),
            Err(e) => {
                let err = TrialError { config_hash: &hash, method: cfg.method, coreset_size: *m, seed: *s, kind: e.kind(), error: e.to_string() };
                fs::write(dir.join("error.json"), serde_json::to_string_pretty(&err)?)?;
                return Err(e);
            }
        }
    }
    for t in &trials {
        fs::write(dir.join(t.file_name()), serde_json::to_string_pretty(t)?)?;
    }
    let rows = aggregate(&trials);
    write_aggregate_csv(&dir.join("aggregate.csv"), &rows)?;
    Ok(RunSummary { dir, trials, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub classes_seen: usize,
    pub train_size: usize,
    pub coreset_size: usize,
    /// Accuracy on test points of every class seen so far.
    pub accuracy_seen: f64,
    /// Accuracy on test points of every class in the schedule.
    pub accuracy_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualResult {
    pub config_hash: String,
    pub seed: u64,
    pub fresh_only: bool,
    pub tasks: Vec<TaskRecord>,
    pub coreset: Option<Coreset>,
}

fn with_classes(ds: &Dataset, classes: usize) -> Dataset {
    let mut d = ds.clone();
    d.num_classes = classes;
    d
}

/// Coreset of `m` uniformly chosen points of `ds`.
fn random_points(ds: &Dataset, m: usize, mode: WeightMode, seed: u64, index: u64) -> Result<Coreset> {
    if m == 0 || m > ds.len() {
        return Err(Error::Config(format!("cannot draw {m} coreset points from {}", ds.len())));
    }
    let idx = rng::sample_without_replacement(&mut rng::substream(seed, Stream::Init, index), ds.len(), m);
    let sub = ds.subset(&idx);
    Coreset::new(sub.x, Labels::Hard(sub.y), ds.num_classes, mode, ds.len())
}

/// `n` draws of coreset points, with probability proportional to weight.
fn replay(cs: &Coreset, n: usize, seed: u64, task: u64) -> Result<Dataset> {
    let w = cs.weights();
    let dist = WeightedIndex::new(w.iter().map(|v| v.max(0.0))).map_err(|e| Error::invalid(e.to_string()))?;
    let mut r = rng::substream(seed, Stream::Prune, task);
    let labels = cs.label_probs();
    let mut x = Vec::with_capacity(n * cs.dim());
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let i = dist.sample(&mut r);
        x.extend_from_slice(cs.u.row_slice(i));
        let row = labels.row_slice(i);
        y.push((0..row.len()).fold(0, |a, j| if row[j] > row[a] { j } else { a }));
    }
    Dataset::new(Tensor::new(n, cs.dim(), x), y, cs.num_classes)
}

/// Give the last `added` coreset points total weight `share·N`, keeping the
/// relative weights of the others and the total at `N`.
fn set_new_share(cs: &mut Coreset, added: usize, share: f64) {
    let m = cs.len();
    let old = m - added;
    match cs.mode {
        WeightMode::Softmax | WeightMode::SoftmaxAlpha => {
            let p_old: f64 = softmax(&cs.beta[..old]).iter().sum::<f64>();
            let s_old: f64 = cs.beta[..old].iter().map(|b| b.exp()).sum::<f64>() / p_old;
            let s_new = share / (1.0 - share) * s_old;
            let b = (s_new / added as f64).ln();
            cs.beta[old..].iter_mut().for_each(|x| *x = b);
            cs.alpha = 1.0;
        }
        WeightMode::FreeNonneg => {
            let n = cs.n as f64;
            let total_old: f64 = cs.v_raw[..old].iter().sum();
            if total_old > 0.0 {
                cs.v_raw[..old].iter_mut().for_each(|v| *v *= (1.0 - share) * n / total_old);
            }
            cs.v_raw[old..].iter_mut().for_each(|v| *v = share * n / added as f64);
        }
        WeightMode::FixedRatio | WeightMode::Unit => {}
    }
}

/// Class-incremental protocol for one seed.
pub fn run_continual_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ContinualResult> {
    let cc = cfg.continual.clone().unwrap_or_default();
    if cfg.train.soft_labels {
        return Err(Error::Config("continual runs use hard coreset labels".into()));
    }
    let (train, test) = prepare_data(&cfg.data, seed)?;
    let total_classes = cc.tasks.iter().map(Vec::len).sum::<usize>();
    let mut all: Vec<usize> = cc.tasks.concat();
    all.sort_unstable();
    if all != (0..total_classes).collect::<Vec<_>>() || total_classes > train.num_classes {
        return Err(Error::Config("continual tasks must partition the class labels 0..C".into()));
    }
    let mut tc = cfg.train.clone();
    tc.bilevel.seed = seed;
    let mut cs: Option<Coreset> = None;
    let mut seen = 0;
    let mut true_seen = 0;
    let mut records = Vec::new();
    for (t, (classes, &m)) in cc.tasks.iter().zip(&cc.coreset_sizes).enumerate() {
        seen += classes.len();
        if classes.iter().any(|&c| c >= seen) {
            return Err(Error::Config("tasks must reveal classes in increasing order".into()));
        }
        let fresh = with_classes(&train.filter_classes(classes), seen);
        let (task_train, coreset) = match cs.take() {
            Some(mut prev) if !cc.fresh_only => {
                let replayed = replay(&prev, true_seen, seed, t as u64)?;
                let task_train = with_classes(&replayed.concat(&fresh)?, seen);
                let added = m.checked_sub(prev.len()).filter(|&a| a > 0).ok_or_else(|| {
                    Error::Config("continual coreset sizes must increase".into())
                })?;
                let new = random_points(&fresh, added, prev.mode, seed, t as u64)?;
                prev.widen_classes(seen);
                prev.n = task_train.len();
                let Labels::Hard(ny) = &new.labels else { unreachable!("random points carry hard labels") };
                for (i, &y) in ny.iter().enumerate() {
                    prev.push_point(new.u.row_slice(i), y, None);
                }
                set_new_share(&mut prev, added, fresh.len() as f64 / task_train.len() as f64);
                (task_train, prev)
            }
            _ => {
                let mut c = if t == 0 {
                    init_coreset(tc.init, &fresh, m, tc.weight_mode, seed)?
                } else {
                    random_points(&fresh, m, tc.weight_mode, seed, t as u64)?
                };
                c.trainable = Trainable::for_mode(tc.weight_mode, tc.learn_locations);
                (fresh.clone(), c)
            }
        };
        let model = build_model(&cfg.model, train.dim(), seen)?;
        let test_seen = with_classes(&test.filter_classes(&(0..seen).collect::<Vec<_>>()), seen);
        let mut coreset = coreset;
        coreset.trainable = Trainable::for_mode(coreset.mode, tc.learn_locations);
        let out = algorithms::train_bb_psvi_from(&model, &task_train, None, &tc, coreset)?;
        let eval = |ds: &Dataset| {
            algorithms::evaluate_output(&model, &out, ds, cfg.final_samples, seed, tc.bilevel.weight_form, tc.exec)
        };
        let accuracy_seen = eval(&test_seen)?.accuracy;
        let all_correct = accuracy_seen * test_seen.len() as f64;
        let accuracy_all = all_correct / test.filter_classes(&(0..total_classes).collect::<Vec<_>>()).len() as f64;
        true_seen += fresh.len();
        let coreset = out.coreset.expect("coreset methods return a coreset");
        records.push(TaskRecord {
            task: t,
            classes_seen: seen,
            train_size: task_train.len(),
            coreset_size: coreset.len(),
            accuracy_seen,
            accuracy_all,
        });
        cs = Some(coreset);
    }
    Ok(ContinualResult { config_hash: cfg.hash(), seed, fresh_only: cc.fresh_only, tasks: records, coreset: cs })
}

/// Continual protocol over all seeds; writes `continual-seed<s>.json` and
/// `continual.csv` (one row per seed and task).
pub fn run_continual(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<ContinualResult>> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let results: Vec<ContinualResult> =
        exec.map_slice(&cfg.seeds, |&s| run_continual_seed(cfg, s)).into_iter().collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(dir.join("continual.csv"))?;
    w.write_record(["config_hash", "seed", "fresh_only", "task", "classes_seen", "coreset_size", "accuracy_seen", "accuracy_all"])?;
    for r in &results {
        fs::write(dir.join(format!("continual-seed{}.json", r.seed)), serde_json::to_string_pretty(r)?)?;
        for t in &r.tasks {
            w.write_record([
                r.config_hash.clone(),
                r.seed.to_string(),
                r.fresh_only.to_string(),
                t.task.to_string(),
                t.classes_seen.to_string(),
                t.coreset_size.to_string(),
                t.accuracy_seen.to_string(),
                t.accuracy_all.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// `grid` or `coreset`.
    pub kind: String,
    pub x1: f64,
    pub x2: f64,
    /// Predictive entropy for grid rows, weight for coreset rows.
    pub value: f64,
}

/// Predictive entropy on a `res.0 × res.1` grid over
/// `[x1_min, x1_max] × [x2_min, x2_max]`, followed by one row per coreset
/// point. A single-cell axis sits at the interval midpoint.
pub fn entropy_grid(
    model: &Model,
    psi: &VariationalGaussian,
    coreset: Option<&Coreset>,
    bounds: [f64; 4],
    res: (usize, usize),
    k: usize,
    seed: u64,
) -> Result<Vec<GridRow>> {
    if model.input_dim() != 2 || res.0 == 0 || res.1 == 0 {
        return Err(Error::invalid("entropy grids need 2-D inputs and a nonzero resolution"));
    }
    let axis = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        if n == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let xs = axis(bounds[0], bounds[1], res.0);
    let ys = axis(bounds[2], bounds[3], res.1);
    let pts: Vec<Vec<f64>> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| vec![x, y])).collect();
    let x = Tensor::from_rows(&pts);
    let noise = rng::standard_normal(&mut rng::stream(seed, Stream::Eval), k, psi.dim());
    let form = Default::default();
    let (probs, _) = predict::posterior_predictive(model, psi, coreset, &x, &noise, form, Exec::Sequential)?;
    let mut rows: Vec<GridRow> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let h = -probs.row_slice(i).iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            GridRow { kind: "grid".into(), x1: p[0], x2: p[1], value: h.max(0.0) }
        })
        .collect();
    if let Some(cs) = coreset {
        for (i, w) in cs.weights().into_iter().enumerate() {
            rows.push(GridRow { kind: "coreset".into(), x1: cs.u.get(i, 0), x2: cs.u.get(i, 1), value: w });
        }
    }
    Ok(rows)
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Status of the optional real datasets in the data directory.
pub fn data_status() -> Vec<(String, Option<PathBuf>)> {
    data::KNOWN_DATASETS.iter().map(|(name, ..)| (name.to_string(), find_libsvm(name).ok())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "toy"
method = "bb-psvi"
seeds = [0, 1]

[data]
source = "half-moon"
n = 60
noise = 0.1

[model]
kind = "logistic-regression"

[train]
coreset_size = 4
[train.bilevel]
inner_steps = 2
outer_iters = 3
batch_size = 16
"#;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::from_toml(
            BASE,
            &["train.bilevel.inner_steps=7".into(), "seeds=[4]".into(), "name=other".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.bilevel.inner_steps, 7);
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.name, "other");
        assert_eq!(cfg.train.bilevel.outer_iters, 3);
        assert!(ExperimentConfig::from_toml(BASE, &["seeds=[]".into()]).is_err());
        assert!(ExperimentConfig::from_toml(BASE, &["nonsense".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        let b = ExperimentConfig::from_toml(BASE, &["out_dir=elsewhere".into()]).unwrap();
        let c = ExperimentConfig::from_toml(BASE, &["seeds=[9]".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn new_points_get_requested_share() {
        let mut cs = Coreset::new(Tensor::zeros(3, 1), Labels::Hard(vec![0, 1, 0]), 2, WeightMode::Softmax, 100).unwrap();
        cs.beta = vec![0.3, -1.0, 2.0];
        let before = cs.weights();
        cs.push_point(&[1.0], 1, None);
        cs.push_point(&[2.0], 1, None);
        set_new_share(&mut cs, 2, 0.25);
        let w = cs.weights();
        assert!((w[3] + w[4] - 25.0).abs() < 1e-9);
        assert!((w[0] / w[1] - before[0] / before[1]).abs() < 1e-9);
    }

    #[test]
    fn uniform_grid_has_max_entropy() {
        let model = build_model(
            &ModelConfig { kind: ModelKind::LogisticRegression, prior_std: 1.0, layer_prior_std: None },
            2,
            2,
        )
        .unwrap();
        let psi = VariationalGaussian::new(3, 1e-300);
        let rows = entropy_grid(&model, &psi, None, [-1.0, 1.0, -1.0, 1.0], (3, 2), 4, 0).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows {
            assert!((r.value - 2f64.ln()).abs() < 1e-12);
        }
        let one = entropy_grid(&model, &psi, None, [0.0, 1.0, 0.0, 1.0], (1, 1), 4, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].x1, one[0].x2), (0.5, 0.5));
    }
}
