//! Datasets: file loaders, synthetic generators, standardization, splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Environment variable naming the directory holding downloaded datasets.
pub const DATA_DIR_ENV: &str = "BBCORESET_DATA_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Full,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub feature_names: Option<Vec<String>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset { x, y, num_classes, feature_names: None, split: Split::Full })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Error if there is nothing to train or evaluate on.
    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::invalid("dataset is empty"))
        } else {
            Ok(())
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
            split: self.split,
        }
    }

    /// One-hot label matrix (`N×C`).
    pub fn label_matrix(&self) -> Tensor {
        Tensor::one_hot(&self.y, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    /// Indices of points belonging to each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &c) in self.y.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Points whose label is in `classes`; labels are kept as-is.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| classes.contains(&self.y[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate datasets of dim {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(other.x.data());
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Dataset {
            x: Tensor::new(y.len(), self.dim(), data),
            y,
            num_classes: self.num_classes.max(other.num_classes),
            feature_names: self.feature_names.clone(),
            split: self.split,
        })
    }

    /// Random disjoint split; `test_fraction` of the points (rounded) go to
    /// the test side.
    pub fn split(&self, test_fraction: f64, rng: &mut Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test_idx, train_idx) = idx.split_at(n_test);
        let mut train = self.subset(train_idx);
        let mut test = self.subset(test_idx);
        train.split = Split::Train;
        test.split = Split::Test;
        (train, test)
    }
}

/// Map a sparse-format label to a class index.
fn parse_label(tok: &str, line: usize) -> Result<usize> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad label `{tok}`") })?;
    match v {
        v if v == 1.0 => Ok(1),
        v if v == -1.0 || v == 0.0 => Ok(0),
        _ => Err(Error::Parse { line, msg: format!("label `{tok}` is not binary") }),
    }
}

/// Parse sparse `label index:value ...` text. Indices are 1-based. When `dim`
/// is given, an index beyond it is an error; otherwise the width is the
/// largest index seen.
pub fn parse_libsvm(text: &str, dim: Option<usize>) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label = parse_label(toks.next().unwrap_or_default(), lineno)?;
        let mut entries = Vec::new();
        for tok in toks {
            let (i, v) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected index:value, got `{tok}`"),
            })?;
            let i: usize = i.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index `{i}`"),
            })?;
            if i == 0 {
                return Err(Error::Parse { line: lineno, msg: "indices are 1-based".into() });
            }
            let v: f64 = v.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value `{v}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: lineno, msg: "non-finite value".into() });
            }
            if let Some(d) = dim {
                if i > d {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("index {i} exceeds declared dimension {d}"),
                    });
                }
            }
            max_index = max_index.max(i);
            entries.push((i - 1, v));
        }
        rows.push(entries);
        labels.push(label);
    }
    let d = dim.unwrap_or(max_index);
    let mut x = Tensor::zeros(rows.len(), d);
    for (r, entries) in rows.iter().enumerate() {
        for &(c, v) in entries {
            x.set(r, c, v);
        }
    }
    Dataset::new(x, labels, 2)
}

pub fn load_libsvm(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Dataset> {
    parse_libsvm(&fs::read_to_string(path)?, dim)
}

/// CSV with a header row; the column named `label` holds class indices and
/// every other column is a numeric feature.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Parse { line: 1, msg: "no `label` column".into() })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                let label: usize = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad label `{field}`"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad value `{field}`"),
                })?;
                data.push(v);
            }
        }
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let mut ds = Dataset::new(Tensor::new(labels.len(), names.len(), data), labels, classes)?;
    ds.feature_names = Some(names);
    Ok(ds)
}

/// Two interleaved unit semicircles with isotropic Gaussian noise.
/// Class 0 lies on the upper arc centred at the origin, class 1 on the
/// lower arc centred at `(1, -0.5)`.
pub fn gen_half_moon(n: usize, noise_std: f64, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, Stream::Data);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.random::<f64>() * std::f64::consts::PI;
        let (mut a, mut b) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        if noise_std > 0.0 {
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            a += noise_std * e[0];
            b += noise_std * e[1];
        }
        rows.push(vec![a, b]);
        y.push(class);
    }
    Dataset::new(Tensor::from_rows(&rows), y, 2).expect("generator output is valid")
}

/// Default blob centres: corners of a square of side 4.
pub const FOUR_CLASS_CENTERS: [[f64; 2]; 4] = [[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0], [2.0, 2.0]];

/// One Gaussian blob per class, balanced.
pub fn gen_blobs(n: usize, centers: &[[f64; 2]], std: f64, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, Stream::Data);
    let k = centers.len();
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let c = centers[class];
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        rows.push(vec![c[0] + std * e0, c[1] + std * e1]);
        y.push(class);
    }
    Dataset::new(Tensor::from_rows(&rows), y, k).expect("generator output is valid")
}

pub fn gen_four_class(n: usize, seed: u64) -> Dataset {
    gen_blobs(n, &FOUR_CLASS_CENTERS, 1.0, seed)
}

/// `x ~ N(0, I_d)`, `y ~ Bernoulli(sigmoid(5 * sum(x)))`.
pub fn gen_synthetic_logreg(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, Stream::Data);
    let x = rng::standard_normal(&mut rng, n, d);
    let y = (0..n)
        .map(|i| {
            let a = 5.0 * x.row_slice(i).iter().sum::<f64>();
            let p = 1.0 / (1.0 + (-a).exp());
            usize::from(rng.random::<f64>() < p)
        })
        .collect();
    Dataset::new(x, y, 2).expect("generator output is valid")
}

/// Per-feature affine standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Zero-variance features are left untouched (mean 0, std 1).
    pub fn fit(x: &Tensor) -> Scaler {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut std = Vec::with_capacity(d);
        for j in 0..d {
            let s = (var[j] / n.max(1) as f64).sqrt();
            if s > 1e-12 {
                std.push(s);
            } else {
                std.push(1.0);
                mean[j] = 0.0;
            }
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.std[j] + self.mean[j];
        }
        out
    }
}

/// Fit a scaler on `train` and apply it to `train` and every other set.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> (Dataset, Vec<Dataset>, Scaler) {
    let scaler = Scaler::fit(&train.x);
    let apply = |d: &Dataset| Dataset { x: scaler.transform(&d.x), ..d.clone() };
    let out = others.iter().map(|d| apply(d)).collect();
    (apply(train), out, scaler)
}

/// Reference sizes for the public benchmark files: `(name, train, test, dim)`.
pub const KNOWN_DATASETS: [(&str, usize, usize, usize); 3] = [
    ("webspam", 100_948, 25_237, 128),
    ("phishing", 8_844, 2_210, 11),
    ("adult", 24_130, 6_032, 11),
];

/// Compare loaded sizes against the reference table and log a warning on a
/// mismatch. Upstream files drift, so this never fails.
pub fn check_known_shape(name: &str, train: &Dataset, test: &Dataset) -> bool {
    let Some(&(_, n_tr, n_te, d)) = KNOWN_DATASETS.iter().find(|k| k.0 == name) else {
        return true;
    };
    let ok = train.len() == n_tr && test.len() == n_te && train.dim() == d;
    if !ok {
        log::warn!(
            "{name}: got {}/{} rows and {} features, reference is {n_tr}/{n_te} rows and {d} features",
            train.len(),
            test.len(),
            train.dim()
        );
    }
    ok
}

/// Gaussian draw helper shared by initializers.
pub(crate) fn normal(rng: &mut Rng, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(mean, std).expect("std is positive").sample(rng)
    } else {
        mean
    }
}
