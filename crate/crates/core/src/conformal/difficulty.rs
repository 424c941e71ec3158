//! Per-instance difficulty estimates σ that scale conformal intervals.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blackbox::TreeEnsemble;
use crate::data::{read_json, write_json, Dataset};
use crate::error::{check_width, Error, Result};
use crate::explain::ExplanationMatrix;
use crate::matrix::Matrix;
use crate::surrogate::BlackBoxOutputs;

pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DifficultyKind {
    None,
    KnnDist,
    KnnLabelStd,
    KnnCombined,
    MinDist,
    AvgDist,
    PredConf,
}

impl DifficultyKind {
    pub const ALL: [DifficultyKind; 7] = [
        DifficultyKind::None,
        DifficultyKind::KnnDist,
        DifficultyKind::KnnLabelStd,
        DifficultyKind::KnnCombined,
        DifficultyKind::MinDist,
        DifficultyKind::AvgDist,
        DifficultyKind::PredConf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DifficultyKind::None => "none",
            DifficultyKind::KnnDist => "knn-dist",
            DifficultyKind::KnnLabelStd => "knn-label-std",
            DifficultyKind::KnnCombined => "knn-combined",
            DifficultyKind::MinDist => "min-dist",
            DifficultyKind::AvgDist => "avg-dist",
            DifficultyKind::PredConf => "pred-conf",
        }
    }

    pub fn is_knn(self) -> bool {
        matches!(self, DifficultyKind::KnnDist | DifficultyKind::KnnLabelStd | DifficultyKind::KnnCombined)
    }

    /// Whether σ differs between features of one instance.
    pub fn per_feature(self) -> bool {
        matches!(self, DifficultyKind::KnnLabelStd | DifficultyKind::KnnCombined)
    }
}

impl std::fmt::Display for DifficultyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for DifficultyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DifficultyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty estimator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnForm {
    #[default]
    Additive,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyConfig {
    pub kind: DifficultyKind,
    pub k: usize,
    pub gamma: f64,
    pub rho: f64,
    pub form: KnnForm,
    pub floor: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            kind: DifficultyKind::None,
            k: 25,
            gamma: 1.0,
            rho: 1.0,
            form: KnnForm::Additive,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl DifficultyConfig {
    pub fn of(kind: DifficultyKind) -> Self {
        DifficultyConfig {
            kind,
            ..DifficultyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return Err(Error::Config(format!("floor {} must be > 0", self.floor)));
        }
        if !(self.gamma.is_finite() && self.rho.is_finite()) {
            return Err(Error::Config("gamma and rho must be finite".into()));
        }
        if self.kind.is_knn() && self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// σ for one instance: a single value, or one per explained feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Shared(f64),
    PerFeature(Vec<f64>),
}

impl Sigma {
    pub fn get(&self, f: usize) -> f64 {
        match self {
            Sigma::Shared(s) => *s,
            Sigma::PerFeature(v) => v[f],
        }
    }

    pub fn scaled(&self, factor: f64) -> Sigma {
        match self {
            Sigma::Shared(s) => Sigma::Shared(s * factor),
            Sigma::PerFeature(v) => Sigma::PerFeature(v.iter().map(|s| s * factor).collect()),
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest rows of `train` as (distance, row) pairs in ascending
/// order, ties broken by row index. `exclude` drops one row by index.
pub fn nearest(x: &[f64], train: &Matrix, k: usize, exclude: Option<usize>) -> Result<Vec<(f64, usize)>> {
    let available = train.rows() - exclude.map_or(0, |e| (e < train.rows()) as usize);
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }
    let mut d: Vec<(f64, usize)> = train
        .iter_rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, r)| (euclidean(x, r), i))
        .collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, by_distance);
        d.truncate(k);
    }
    d.sort_by(by_distance);
    Ok(d)
}

/// Sum of Euclidean distances from `x` to its `k` nearest rows of `train`.
pub fn knn_distance(x: &[f64], train: &Matrix, k: usize) -> Result<f64> {
    Ok(nearest(x, train, k, None)?.iter().map(|p| p.0).sum())
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Midpoint median; zero for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Training rows and their ground-truth importance scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnReference {
    pub features: Matrix,
    pub targets: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnState {
    pub k: usize,
    pub distance_median: f64,
    /// Present for kinds that use neighbour label spread.
    pub label_medians: Option<Vec<f64>>,
    pub reference: Arc<KnnReference>,
}

/// Neighbour statistics of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnQuery {
    pub distance: f64,
    pub label_std: Vec<f64>,
}

impl KnnState {
    pub fn fit(reference: Arc<KnnReference>, k: usize, with_labels: bool) -> Result<KnnState> {
        check_width(reference.features.rows(), reference.targets.rows())?;
        let n = reference.features.rows();
        let mut distances = Vec::with_capacity(n);
        let mut spreads: Vec<Vec<f64>> = vec![Vec::with_capacity(n); reference.targets.cols()];
        for i in 0..n {
            let q = query(&reference, reference.features.row(i), k, Some(i), with_labels)?;
            distances.push(q.distance);
            for (f, s) in q.label_std.into_iter().enumerate() {
                spreads[f].push(s);
            }
        }
        let distance_median = median(&distances);
        if distance_median <= 0.0 {
            return Err(Error::DegenerateMedian {
                what: "neighbour distance sums".into(),
            });
        }
        let label_medians = if with_labels {
            let m: Vec<f64> = spreads.iter().map(|s| median(s)).collect();
            if let Some(f) = m.iter().position(|&v| v <= 0.0) {
                return Err(Error::DegenerateMedian {
                    what: format!("neighbour label spread of feature {f}"),
                });
            }
            Some(m)
        } else {
            None
        };
        Ok(KnnState {
            k,
            distance_median,
            label_medians,
            reference,
        })
    }

    pub fn query(&self, x: &[f64]) -> Result<KnnQuery> {
        query(&self.reference, x, self.k, None, self.label_medians.is_some())
    }

    /// Neighbour distance sum over the training median.
    pub fn lambda(&self, q: &KnnQuery) -> f64 {
        q.distance / self.distance_median
    }

    /// Neighbour label spread of each feature over its training median.
    pub fn xi(&self, q: &KnnQuery) -> Vec<f64> {
        match &self.label_medians {
            Some(m) => q.label_std.iter().zip(m).map(|(s, m)| s / m).collect(),
            None => Vec::new(),
        }
    }
}

fn query(reference: &KnnReference, x: &[f64], k: usize, exclude: Option<usize>, with_labels: bool) -> Result<KnnQuery> {
    let nbrs = nearest(x, &reference.features, k, exclude)?;
    let distance = nbrs.iter().map(|p| p.0).sum();
    let label_std = if with_labels {
        let mut column = Vec::with_capacity(k);
        (0..reference.targets.cols())
            .map(|f| {
                column.clear();
                column.extend(nbrs.iter().map(|&(_, i)| reference.targets.get(i, f)));
                population_std(&column)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(KnnQuery { distance, label_std })
}

/// Lower Cholesky factor of a symmetric positive definite matrix, row-major.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGaussian {
    pub class: usize,
    pub mean: Vec<f64>,
    /// Regularized covariance, row-major.
    pub covariance: Vec<f64>,
    /// Lower Cholesky factor of `covariance`, row-major.
    pub cholesky: Vec<f64>,
    pub ridge: f64,
}

/// One Gaussian per class, fitted by maximum likelihood on that class's rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGaussians {
    pub dim: usize,
    pub classes: Vec<ClassGaussian>,
}

pub fn fit_class_gaussians(train: &Dataset) -> Result<ClassGaussians> {
    let d = train.width();
    let mut classes = Vec::with_capacity(train.n_classes);
    for c in 0..train.n_classes {
        let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        if rows.len() < 2 {
            return Err(Error::ClassTooSmall { class: c, rows: rows.len() });
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &rows {
            for (m, v) in mean.iter_mut().zip(train.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        let mut centred = vec![0.0; d];
        for &i in &rows {
            for (c, (v, m)) in centred.iter_mut().zip(train.features.row(i).iter().zip(&mean)) {
                *c = v - m;
            }
            for a in 0..d {
                for b in 0..=a {
                    cov[a * d + b] += centred[a] * centred[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[a * d + b] / (n - 1.0);
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
        let ridge = (1e-6 * trace / d as f64).max(1e-9);
        for a in 0..d {
            cov[a * d + a] += ridge;
        }
        let chol = cholesky(&cov, d)
            .ok_or_else(|| Error::InvalidData(format!("covariance of class {c} is not positive definite")))?;
        classes.push(ClassGaussian {
            class: c,
            mean,
            covariance: cov,
            cholesky: chol,
            ridge,
        });
    }
    Ok(ClassGaussians { dim: d, classes })
}

impl ClassGaussians {
    /// Mahalanobis distance from `x` to class `c`.
    pub fn mahalanobis(&self, x: &[f64], c: usize) -> f64 {
        let g = &self.classes[c];
        let d = self.dim;
        let mut z = vec![0.0; d];
        let mut norm = 0.0;
        for i in 0..d {
            let mut s = x[i] - g.mean[i];
            for (lk, zk) in g.cholesky[i * d..i * d + i].iter().zip(&z[..i]) {
                s -= lk * zk;
            }
            z[i] = s / g.cholesky[i * d + i];
            norm += z[i] * z[i];
        }
        norm.sqrt()
    }

    pub fn distances(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes.len()).map(|c| self.mahalanobis(x, c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorState {
    Constant,
    Knn(KnnState),
    Gaussians(ClassGaussians),
    Confidence,
}

/// A fitted difficulty estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyEstimator {
    pub config: DifficultyConfig,
    pub state: EstimatorState,
}

impl DifficultyEstimator {
    /// Fits on the training split. `train_truth` holds the ground-truth
    /// importance scores of the training rows; only label-spread kinds read it.
    pub fn fit(config: DifficultyConfig, train: &Dataset, train_truth: &ExplanationMatrix) -> Result<Self> {
        config.validate()?;
        let state = match config.kind {
            DifficultyKind::None => EstimatorState::Constant,
            DifficultyKind::PredConf => EstimatorState::Confidence,
            DifficultyKind::MinDist | DifficultyKind::AvgDist => EstimatorState::Gaussians(fit_class_gaussians(train)?),
            kind => {
                check_width(train.len(), train_truth.n_rows())?;
                let reference = Arc::new(KnnReference {
                    features: train.features.clone(),
                    targets: train_truth.rows.clone(),
                });
                let k = config.k.min(train.len().saturating_sub(1)).max(1);
                EstimatorState::Knn(KnnState::fit(reference, k, kind.per_feature())?)
            }
        };
        Ok(DifficultyEstimator { config, state })
    }

    pub fn kind(&self) -> DifficultyKind {
        self.config.kind
    }

    /// σ for encoded row `x` whose black-box `predict_proba` is `proba`.
    pub fn evaluate(&self, x: &[f64], proba: &[f64]) -> Result<Sigma> {
        let c = &self.config;
        let floor = |s: f64| s.max(c.floor);
        let exp_or_add = |v: f64| match c.form {
            KnnForm::Additive => c.gamma + v,
            KnnForm::Exponential => (c.gamma * v).exp(),
        };
        Ok(match &self.state {
            EstimatorState::Constant => Sigma::Shared(floor(1.0)),
            EstimatorState::Confidence => Sigma::Shared(floor(confidence_difficulty(proba))),
            EstimatorState::Gaussians(g) => {
                check_width(g.dim, x.len())?;
                let d = g.distances(x);
                let v = match c.kind {
                    DifficultyKind::MinDist => d.iter().copied().fold(f64::INFINITY, f64::min),
                    _ => d.iter().sum::<f64>() / d.len() as f64,
                };
                Sigma::Shared(floor((v + 1.0).ln()))
            }
            EstimatorState::Knn(knn) => {
                check_width(knn.reference.features.cols(), x.len())?;
                let q = knn.query(x)?;
                let lambda = knn.lambda(&q);
                match c.kind {
                    DifficultyKind::KnnDist => Sigma::Shared(floor(exp_or_add(lambda))),
                    DifficultyKind::KnnLabelStd => Sigma::PerFeature(knn.xi(&q).into_iter().map(|xi| floor(exp_or_add(xi))).collect()),
                    _ => Sigma::PerFeature(
                        knn.xi(&q)
                            .into_iter()
                            .map(|xi| {
                                floor(match c.form {
                                    KnnForm::Additive => c.gamma + lambda + xi,
                                    KnnForm::Exponential => (c.gamma * lambda).exp() + (c.rho * xi).exp(),
                                })
                            })
                            .collect(),
                    ),
                }
            }
        })
    }

    /// σ for every row of `x`.
    pub fn evaluate_outputs(&self, x: &Matrix, outputs: &BlackBoxOutputs) -> Result<Vec<Sigma>> {
        check_width(x.rows(), outputs.proba.rows())?;
        x.iter_rows()
            .zip(outputs.proba.iter_rows())
            .map(|(r, p)| self.evaluate(r, p))
            .collect()
    }

    pub fn evaluate_rows(&self, x: &Matrix, bb: &TreeEnsemble) -> Result<Vec<Sigma>> {
        self.evaluate_outputs(x, &BlackBoxOutputs::compute(bb, x)?)
    }

    /// Writes `file`; the KNN reference goes to `knn_reference.json` beside it.
    pub fn save(&self, dir: &Path, file: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let EstimatorState::Knn(knn) = &self.state {
            write_json(&dir.join(KNN_REFERENCE_FILE), knn.reference.as_ref())?;
        }
        write_json(&dir.join(file), &self.record())
    }

    pub fn load(dir: &Path, file: &str) -> Result<Self> {
        let record: EstimatorRecord = read_json(&dir.join(file))?;
        Self::from_record(record, dir)
    }

    pub(crate) fn record(&self) -> EstimatorRecord {
        let state = match &self.state {
            EstimatorState::Constant => StateRecord::Constant,
            EstimatorState::Confidence => StateRecord::Confidence,
            EstimatorState::Gaussians(g) => StateRecord::Gaussians(g.clone()),
            EstimatorState::Knn(knn) => StateRecord::Knn {
                k: knn.k,
                distance_median: knn.distance_median,
                label_medians: knn.label_medians.clone(),
                reference: KNN_REFERENCE_FILE.to_string(),
            },
        };
        EstimatorRecord { config: self.config, state }
    }

    pub(crate) fn from_record(record: EstimatorRecord, dir: &Path) -> Result<Self> {
        let state = match record.state {
            StateRecord::Constant => EstimatorState::Constant,
            StateRecord::Confidence => EstimatorState::Confidence,
            StateRecord::Gaussians(g) => EstimatorState::Gaussians(g),
            StateRecord::Knn {
                k,
                distance_median,
                label_medians,
                reference,
            } => EstimatorState::Knn(KnnState {
                k,
                distance_median,
                label_medians,
                reference: Arc::new(read_json(&dir.join(reference))?),
            }),
        };
        Ok(DifficultyEstimator {
            config: record.config,
            state,
        })
    }
}

pub const KNN_REFERENCE_FILE: &str = "knn_reference.json";

/// `1 - max P` for class distributions, `1 - |P - 0.5|` for a single
/// positive-class probability.
pub fn confidence_difficulty(proba: &[f64]) -> f64 {
    if proba.len() == 1 {
        1.0 - (proba[0] - 0.5).abs()
    } else {
        1.0 - proba.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct EstimatorRecord {
    config: DifficultyConfig,
    state: StateRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StateRecord {
    Constant,
    Confidence,
    Gaussians(ClassGaussians),
    Knn {
        k: usize,
        distance_median: f64,
        label_medians: Option<Vec<f64>>,
        reference: String,
    },
}
