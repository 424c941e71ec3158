//! Inductive conformal intervals around surrogate importance scores, one
//! calibration problem per explained feature.

pub mod difficulty;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use difficulty::{
    fit_class_gaussians, knn_distance, ClassGaussians, DifficultyConfig, DifficultyEstimator, DifficultyKind,
    KnnForm, KnnReference, KnnState, Sigma, DEFAULT_FLOOR,
};

use crate::blackbox::TreeEnsemble;
use crate::data::{read_json, write_json};
use crate::error::{check_width, Error, Result};
use crate::explain::{ExplanationMatrix, Timed};
use crate::matrix::Matrix;
use crate::surrogate::{BlackBoxOutputs, Surrogate};

/// Tolerance used when matching a requested significance level to a calibrated one.
const EPSILON_MATCH: f64 = 1e-12;

pub fn nonconformity(y_true: f64, y_pred: f64, sigma: f64) -> f64 {
    (y_true - y_pred).abs() / sigma
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("significance {epsilon} not in (0, 1)")))
    }
}

/// First 1-based position `j` of a sorted calibration multiset of size `n`
/// with `j / (n + 1) >= 1 - epsilon`, or `None` when no position qualifies.
fn threshold_position(n: usize, epsilon: f64) -> Option<usize> {
    let target = 1.0 - epsilon;
    let denom = (n + 1) as f64;
    let ok = |j: usize| j as f64 / denom >= target;
    let mut j = ((denom * target).ceil() as usize).max(1);
    while j > 1 && ok(j - 1) {
        j -= 1;
    }
    while j <= n && !ok(j) {
        j += 1;
    }
    (j <= n).then_some(j)
}

/// Smallest calibration size for which `epsilon` yields a finite threshold.
pub fn required_calibration_size(epsilon: f64) -> usize {
    let mut n = ((1.0 - epsilon) / epsilon).ceil().max(1.0) as usize;
    while n > 1 && threshold_position(n - 1, epsilon).is_some() {
        n -= 1;
    }
    while threshold_position(n, epsilon).is_none() {
        n += 1;
    }
    n
}

/// The calibrated non-conformity threshold at significance `epsilon`:
/// walking the ascending scores, the first one whose 1-based position `j`
/// satisfies `j / (n + 1) >= 1 - epsilon`. Tied scores occupy separate positions.
pub fn calibrate_threshold(scores: &[f64], epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite non-conformity score".into()));
    }
    let j = threshold_position(scores.len(), epsilon).ok_or(Error::CalibrationTooSmall {
        available: scores.len(),
        required: required_calibration_size(epsilon),
        epsilon,
    })?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[j - 1])
}

/// Thresholds of every explained feature at one significance level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// `threshold * sigma`; the interval width is exactly twice this.
    pub half_width: f64,
}

impl FeatureInterval {
    pub fn new(point: f64, threshold: f64, sigma: f64) -> Self {
        let half_width = threshold * sigma;
        FeatureInterval {
            point,
            lo: point - half_width,
            hi: point + half_width,
            half_width,
        }
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalExplanation {
    pub epsilon: f64,
    pub features: Vec<FeatureInterval>,
    pub sigma: Sigma,
}

/// Builds interval explanations from point predictions and per-row σ.
pub fn intervals(points: &Matrix, sigmas: &[Sigma], level: &Level) -> Result<Vec<IntervalExplanation>> {
    check_width(points.rows(), sigmas.len())?;
    check_width(level.thresholds.len(), points.cols())?;
    Ok(points
        .iter_rows()
        .zip(sigmas)
        .map(|(row, sigma)| IntervalExplanation {
            epsilon: level.epsilon,
            features: row
                .iter()
                .zip(&level.thresholds)
                .enumerate()
                .map(|(f, (&p, &a))| FeatureInterval::new(p, a, sigma.get(f)))
                .collect(),
            sigma: sigma.clone(),
        })
        .collect())
}

/// Per-feature thresholds of every level from calibration predictions.
pub fn calibrate_levels(
    predictions: &Matrix,
    truth: &Matrix,
    sigmas: &[Sigma],
    epsilons: &[f64],
) -> Result<Vec<Level>> {
    check_width(truth.rows(), predictions.rows())?;
    check_width(truth.cols(), predictions.cols())?;
    check_width(truth.rows(), sigmas.len())?;
    let scores: Vec<Vec<f64>> = (0..truth.cols())
        .map(|f| {
            (0..truth.rows())
                .map(|i| nonconformity(truth.get(i, f), predictions.get(i, f), sigmas[i].get(f)))
                .collect()
        })
        .collect();
    epsilons
        .iter()
        .map(|&epsilon| {
            Ok(Level {
                epsilon,
                thresholds: scores.iter().map(|s| calibrate_threshold(s, epsilon)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// A surrogate, a difficulty estimator and calibrated per-feature thresholds.
#[derive(Clone, Debug)]
pub struct ConformalExplainer {
    pub black_box: Arc<TreeEnsemble>,
    pub surrogate: Arc<Surrogate>,
    pub estimator: DifficultyEstimator,
    pub levels: Vec<Level>,
    pub n_calib: usize,
}

/// Scores the calibration rows and derives thresholds for every `epsilon`.
pub fn calibrate_explainer(
    surrogate: Arc<Surrogate>,
    estimator: DifficultyEstimator,
    calib_x: &Matrix,
    truth: &ExplanationMatrix,
    black_box: Arc<TreeEnsemble>,
    epsilons: &[f64],
) -> Result<ConformalExplainer> {
    check_width(calib_x.rows(), truth.n_rows())?;
    for &e in epsilons {
        check_epsilon(e)?;
    }
    let outputs = BlackBoxOutputs::compute(&black_box, calib_x)?;
    let predictions = surrogate.predict(calib_x, &black_box)?.value;
    let sigmas = estimator.evaluate_outputs(calib_x, &outputs)?;
    let levels = calibrate_levels(&predictions.rows, &truth.rows, &sigmas, epsilons)?;
    Ok(ConformalExplainer {
        black_box,
        surrogate,
        estimator,
        levels,
        n_calib: calib_x.rows(),
    })
}

impl ConformalExplainer {
    pub fn level(&self, epsilon: f64) -> Result<&Level> {
        self.levels
            .iter()
            .find(|l| (l.epsilon - epsilon).abs() <= EPSILON_MATCH)
            .ok_or(Error::NotCalibrated(epsilon))
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.epsilon).collect()
    }

    pub fn predict_interval(&self, x: &[f64], epsilon: f64) -> Result<IntervalExplanation> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict(&m, epsilon)?.value.remove(0))
    }

    /// Interval explanations for every row. The timing covers the black-box
    /// forward pass, surrogate inference and difficulty evaluation.
    pub fn predict(&self, x: &Matrix, epsilon: f64) -> Result<Timed<Vec<IntervalExplanation>>> {
        let level = self.level(epsilon)?;
        check_width(self.black_box.n_features, x.cols())?;
        let start = Instant::now();
        let outputs = BlackBoxOutputs::compute(&self.black_box, x)?;
        let xa = crate::surrogate::augment_with(x, &outputs, self.surrogate.augment_mode())?;
        let points = self.surrogate.predict_augmented(&xa)?;
        let sigmas = self.estimator.evaluate_outputs(x, &outputs)?;
        let value = intervals(&points, &sigmas, level)?;
        Ok(Timed {
            value,
            elapsed: start.elapsed().as_secs_f64(),
        })
    }

    /// Writes `<name>.json` into `dir`. The surrogate and black box are
    /// persisted separately.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let difficulty::EstimatorState::Knn(knn) = &self.estimator.state {
            write_json(&dir.join(difficulty::KNN_REFERENCE_FILE), knn.reference.as_ref())?;
        }
        write_json(
            &dir.join(format!("{name}.json")),
            &CalibrationRecord {
                surrogate: self.surrogate.family().to_string(),
                estimator: self.estimator.record(),
                levels: self.levels.clone(),
                n_calib: self.n_calib,
            },
        )
    }

    pub fn load(dir: &Path, name: &str, black_box: Arc<TreeEnsemble>, surrogate: Arc<Surrogate>) -> Result<Self> {
        let record: CalibrationRecord = read_json(&dir.join(format!("{name}.json")))?;
        if record.surrogate != surrogate.family() {
            return Err(Error::Config(format!(
                "calibration `{name}` belongs to the {} surrogate, not {}",
                record.surrogate,
                surrogate.family()
            )));
        }
        for l in &record.levels {
            check_width(surrogate.feature_names().len(), l.thresholds.len())?;
        }
        Ok(ConformalExplainer {
            black_box,
            surrogate,
            estimator: DifficultyEstimator::from_record(record.estimator, dir)?,
            levels: record.levels,
            n_calib: record.n_calib,
        })
    }

    /// The surrogate family named in a persisted calibration.
    pub fn surrogate_family(dir: &Path, name: &str) -> Result<String> {
        let record: CalibrationRecord = read_json(&dir.join(format!("{name}.json")))?;
        Ok(record.surrogate)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationRecord {
    surrogate: String,
    estimator: difficulty::EstimatorRecord,
    levels: Vec<Level>,
    n_calib: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Scans the distinct calibration values in ascending order and keeps
    /// the first `a` with `|{alpha_i <= a}| / (n + 1) >= 1 - epsilon`.
    fn enumerate_threshold(scores: &[f64], epsilon: f64) -> Option<f64> {
        let mut candidates = scores.to_vec();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        candidates.dedup();
        let n = scores.len() as f64;
        candidates.into_iter().find(|&a| {
            let at_most = scores.iter().filter(|&&s| s <= a).count() as f64;
            at_most / (n + 1.0) >= 1.0 - epsilon
        })
    }

    #[test]
    fn threshold_examples() {
        let s: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&s, 0.05).unwrap(), 19.0);
        assert_eq!(calibrate_threshold(&[5.0, 5.0, 5.0], 0.25).unwrap(), 5.0);
        assert!(matches!(
            calibrate_threshold(&[1.0; 5], 0.05),
            Err(Error::CalibrationTooSmall { available: 5, required: 19, .. })
        ));
        assert!(calibrate_threshold(&[1.0; 5], 0.0).is_err());
    }

    #[test]
    fn threshold_matches_enumeration_with_ties() {
        let mut rng = crate::seed::rng(42);
        let epsilons = [0.01, 0.05, 0.1, 0.2, 0.25, 0.3, 0.5, 0.7, 0.9];
        for _ in 0..1000 {
            let n = rng.random_range(1..60);
            let distinct = rng.random_range(1..8);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..distinct) as f64 * 0.5).collect();
            let e = epsilons[rng.random_range(0..epsilons.len())];
            assert_eq!(calibrate_threshold(&scores, e).ok(), enumerate_threshold(&scores, e));
        }
    }

    #[test]
    fn required_sizes() {
        assert_eq!(required_calibration_size(0.05), 19);
        assert_eq!(required_calibration_size(0.1), 9);
        assert_eq!(required_calibration_size(0.2), 4);
        assert_eq!(required_calibration_size(0.5), 1);
    }

    #[test]
    fn interval_arithmetic() {
        let i = FeatureInterval::new(0.5, 0.1, 1.0);
        assert!((i.lo - 0.4).abs() < 1e-15 && (i.hi - 0.6).abs() < 1e-15);
        let d = FeatureInterval::new(0.5, 0.0, 3.0);
        assert_eq!((d.lo, d.hi), (0.5, 0.5));
        assert_eq!(FeatureInterval::new(0.5, 0.37, 2.6).width(), 2.0 * FeatureInterval::new(0.5, 0.37, 1.3).width());
        assert_eq!(nonconformity(1.0, 0.0, 2.0), 0.5);
        assert_eq!(nonconformity(0.3, 0.0, 1.0), 0.3);
    }

    #[test]
    fn perfect_predictions_give_zero_thresholds() {
        let truth = Matrix::from_vec(30, 2, (0..60).map(|v| v as f64).collect()).unwrap();
        let levels = calibrate_levels(&truth, &truth, &vec![Sigma::Shared(1.0); 30], &[0.1]).unwrap();
        assert_eq!(levels[0].thresholds, vec![0.0, 0.0]);
    }

    #[test]
    fn residual_scale_carries_to_thresholds() {
        let mut rng = crate::seed::rng(1);
        let n = 199;
        let mut truth = Matrix::zeros(n, 2);
        for i in 0..n {
            let r: f64 = rng.random_range(-1.0..1.0);
            truth.set(i, 0, 10.0 * r);
            truth.set(i, 1, r);
        }
        let levels = calibrate_levels(&Matrix::zeros(n, 2), &truth, &vec![Sigma::Shared(1.0); n], &[0.1]).unwrap();
        let t = &levels[0].thresholds;
        assert!((t[0] - 10.0 * t[1]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn thresholds_shrink_as_epsilon_grows(
            residuals in prop::collection::vec((-5.0f64..5.0, 0.1f64..3.0), 40..120),
        ) {
            let n = residuals.len();
            let truth = Matrix::from_vec(n, 1, residuals.iter().map(|r| r.0).collect()).unwrap();
            let sigmas: Vec<Sigma> = residuals.iter().map(|r| Sigma::Shared(r.1)).collect();
            let eps = [0.05, 0.1, 0.2, 0.3];
            let levels = calibrate_levels(&Matrix::zeros(n, 1), &truth, &sigmas, &eps).unwrap();
            for w in levels.windows(2) {
                prop_assert!(w[0].thresholds[0] >= w[1].thresholds[0]);
            }
        }
    }
}
