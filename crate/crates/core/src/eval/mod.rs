//! Coverage, normalized interval widths, top-k selection, timing and rank
//! statistics.

pub mod plot;
pub mod stats;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use stats::{average_ranks, friedman, nemenyi_cd, rank_row, rank_test, FriedmanResult, RankTable, RankTest};

use crate::blackbox::TreeEnsemble;
use crate::conformal::difficulty::median;
use crate::conformal::{ConformalExplainer, DifficultyKind, IntervalExplanation};
use crate::error::{check_width, Error, Result};
use crate::explain::{explain_batch, ExplanationMatrix};
use crate::matrix::Matrix;

fn check_aligned(intervals: &[IntervalExplanation], truth: &ExplanationMatrix) -> Result<()> {
    check_width(truth.n_rows(), intervals.len())?;
    for iv in intervals {
        check_width(truth.n_features(), iv.features.len())?;
    }
    Ok(())
}

/// Fraction of (instance, feature) cells whose true score lies in its interval.
pub fn empirical_coverage(intervals: &[IntervalExplanation], truth: &ExplanationMatrix) -> Result<f64> {
    check_aligned(intervals, truth)?;
    let cells = intervals.len() * truth.n_features();
    if cells == 0 {
        return Ok(1.0);
    }
    let covered: usize = intervals
        .iter()
        .enumerate()
        .map(|(i, iv)| iv.features.iter().zip(truth.row(i)).filter(|(fi, &t)| fi.contains(t)).count())
        .sum();
    Ok(covered as f64 / cells as f64)
}

/// Coverage of each feature over the instances.
pub fn per_feature_coverage(intervals: &[IntervalExplanation], truth: &ExplanationMatrix) -> Result<Vec<f64>> {
    check_aligned(intervals, truth)?;
    let n = intervals.len().max(1) as f64;
    Ok((0..truth.n_features())
        .map(|f| intervals.iter().enumerate().filter(|(i, iv)| iv.features[f].contains(truth.rows.get(*i, f))).count() as f64 / n)
        .collect())
}

/// Mean interval width per feature divided by that feature's true range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedWidths {
    /// `None` where the true range is zero.
    pub per_feature: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

impl NormalizedWidths {
    /// Mean over `features` that have a nonzero range; `None` if none do.
    pub fn mean_over(&self, features: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = features.iter().filter_map(|&f| self.per_feature[f]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean(&self) -> Option<f64> {
        self.mean_over(&(0..self.per_feature.len()).collect::<Vec<_>>())
    }
}

pub fn normalized_widths(intervals: &[IntervalExplanation], truth: &ExplanationMatrix) -> Result<NormalizedWidths> {
    check_aligned(intervals, truth)?;
    let mut per_feature = Vec::with_capacity(truth.n_features());
    let mut excluded = Vec::new();
    for f in 0..truth.n_features() {
        let col = truth.column(f);
        let range = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) - col.iter().copied().fold(f64::INFINITY, f64::min);
        if range.is_nan() || range <= 0.0 || intervals.is_empty() {
            per_feature.push(None);
            excluded.push(f);
            continue;
        }
        let mean = intervals.iter().map(|iv| iv.features[f].width() / range).sum::<f64>() / intervals.len() as f64;
        per_feature.push(Some(mean));
    }
    Ok(NormalizedWidths { per_feature, excluded })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKMode {
    /// Mean absolute importance.
    #[default]
    Absolute,
    /// Mean signed importance.
    Signed,
}

/// Indices of the `k` features with the largest mean importance, ties to the lower index.
pub fn top_k_features(truth: &ExplanationMatrix, k: usize, mode: TopKMode) -> Result<Vec<usize>> {
    let m = truth.n_features();
    if k > m {
        return Err(Error::KTooLarge { k, available: m });
    }
    let n = truth.n_rows().max(1) as f64;
    let score: Vec<f64> = (0..m)
        .map(|f| {
            truth.column(f).iter().map(|v| if mode == TopKMode::Absolute { v.abs() } else { *v }).sum::<f64>() / n
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Mean normalized widths at one significance level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub all: Option<f64>,
    /// Keyed by k.
    pub top: Vec<TopWidth>,
    pub per_feature: Vec<Option<f64>>,
    pub excluded_features: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopWidth {
    pub k: usize,
    pub features: Vec<usize>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRunResult {
    pub method: String,
    /// Absent for the exact explainer.
    pub surrogate: Option<String>,
    pub estimator: Option<DifficultyKind>,
    pub epsilon: Option<f64>,
    pub coverage: Option<f64>,
    pub per_feature_coverage: Option<Vec<f64>>,
    pub widths: Option<WidthSummary>,
    pub elapsed_seconds: f64,
}

pub const EXACT_METHOD: &str = "treeshap";

pub fn method_id(surrogate: &str, estimator: DifficultyKind) -> String {
    format!("{surrogate}+{estimator}")
}

/// Median wall time of `reps` runs of `f`; returns the first run's value.
pub fn time_median<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64, Vec<f64>)> {
    let mut first = None;
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let v = f()?;
        times.push(start.elapsed().as_secs_f64());
        first.get_or_insert(v);
    }
    Ok((first.expect("at least one repetition"), median(&times), times))
}

pub struct BenchInputs<'a> {
    pub black_box: &'a TreeEnsemble,
    pub test_x: &'a Matrix,
    pub truth: &'a ExplanationMatrix,
    pub epsilons: &'a [f64],
    pub top_k: &'a [usize],
    pub top_k_mode: TopKMode,
    pub repetitions: usize,
}

/// Interval metrics of one explainer at one significance level.
pub fn interval_metrics(
    intervals: &[IntervalExplanation],
    truth: &ExplanationMatrix,
    top_k: &[usize],
    mode: TopKMode,
) -> Result<(f64, Vec<f64>, WidthSummary)> {
    let coverage = empirical_coverage(intervals, truth)?;
    let per_feature = per_feature_coverage(intervals, truth)?;
    let w = normalized_widths(intervals, truth)?;
    let top = top_k
        .iter()
        .map(|&k| {
            let features = top_k_features(truth, k.min(truth.n_features()), mode)?;
            Ok(TopWidth {
                k,
                mean: w.mean_over(&features),
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        coverage,
        per_feature,
        WidthSummary {
            all: w.mean(),
            top,
            per_feature: w.per_feature,
            excluded_features: w.excluded,
        },
    ))
}

/// Times the exact explainer and every conformal explainer over the test
/// rows and scores their intervals. Runs sequentially.
pub fn benchmark_methods(inputs: &BenchInputs<'_>, explainers: &[&ConformalExplainer]) -> Result<Vec<MethodRunResult>> {
    let mut results = Vec::new();
    let names = inputs.truth.feature_names.clone();
    let (_, exact_time, _) = time_median(inputs.repetitions, || Ok(explain_batch(inputs.black_box, inputs.test_x, &names)?.value))?;
    results.push(MethodRunResult {
        method: EXACT_METHOD.into(),
        surrogate: None,
        estimator: None,
        epsilon: None,
        coverage: None,
        per_feature_coverage: None,
        widths: None,
        elapsed_seconds: exact_time,
    });
    for ce in explainers {
        let family = ce.surrogate.family();
        let kind = ce.estimator.kind();
        let first = *inputs.epsilons.first().ok_or_else(|| Error::Config("no significance levels".into()))?;
        let (_, elapsed, _) = time_median(inputs.repetitions, || Ok(ce.predict(inputs.test_x, first)?.value))?;
        for &eps in inputs.epsilons {
            let ivs = ce.predict(inputs.test_x, eps)?.value;
            let (coverage, per_feature, widths) = interval_metrics(&ivs, inputs.truth, inputs.top_k, inputs.top_k_mode)?;
            results.push(MethodRunResult {
                method: method_id(family, kind),
                surrogate: Some(family.into()),
                estimator: Some(kind),
                epsilon: Some(eps),
                coverage: Some(coverage),
                per_feature_coverage: Some(per_feature),
                widths: Some(widths),
                elapsed_seconds: elapsed,
            });
        }
    }
    Ok(results)
}
