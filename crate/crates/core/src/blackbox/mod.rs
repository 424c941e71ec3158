//! Gradient-boosted regression trees: the black-box classifier and the
//! per-feature regressors share this ensemble type and learner.

mod learner;
mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use learner::{
    default_grid, fit_gbt_classifier, fit_gbt_regressor, grid_search, log_loss, GbtParams,
};
pub use tree::{Tree, TreeNode};

use crate::data::{read_json, write_json};
use crate::error::{check_width, Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Logistic,
    MulticlassSoftmax,
    SquaredError,
}

/// Additive tree ensemble: `margin_k(x) = base_score + learning_rate * sum of
/// trees with output k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeEnsemble {
    pub objective: Objective,
    pub n_features: usize,
    /// 1 for regression, otherwise the class count.
    pub n_classes: usize,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(margins: &[f64]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = margins.iter().map(|m| (m - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl TreeEnsemble {
    /// An ensemble without trees.
    pub fn constant(objective: Objective, n_features: usize, n_classes: usize, base_score: f64) -> Self {
        TreeEnsemble {
            objective,
            n_features,
            n_classes,
            base_score,
            learning_rate: 1.0,
            trees: Vec::new(),
        }
    }

    /// Number of margins: C for multiclass, otherwise 1.
    pub fn n_outputs(&self) -> usize {
        match self.objective {
            Objective::MulticlassSoftmax => self.n_classes,
            Objective::Logistic | Objective::SquaredError => 1,
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.objective != Objective::SquaredError
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        check_width(self.n_features, x.len())
    }

    /// Raw margins, one per output.
    pub fn predict_margin(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.margins_unchecked(x))
    }

    pub(crate) fn margins_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_outputs()];
        for t in &self.trees {
            sums[t.output] += t.predict(x);
        }
        sums.into_iter()
            .map(|s| self.base_score + self.learning_rate * s)
            .collect()
    }

    /// Margins of every row (rows x outputs). Walks tree by tree so each
    /// tree stays in cache across rows; per-output sums accumulate in the
    /// same order as the per-row path, so results are identical.
    pub(crate) fn margins_batch(&self, x: &Matrix) -> Matrix {
        let k = self.n_outputs();
        let mut sums = Matrix::zeros(x.rows(), k);
        for t in &self.trees {
            for (i, r) in x.iter_rows().enumerate() {
                sums.row_mut(i)[t.output] += t.predict(r);
            }
        }
        for i in 0..x.rows() {
            for v in sums.row_mut(i) {
                *v = self.base_score + self.learning_rate * *v;
            }
        }
        sums
    }

    /// Single-margin convenience for regression and binary models.
    pub fn predict_scalar(&self, x: &[f64]) -> Result<f64> {
        if self.n_outputs() != 1 {
            return Err(Error::Precondition("predict_scalar on a multiclass ensemble".into()));
        }
        Ok(self.predict_margin(x)?[0])
    }

    /// Binary: `[P(class 1)]`. Multiclass: the softmax vector.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.predict_margin(x)?;
        self.proba_from_margins(&m)
    }

    pub fn proba_from_margins(&self, m: &[f64]) -> Result<Vec<f64>> {
        match self.objective {
            Objective::Logistic => Ok(vec![sigmoid(m[0])]),
            Objective::MulticlassSoftmax => Ok(softmax(m)),
            Objective::SquaredError => Err(Error::Precondition(
                "probabilities requested from a regression ensemble".into(),
            )),
        }
    }

    /// Full class distribution, length C, for any classifier.
    pub fn class_distribution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.predict_proba(x)?;
        Ok(if p.len() == 1 { vec![1.0 - p[0], p[0]] } else { p })
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.class_distribution(x)?))
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.predict_scalar(r)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outputs() == 0 {
            return Err(Error::InvalidData("ensemble has no outputs".into()));
        }
        if self.is_classifier() && self.n_classes < 2 {
            return Err(Error::InvalidData("classifier with fewer than 2 classes".into()));
        }
        if self.objective == Objective::Logistic && self.n_classes != 2 {
            return Err(Error::InvalidData("logistic objective needs exactly 2 classes".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate()
                .map_err(|e| Error::InvalidData(format!("tree {i}: {e}")))?;
            if t.output >= self.n_outputs() {
                return Err(Error::InvalidData(format!("tree {i} targets output {}", t.output)));
            }
            if let Some(f) = t.max_feature() {
                if f >= self.n_features {
                    return Err(Error::InvalidData(format!("tree {i} splits on feature {f}")));
                }
            }
        }
        Ok(())
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let ens: TreeEnsemble = read_json(path.as_ref())?;
        ens.validate()?;
        Ok(ens)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_ensemble_returns_base_score() {
        let e = TreeEnsemble::constant(Objective::Logistic, 3, 2, 0.25);
        assert_eq!(e.predict_margin(&[1.0, 2.0, 3.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn batch_margins_match_per_row_bitwise() {
        let ds = crate::data::make_synthetic(200, 4, 3, 5).unwrap();
        let params = GbtParams {
            n_estimators: 30,
            ..GbtParams::default()
        };
        let e = fit_gbt_classifier(&ds, &params).unwrap();
        let batch = e.margins_batch(&ds.features);
        for (i, r) in ds.features.iter_rows().enumerate() {
            assert_eq!(batch.row(i), e.margins_unchecked(r).as_slice());
        }
    }

    #[test]
    fn single_stump_margin() {
        let mut e = TreeEnsemble::constant(Objective::Logistic, 1, 2, 0.0);
        e.trees.push(Tree::stump(0, 0.5, (-1.0, 5), (1.0, 5)));
        assert_eq!(e.predict_margin(&[0.7]).unwrap(), vec![1.0]);
        assert!(matches!(
            e.predict_margin(&[0.7, 1.0]),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn multiclass_probabilities_normalize() {
        let e = TreeEnsemble::constant(Objective::MulticlassSoftmax, 2, 3, 0.0);
        let p = e.predict_proba(&[0.0, 0.0]).unwrap();
        assert_eq!(p.len(), 3);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1 / (1 + e^-2)
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!((sigmoid(-2.0) + sigmoid(2.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn regression_has_no_probabilities() {
        let e = TreeEnsemble::constant(Objective::SquaredError, 1, 1, 0.0);
        assert!(e.predict_proba(&[0.0]).is_err());
    }
}
