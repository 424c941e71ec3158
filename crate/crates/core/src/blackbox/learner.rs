//! Second-order gradient boosting with exact greedy, depth-limited splits.

use serde::{Deserialize, Serialize};

use super::tree::{Tree, TreeNode};
use super::{sigmoid, softmax, Objective, TreeEnsemble};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Splits must improve the regularized objective by more than this.
const MIN_SPLIT_GAIN: f64 = 1e-12;
const MIN_HESSIAN: f64 = 1e-16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub max_depth: usize,
    /// L2 penalty on leaf values.
    pub l2_reg: f64,
    /// Minimum training rows in each child of a split.
    #[serde(default = "default_min_child_cover")]
    pub min_child_cover: usize,
}

fn default_min_child_cover() -> usize {
    1
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            learning_rate: 0.1,
            n_estimators: 600,
            max_depth: 3,
            l2_reg: 0.01,
            min_child_cover: 1,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.l2_reg.is_finite() && self.l2_reg >= 0.0) {
            return Err(Error::Config(format!("l2_reg {} must be >= 0", self.l2_reg)));
        }
        if self.min_child_cover == 0 {
            return Err(Error::Config("min_child_cover must be >= 1".into()));
        }
        Ok(())
    }
}

/// Black-box grid: learning rate x estimators x L2 x depth.
pub fn default_grid() -> Vec<GbtParams> {
    let mut grid = Vec::new();
    for learning_rate in [0.05, 0.1] {
        for n_estimators in [100, 300, 600] {
            for l2_reg in [0.01, 0.1] {
                for max_depth in [3, 5] {
                    grid.push(GbtParams {
                        learning_rate,
                        n_estimators,
                        max_depth,
                        l2_reg,
                        min_child_cover: 1,
                    });
                }
            }
        }
    }
    grid
}

/// Column-major copy of the training matrix with each column's row order.
struct Columns {
    values: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl Columns {
    fn new(x: &Matrix) -> Columns {
        let values: Vec<Vec<f64>> = (0..x.cols()).map(|j| x.column(j)).collect();
        let sorted = values
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Columns { values, sorted }
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Grower<'a> {
    cols: &'a Columns,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<TreeNode>,
    goes_left: Vec<bool>,
    leaves: Vec<(f64, Vec<u32>)>,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.l2_reg)
    }

    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.l2_reg;
        if denom > 0.0 {
            -g / denom
        } else {
            0.0
        }
    }

    fn best_split(&self, sorted: &[Vec<u32>], g: f64, h: f64) -> Option<Split> {
        let n = sorted[0].len();
        let min = self.params.min_child_cover;
        if n < 2 * min {
            return None;
        }
        let parent = self.score(g, h);
        let mut best: Option<Split> = None;
        for (feature, list) in sorted.iter().enumerate() {
            let col = &self.cols.values[feature];
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..n - 1 {
                let r = list[i] as usize;
                gl += self.grad[r];
                hl += self.hess[r];
                let nl = i + 1;
                if nl < min {
                    continue;
                }
                if n - nl < min {
                    break;
                }
                let v = col[r];
                let next = col[list[i + 1] as usize];
                if v == next {
                    continue;
                }
                let gain = self.score(gl, hl) + self.score(g - gl, h - hl) - parent;
                if gain > MIN_SPLIT_GAIN && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = v + (next - v) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some(Split {
                        feature,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> usize {
        let id = self.nodes.len();
        let rows = &sorted[0];
        let cover = rows.len();
        let (mut g, mut h) = (0.0, 0.0);
        for &r in rows {
            g += self.grad[r as usize];
            h += self.hess[r as usize];
        }
        self.nodes.push(TreeNode::Leaf {
            id,
            value: self.leaf_value(g, h),
            cover,
        });
        let split = if depth < self.params.max_depth {
            self.best_split(&sorted, g, h)
        } else {
            None
        };
        let Some(split) = split else {
            let value = self.leaf_value(g, h);
            self.leaves.push((value, sorted.into_iter().next().unwrap_or_default()));
            return id;
        };

        let col = &self.cols.values[split.feature];
        for &r in &sorted[0] {
            self.goes_left[r as usize] = col[r as usize] <= split.threshold;
        }
        let mut left = Vec::with_capacity(sorted.len());
        let mut right = Vec::with_capacity(sorted.len());
        for list in sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&r| self.goes_left[r as usize]);
            left.push(l);
            right.push(r);
        }
        let left_id = self.grow(left, depth + 1);
        let right_id = self.grow(right, depth + 1);
        self.nodes[id] = TreeNode::Internal {
            id,
            feature: split.feature,
            threshold: split.threshold,
            left: left_id,
            right: right_id,
            cover,
        };
        id
    }
}

fn grow_tree(cols: &Columns, grad: &[f64], hess: &[f64], params: &GbtParams) -> (Vec<TreeNode>, Vec<(f64, Vec<u32>)>) {
    let mut grower = Grower {
        cols,
        grad,
        hess,
        params,
        nodes: Vec::new(),
        goes_left: vec![false; grad.len()],
        leaves: Vec::new(),
    };
    grower.grow(cols.sorted.clone(), 0);
    (grower.nodes, grower.leaves)
}

enum Targets<'a> {
    Classes(&'a [usize]),
    Real(&'a [f64]),
}

fn boost(x: &Matrix, targets: Targets<'_>, objective: Objective, n_classes: usize, params: &GbtParams) -> Result<TreeEnsemble> {
    params.validate()?;
    let n = x.rows();
    let n_outputs = if objective == Objective::MulticlassSoftmax { n_classes } else { 1 };
    let base_score = match (&targets, objective) {
        (Targets::Real(y), _) => y.iter().sum::<f64>() / n as f64,
        (Targets::Classes(y), Objective::Logistic) => {
            let p = y.iter().filter(|&&c| c == 1).count() as f64 / n as f64;
            (p / (1.0 - p)).ln()
        }
        (Targets::Classes(_), _) => 0.0,
    };
    let mut ens = TreeEnsemble {
        objective,
        n_features: x.cols(),
        n_classes,
        base_score,
        learning_rate: params.learning_rate,
        trees: Vec::with_capacity(params.n_estimators * n_outputs),
    };
    if params.n_estimators == 0 || n == 0 || x.cols() == 0 {
        return Ok(ens);
    }
    let cols = Columns::new(x);
    let mut margins = vec![base_score; n * n_outputs];
    let mut grad = vec![vec![0.0; n]; n_outputs];
    let mut hess = vec![vec![0.0; n]; n_outputs];
    for _round in 0..params.n_estimators {
        match (&targets, objective) {
            (Targets::Real(y), _) => {
                for i in 0..n {
                    grad[0][i] = margins[i] - y[i];
                    hess[0][i] = 1.0;
                }
            }
            (Targets::Classes(y), Objective::Logistic) => {
                for i in 0..n {
                    let p = sigmoid(margins[i]);
                    grad[0][i] = p - (y[i] == 1) as u8 as f64;
                    hess[0][i] = (p * (1.0 - p)).max(MIN_HESSIAN);
                }
            }
            (Targets::Classes(y), _) => {
                for i in 0..n {
                    let p = softmax(&margins[i * n_outputs..(i + 1) * n_outputs]);
                    for k in 0..n_outputs {
                        grad[k][i] = p[k] - (y[i] == k) as u8 as f64;
                        hess[k][i] = (2.0 * p[k] * (1.0 - p[k])).max(MIN_HESSIAN);
                    }
                }
            }
        }
        for k in 0..n_outputs {
            let (nodes, leaves) = grow_tree(&cols, &grad[k], &hess[k], params);
            for (value, rows) in leaves {
                for r in rows {
                    margins[r as usize * n_outputs + k] += params.learning_rate * value;
                }
            }
            ens.trees.push(Tree { output: k, nodes });
        }
    }
    Ok(ens)
}

/// Fits a boosted classifier: logistic for two classes, softmax otherwise.
pub fn fit_gbt_classifier(train: &Dataset, params: &GbtParams) -> Result<TreeEnsemble> {
    let present = train.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Precondition(format!(
            "training data has {present} distinct classes; at least 2 are required"
        )));
    }
    let objective = if train.n_classes == 2 {
        Objective::Logistic
    } else {
        Objective::MulticlassSoftmax
    };
    boost(&train.features, Targets::Classes(&train.labels), objective, train.n_classes, params)
}

/// Fits a squared-error boosted regressor.
pub fn fit_gbt_regressor(x: &Matrix, y: &[f64], params: &GbtParams) -> Result<TreeEnsemble> {
    if y.is_empty() || y.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            found: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite regression target".into()));
    }
    boost(x, Targets::Real(y), Objective::SquaredError, 1, params)
}

/// Mean negative log-likelihood of `ds` under a classifier.
pub fn log_loss(ens: &TreeEnsemble, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in ds.features.iter_rows().zip(&ds.labels) {
        let m = ens.predict_margin(x)?;
        total += match ens.objective {
            Objective::Logistic => {
                // log(1 + e^m) - y m
                let softplus = if m[0] > 0.0 {
                    m[0] + (-m[0]).exp().ln_1p()
                } else {
                    m[0].exp().ln_1p()
                };
                softplus - if y == 1 { m[0] } else { 0.0 }
            }
            Objective::MulticlassSoftmax => {
                let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - m[y]
            }
            Objective::SquaredError => {
                return Err(Error::Precondition("log-loss of a regression ensemble".into()))
            }
        };
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Result of a black-box hyperparameter search.
#[derive(Clone, Debug)]
pub struct GridSearchOutcome {
    pub best: GbtParams,
    pub best_index: usize,
    pub calib_losses: Vec<f64>,
    /// The winning model, fitted on the training split.
    pub model: TreeEnsemble,
}

/// Fits every grid point on `train` and keeps the one with the lowest
/// calibration log-loss; the earliest point wins ties.
pub fn grid_search(train: &Dataset, calib: &Dataset, grid: &[GbtParams]) -> Result<GridSearchOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut best: Option<(usize, f64, TreeEnsemble)> = None;
    let mut losses = Vec::with_capacity(grid.len());
    for (i, params) in grid.iter().enumerate() {
        let model = fit_gbt_classifier(train, params)?;
        let loss = log_loss(&model, calib)?;
        losses.push(loss);
        if best.as_ref().is_none_or(|(_, l, _)| loss < *l) {
            best = Some((i, loss, model));
        }
    }
    let (best_index, _, model) = best.expect("grid is non-empty");
    Ok(GridSearchOutcome {
        best: grid[best_index],
        best_index,
        calib_losses: losses,
        model,
    })
}
