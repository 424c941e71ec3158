//! Exact path-dependent Shapley attributions of tree-ensemble margins.
//!
//! [`tree_shap`] runs the polynomial path recursion; [`brute_force_shapley`]
//! enumerates every feature subset of every tree and exists to check it.
//! Both explain raw margins (log-odds for classifiers), one vector per output.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blackbox::{argmax, Tree, TreeEnsemble, TreeNode};
use crate::data::{read_json, write_json};
use crate::error::{check_width, Error, Result};
use crate::matrix::Matrix;

/// Largest per-tree feature count the subset enumeration accepts.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub phi: Vec<f64>,
    pub base_value: f64,
}

impl ImportanceVector {
    /// `base_value + sum(phi)`, which equals the explained margin.
    pub fn total(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

/// Cover-weighted mean leaf value of one tree.
fn tree_mean(tree: &Tree) -> f64 {
    let root = tree.root().cover() as f64;
    tree.nodes
        .iter()
        .filter_map(|n| match n {
            TreeNode::Leaf { value, cover, .. } => Some(value * *cover as f64 / root),
            TreeNode::Internal { .. } => None,
        })
        .sum()
}

/// Expected margin per output under the training distribution encoded in the covers.
pub fn expected_value(ens: &TreeEnsemble) -> Vec<f64> {
    let mut sums = vec![0.0; ens.n_outputs()];
    for t in &ens.trees {
        sums[t.output] += tree_mean(t);
    }
    sums.into_iter()
        .map(|s| ens.base_score + ens.learning_rate * s)
        .collect()
}

/// Tree output when only the features in `known` are observed.
///
/// Splits on a known feature follow `x`; splits on an unknown feature average
/// both children by cover.
pub fn conditional_expectation(tree: &Tree, x: &[f64], known: &dyn Fn(usize) -> bool) -> f64 {
    fn walk(tree: &Tree, at: usize, x: &[f64], known: &dyn Fn(usize) -> bool) -> f64 {
        match &tree.nodes[at] {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
                cover,
                ..
            } => {
                if known(*feature) {
                    let next = if x[*feature] <= *threshold { *left } else { *right };
                    walk(tree, next, x, known)
                } else {
                    let wl = tree.nodes[*left].cover() as f64;
                    let wr = tree.nodes[*right].cover() as f64;
                    (wl * walk(tree, *left, x, known) + wr * walk(tree, *right, x, known)) / *cover as f64
                }
            }
        }
    }
    walk(tree, 0, x, known)
}

/// Exact Shapley values by subset enumeration over each tree's split features.
pub fn brute_force_shapley(ens: &TreeEnsemble, x: &[f64]) -> Result<Vec<ImportanceVector>> {
    check_width(ens.n_features, x.len())?;
    let base = expected_value(ens);
    let mut phi = vec![vec![0.0; ens.n_features]; ens.n_outputs()];
    for (ti, tree) in ens.trees.iter().enumerate() {
        let features = tree.split_features();
        let m = features.len();
        if m > BRUTE_FORCE_LIMIT {
            return Err(Error::TooManyFeatures {
                tree: ti,
                features: m,
                limit: BRUTE_FORCE_LIMIT,
            });
        }
        if m == 0 {
            continue;
        }
        // v(S) for every subset mask of this tree's features.
        let values: Vec<f64> = (0..1usize << m)
            .map(|mask| {
                let known = |f: usize| match features.binary_search(&f) {
                    Ok(pos) => mask & (1 << pos) != 0,
                    Err(_) => false,
                };
                conditional_expectation(tree, x, &known)
            })
            .collect();
        // |S|! (m - |S| - 1)! / m!
        let mut weight = vec![0.0; m];
        for (s, w) in weight.iter_mut().enumerate() {
            *w = factorial(s) * factorial(m - s - 1) / factorial(m);
        }
        for (pos, &f) in features.iter().enumerate() {
            let bit = 1usize << pos;
            let mut total = 0.0;
            for mask in 0..1usize << m {
                if mask & bit != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                total += weight[s] * (values[mask | bit] - values[mask]);
            }
            phi[tree.output][f] += ens.learning_rate * total;
        }
    }
    Ok(phi
        .into_iter()
        .zip(base)
        .map(|(phi, base_value)| ImportanceVector { phi, base_value })
        .collect())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[derive(Clone, Copy, Debug, Default)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

/// Root sentinel; never credited with attribution.
const NO_FEATURE: usize = usize::MAX;

fn extend_path(path: &mut [PathElement], depth: usize, zero: f64, one: f64, feature: usize) {
    path[depth] = PathElement {
        feature,
        zero_fraction: zero,
        one_fraction: one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * d1 / ((i + 1) as f64 * one);
            next_one = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    if one != 0.0 {
        for i in (0..depth).rev() {
            let tmp = next_one / ((i + 1) as f64 * one);
            total += tmp;
            next_one = path[i].weight - tmp * zero * (depth - i) as f64;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight / (zero * (depth - i) as f64);
        }
    }
    total * (depth + 1) as f64
}

struct ShapWalk<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    phi: &'a mut [f64],
    scale: f64,
}

impl ShapWalk<'_> {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &mut self,
        at: usize,
        path: &mut [PathElement],
        mut depth: usize,
        zero: f64,
        one: f64,
        feature: usize,
    ) {
        extend_path(path, depth, zero, one, feature);
        match &self.tree.nodes[at] {
            TreeNode::Leaf { value, .. } => {
                for i in 1..=depth {
                    let w = unwound_path_sum(path, depth, i);
                    let el = path[i];
                    self.phi[el.feature] += w * (el.one_fraction - el.zero_fraction) * value * self.scale;
                }
            }
            TreeNode::Internal {
                feature: split,
                threshold,
                left,
                right,
                cover,
                ..
            } => {
                let (hot, cold) = if self.x[*split] <= *threshold {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                let cover = *cover as f64;
                let hot_zero = self.tree.nodes[hot].cover() as f64 / cover;
                let cold_zero = self.tree.nodes[cold].cover() as f64 / cover;
                let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
                if let Some(k) = (1..=depth).find(|&k| path[k].feature == *split) {
                    incoming_zero = path[k].zero_fraction;
                    incoming_one = path[k].one_fraction;
                    unwind_path(path, depth, k);
                    depth -= 1;
                }
                let (current, next) = path.split_at_mut(depth + 1);
                next[..=depth].copy_from_slice(current);
                self.recurse(hot, next, depth + 1, hot_zero * incoming_zero, incoming_one, *split);
                next[..=depth].copy_from_slice(current);
                self.recurse(cold, next, depth + 1, cold_zero * incoming_zero, 0.0, *split);
            }
        }
    }
}

/// Adds one tree's attribution (scaled by `scale`) into `phi`.
fn tree_shap_into(tree: &Tree, x: &[f64], scale: f64, phi: &mut [f64], buffer: &mut Vec<PathElement>) {
    let depth = tree.depth();
    let needed = (depth + 2) * (depth + 3) / 2;
    if buffer.len() < needed {
        buffer.resize(needed, PathElement::default());
    }
    ShapWalk { tree, x, phi, scale }.recurse(0, buffer, 0, 1.0, 1.0, NO_FEATURE);
}

/// Exact path-dependent Shapley values, one vector per ensemble output.
pub fn tree_shap(ens: &TreeEnsemble, x: &[f64]) -> Result<Vec<ImportanceVector>> {
    check_width(ens.n_features, x.len())?;
    let mut phi = vec![vec![0.0; ens.n_features]; ens.n_outputs()];
    let mut buffer = Vec::new();
    for tree in &ens.trees {
        tree_shap_into(tree, x, ens.learning_rate, &mut phi[tree.output], &mut buffer);
    }
    Ok(phi
        .into_iter()
        .zip(expected_value(ens))
        .map(|(phi, base_value)| ImportanceVector { phi, base_value })
        .collect())
}

/// Attribution rows with the output (class margin) each row explains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationMatrix {
    pub feature_names: Vec<String>,
    pub base_values: Vec<f64>,
    /// Explained output per row: the predicted class for multiclass models, 0 otherwise.
    pub outputs: Vec<usize>,
    pub rows: Matrix,
}

impl ExplanationMatrix {
    pub fn new(feature_names: Vec<String>, base_values: Vec<f64>, outputs: Vec<usize>, rows: Matrix) -> Result<Self> {
        check_width(feature_names.len(), rows.cols())?;
        check_width(rows.rows(), base_values.len())?;
        check_width(rows.rows(), outputs.len())?;
        if rows.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite importance score".into()));
        }
        Ok(ExplanationMatrix {
            feature_names,
            base_values,
            outputs,
            rows,
        })
    }

    pub fn empty(feature_names: Vec<String>) -> Self {
        let cols = feature_names.len();
        ExplanationMatrix {
            feature_names,
            base_values: Vec::new(),
            outputs: Vec::new(),
            rows: Matrix::zeros(0, cols),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.rows()
    }

    pub fn n_features(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn column(&self, f: usize) -> Vec<f64> {
        self.rows.column(f)
    }

    pub fn select_rows(&self, idx: &[usize]) -> ExplanationMatrix {
        ExplanationMatrix {
            feature_names: self.feature_names.clone(),
            base_values: idx.iter().map(|&i| self.base_values[i]).collect(),
            outputs: idx.iter().map(|&i| self.outputs[i]).collect(),
            rows: self.rows.select_rows(idx),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let m: ExplanationMatrix = read_json(path.as_ref())?;
        ExplanationMatrix::new(m.feature_names, m.base_values, m.outputs, m.rows)
    }
}

/// Output whose attribution is reported for `x`: the argmax class for
/// multiclass models, the single margin otherwise.
pub fn explained_output(ens: &TreeEnsemble, margins: &[f64]) -> usize {
    if ens.n_outputs() > 1 {
        argmax(margins)
    } else {
        0
    }
}

/// A value with the wall-clock seconds spent computing it.
#[derive(Clone, Debug)]
pub struct Timed<T> {
    pub value: T,
    pub elapsed: f64,
}

/// Runs [`tree_shap`] on every row, keeping the explained output's vector.
pub fn explain_batch(ens: &TreeEnsemble, x: &Matrix, feature_names: &[String]) -> Result<Timed<ExplanationMatrix>> {
    check_width(ens.n_features, x.cols())?;
    check_width(ens.n_features, feature_names.len())?;
    let start = Instant::now();
    let mut rows = Matrix::zeros(0, ens.n_features);
    let mut base_values = Vec::with_capacity(x.rows());
    let mut outputs = Vec::with_capacity(x.rows());
    let base = expected_value(ens);
    let mut buffer = Vec::new();
    let mut phi = vec![0.0; ens.n_features];
    for r in x.iter_rows() {
        let output = explained_output(ens, &ens.margins_unchecked(r));
        phi.iter_mut().for_each(|v| *v = 0.0);
        for tree in ens.trees.iter().filter(|t| t.output == output) {
            tree_shap_into(tree, r, ens.learning_rate, &mut phi, &mut buffer);
        }
        rows.push_row(&phi)?;
        base_values.push(base[output]);
        outputs.push(output);
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(Timed {
        value: ExplanationMatrix::new(feature_names.to_vec(), base_values, outputs, rows)?,
        elapsed,
    })
}
