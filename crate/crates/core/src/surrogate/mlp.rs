//! Multi-target perceptron trained by mini-batch SGD with momentum and early
//! stopping on a held-out validation fraction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment_with, AugmentMode, BlackBoxOutputs};
use crate::blackbox::TreeEnsemble;
use crate::data::{read_json, write_json};
use crate::error::{check_width, Error, Result};
use crate::explain::ExplanationMatrix;
use crate::matrix::Matrix;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// Standardize inputs with statistics of the fitting rows.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_sizes: vec![128, 128],
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.1,
            standardize: true,
            seed: 0,
        }
    }
}

impl MlpConfig {
    /// Two hidden layers of 1024 rectifier units.
    pub fn wide() -> Self {
        MlpConfig {
            hidden_sizes: vec![1024, 1024],
            ..MlpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden_sizes must be non-empty and positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 0.5)", self.val_fraction)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Affine map `out = W in + b` with `W` stored row-major (outputs x inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Dense layers with rectifiers between them and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output.
    pub fn random(sizes: &[usize], seed_value: u64) -> Network {
        let mut rng = seed::rng(seed_value);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Network { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (j, zj) in z.iter_mut().enumerate() {
                let w = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                *zj += dot(w, &a);
            }
            if l != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    /// Mean squared error over all rows and outputs.
    pub fn loss(&self, x: &Matrix, y: &Matrix) -> f64 {
        let mut total = 0.0;
        for (xr, yr) in x.iter_rows().zip(y.iter_rows()) {
            total += self.forward(xr).iter().zip(yr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / (x.rows() * y.cols()).max(1) as f64
    }

    /// Loss and its gradient (same layout as [`Network::parameters`]) over `rows`.
    pub fn loss_and_gradient(&self, x: &Matrix, y: &Matrix, rows: &[usize]) -> (f64, Vec<f64>) {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        let scale = 1.0 / (rows.len() * self.output_width()) as f64;
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        // activations[l] is the input to layer l
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        for &r in rows {
            activations.clear();
            activations.push(x.row(r).to_vec());
            for (l, layer) in self.layers.iter().enumerate() {
                let a = &activations[l];
                let mut z = layer.bias.clone();
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += dot(&layer.weights[j * layer.inputs..(j + 1) * layer.inputs], a);
                }
                if l != last {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                activations.push(z);
            }
            let out = &activations[self.layers.len()];
            let mut delta: Vec<f64> = out
                .iter()
                .zip(y.row(r))
                .map(|(p, t)| {
                    loss += (p - t).powi(2);
                    2.0 * (p - t) * scale
                })
                .collect();
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let a = &activations[l];
                let (gw, gb) = &mut grads[l];
                for (j, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    for (g, &ai) in gw[j * layer.inputs..(j + 1) * layer.inputs].iter_mut().zip(a) {
                        *g += d * ai;
                    }
                }
                if l == 0 {
                    break;
                }
                let mut prev = vec![0.0; layer.inputs];
                for (j, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &w) in prev.iter_mut().zip(&layer.weights[j * layer.inputs..(j + 1) * layer.inputs]) {
                        *p += d * w;
                    }
                }
                // `a` holds rectified values; the rectifier passes gradient where it is positive.
                for (p, &ai) in prev.iter_mut().zip(a) {
                    if ai <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        let mut flat = Vec::with_capacity(self.parameter_count());
        for (gw, gb) in grads {
            flat.extend(gw);
            flat.extend(gb);
        }
        (loss * scale, flat)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-column affine input normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Standardizer {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = (0..x.cols()).map(|j| x.column(j).iter().sum::<f64>() / n).collect();
        let scale = (0..x.cols())
            .map(|j| {
                let var = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub network: Network,
    pub scaler: Option<Standardizer>,
    pub trace: Vec<EpochLoss>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Trains on `x -> y`, minimizing mean squared error over all outputs.
pub fn fit_mlp(x: &Matrix, y: &Matrix, cfg: &MlpConfig) -> Result<MlpModel> {
    cfg.validate()?;
    check_width(x.rows(), y.rows())?;
    if x.rows() < 2 || y.cols() == 0 {
        return Err(Error::Precondition("the perceptron needs at least 2 rows and 1 output".into()));
    }
    let scaler = cfg.standardize.then(|| Standardizer::fit(x));
    let xs = match &scaler {
        Some(s) => s.transform(x),
        None => x.clone(),
    };

    let mut rng = seed::rng(seed::substream(cfg.seed, "mlp/shuffle"));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(&mut rng);
    let n_val = ((x.rows() as f64 * cfg.val_fraction).round() as usize).clamp(1, x.rows() - 1);
    let val_rows: Vec<usize> = order[..n_val].to_vec();
    let mut train_rows: Vec<usize> = order[n_val..].to_vec();
    let val_x = xs.select_rows(&val_rows);
    let val_y = y.select_rows(&val_rows);

    let mut sizes = vec![x.cols()];
    sizes.extend(&cfg.hidden_sizes);
    sizes.push(y.cols());
    let mut net = Network::random(&sizes, seed::substream(cfg.seed, "mlp/init"));
    let mut params = net.parameters();
    let mut velocity = vec![0.0; params.len()];

    let mut best = (f64::INFINITY, net.clone(), 0);
    let mut trace = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        train_rows.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in train_rows.chunks(cfg.batch_size) {
            let (loss, grad) = net.loss_and_gradient(&xs, y, batch);
            train_loss += loss * batch.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
            net.set_parameters(&params);
        }
        train_loss /= train_rows.len() as f64;
        let val = net.loss(&val_x, &val_y);
        if !(train_loss.is_finite() && val.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(EpochLoss { train: train_loss, val });
        if val < best.0 {
            best = (val, net.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    Ok(MlpModel {
        config: cfg.clone(),
        network: best.1,
        scaler,
        trace,
        best_epoch: best.2,
    })
}

impl MlpModel {
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        check_width(self.network.input_width(), x.cols())?;
        let mut out = Matrix::zeros(0, self.network.output_width());
        for r in x.iter_rows() {
            let pred = match &self.scaler {
                Some(s) => {
                    let z: Vec<f64> = r.iter().zip(&s.mean).zip(&s.scale).map(|((v, m), sc)| (v - m) / sc).collect();
                    self.network.forward(&z)
                }
                None => self.network.forward(r),
            };
            out.push_row(&pred)?;
        }
        Ok(out)
    }

    pub fn best_val_loss(&self) -> f64 {
        if self.best_epoch == 0 {
            return f64::INFINITY;
        }
        self.trace[self.best_epoch - 1].val
    }
}

/// The perceptron fitted on augmented inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSurrogate {
    pub feature_names: Vec<String>,
    pub augment: AugmentMode,
    pub model: MlpModel,
}

impl MlpSurrogate {
    pub fn fit(
        dev_x: &Matrix,
        dev_y: &ExplanationMatrix,
        bb: &TreeEnsemble,
        cfg: &MlpConfig,
        augment: AugmentMode,
    ) -> Result<Self> {
        check_width(dev_x.rows(), dev_y.n_rows())?;
        let outputs = BlackBoxOutputs::compute(bb, dev_x)?;
        let xa = augment_with(dev_x, &outputs, augment)?;
        Ok(MlpSurrogate {
            feature_names: dev_y.feature_names.clone(),
            augment,
            model: fit_mlp(&xa, &dev_y.rows, cfg)?,
        })
    }

    pub fn predict_augmented(&self, xa: &Matrix) -> Result<Matrix> {
        self.model.predict(xa)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}
