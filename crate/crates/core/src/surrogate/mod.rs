//! Regressors that map an instance plus the black box's output to the
//! explainer's importance scores.

pub mod mlp;
mod trees;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use mlp::{MlpConfig, MlpModel, MlpSurrogate};
pub use trees::PerFeatureSurrogate;

use crate::blackbox::{argmax, TreeEnsemble};
use crate::error::{check_width, Result};
use crate::explain::{expected_value, explained_output, ExplanationMatrix, Timed};
use crate::matrix::Matrix;

/// What the black box contributes to the surrogate input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Predicted probability: one column for binary models, C for multiclass.
    #[default]
    Probability,
    /// Predicted class index as a single column.
    Label,
}

impl AugmentMode {
    pub fn width(self, bb: &TreeEnsemble) -> usize {
        match self {
            AugmentMode::Probability => bb.n_outputs(),
            AugmentMode::Label => 1,
        }
    }
}

/// Per-row black-box outputs computed once and shared by augmentation,
/// difficulty estimation and the explained-output choice.
#[derive(Clone, Debug)]
pub struct BlackBoxOutputs {
    /// `predict_proba` per row (length 1 for binary).
    pub proba: Matrix,
    pub explained: Vec<usize>,
}

impl BlackBoxOutputs {
    pub fn compute(bb: &TreeEnsemble, x: &Matrix) -> Result<Self> {
        check_width(bb.n_features, x.cols())?;
        let mut proba = Matrix::zeros(0, bb.n_outputs());
        let mut explained = Vec::with_capacity(x.rows());
        let margins = bb.margins_batch(x);
        for m in margins.iter_rows() {
            proba.push_row(&bb.proba_from_margins(m)?)?;
            explained.push(explained_output(bb, m));
        }
        Ok(BlackBoxOutputs { proba, explained })
    }
}

/// Appends the configured black-box channel to each row of `x`.
pub fn augment_with(x: &Matrix, outputs: &BlackBoxOutputs, mode: AugmentMode) -> Result<Matrix> {
    match mode {
        AugmentMode::Probability => x.hstack(&outputs.proba),
        AugmentMode::Label => {
            let labels: Vec<f64> = outputs
                .proba
                .iter_rows()
                .map(|p| if p.len() == 1 { (p[0] > 0.5) as u8 as f64 } else { argmax(p) as f64 })
                .collect();
            x.hstack(&Matrix::from_vec(labels.len(), 1, labels)?)
        }
    }
}

pub fn augment(x: &Matrix, bb: &TreeEnsemble, mode: AugmentMode) -> Result<Matrix> {
    let outputs = BlackBoxOutputs::compute(bb, x)?;
    augment_with(x, &outputs, mode)
}

/// Either surrogate family behind one interface.
#[derive(Clone, Debug)]
pub enum Surrogate {
    Trees(PerFeatureSurrogate),
    Mlp(MlpSurrogate),
}

impl Surrogate {
    pub fn family(&self) -> &'static str {
        match self {
            Surrogate::Trees(_) => "trees",
            Surrogate::Mlp(_) => "mlp",
        }
    }

    pub fn augment_mode(&self) -> AugmentMode {
        match self {
            Surrogate::Trees(s) => s.augment,
            Surrogate::Mlp(s) => s.augment,
        }
    }

    pub fn feature_names(&self) -> &[String] {
        match self {
            Surrogate::Trees(s) => &s.feature_names,
            Surrogate::Mlp(s) => &s.feature_names,
        }
    }

    /// Predictions from already-augmented rows.
    pub fn predict_augmented(&self, xa: &Matrix) -> Result<Matrix> {
        match self {
            Surrogate::Trees(s) => s.predict_augmented(xa),
            Surrogate::Mlp(s) => s.predict_augmented(xa),
        }
    }

    /// Augments `x` through `bb` and predicts every importance score.
    /// The timing covers the black-box forward pass.
    pub fn predict(&self, x: &Matrix, bb: &TreeEnsemble) -> Result<Timed<ExplanationMatrix>> {
        let start = Instant::now();
        let outputs = BlackBoxOutputs::compute(bb, x)?;
        let xa = augment_with(x, &outputs, self.augment_mode())?;
        let rows = self.predict_augmented(&xa)?;
        let elapsed = start.elapsed().as_secs_f64();
        let base = expected_value(bb);
        let value = ExplanationMatrix::new(
            self.feature_names().to_vec(),
            outputs.explained.iter().map(|&o| base[o]).collect(),
            outputs.explained,
            rows,
        )?;
        Ok(Timed { value, elapsed })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Surrogate::Trees(s) => s.save(&dir.join("surrogate_trees")),
            Surrogate::Mlp(s) => s.save_json(dir.join("surrogate_mlp.json")),
        }
    }

    pub fn load(dir: &Path, family: &str) -> Result<Surrogate> {
        match family {
            "trees" => Ok(Surrogate::Trees(PerFeatureSurrogate::load(&dir.join("surrogate_trees"))?)),
            "mlp" => Ok(Surrogate::Mlp(MlpSurrogate::load_json(dir.join("surrogate_mlp.json"))?)),
            other => Err(crate::Error::Config(format!("unknown surrogate family `{other}`"))),
        }
    }
}
