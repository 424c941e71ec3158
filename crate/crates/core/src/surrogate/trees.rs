use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{augment_with, AugmentMode, BlackBoxOutputs};
use crate::blackbox::{fit_gbt_regressor, GbtParams, TreeEnsemble};
use crate::data::{read_json, write_json};
use crate::error::{check_width, Error, Result};
use crate::explain::ExplanationMatrix;
use crate::matrix::Matrix;

/// One boosted regressor per explained feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PerFeatureSurrogate {
    pub feature_names: Vec<String>,
    pub augment: AugmentMode,
    pub input_width: usize,
    pub params: GbtParams,
    pub regressors: Vec<TreeEnsemble>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    feature_names: Vec<String>,
    augment: AugmentMode,
    input_width: usize,
    params: GbtParams,
    files: Vec<String>,
}

impl PerFeatureSurrogate {
    /// Fits regressor `f` on (augmented `dev_x`, column `f` of `dev_y`).
    pub fn fit(
        dev_x: &Matrix,
        dev_y: &ExplanationMatrix,
        bb: &TreeEnsemble,
        params: &GbtParams,
        augment: AugmentMode,
    ) -> Result<Self> {
        check_width(dev_x.rows(), dev_y.n_rows())?;
        let outputs = BlackBoxOutputs::compute(bb, dev_x)?;
        let xa = augment_with(dev_x, &outputs, augment)?;
        let regressors = (0..dev_y.n_features())
            .into_par_iter()
            .map(|f| fit_gbt_regressor(&xa, &dev_y.column(f), params))
            .collect::<Result<Vec<_>>>()?;
        Ok(PerFeatureSurrogate {
            feature_names: dev_y.feature_names.clone(),
            augment,
            input_width: xa.cols(),
            params: *params,
            regressors,
        })
    }

    pub fn predict_augmented(&self, xa: &Matrix) -> Result<Matrix> {
        check_width(self.input_width, xa.cols())?;
        let mut out = Matrix::zeros(xa.rows(), self.regressors.len());
        for (f, reg) in self.regressors.iter().enumerate() {
            let m = reg.margins_batch(xa);
            for i in 0..xa.rows() {
                out.set(i, f, m.get(i, 0));
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files: Vec<String> = (0..self.regressors.len()).map(|f| format!("feature_{f:04}.json")).collect();
        for (reg, file) in self.regressors.iter().zip(&files) {
            reg.save_json(dir.join(file))?;
        }
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                feature_names: self.feature_names.clone(),
                augment: self.augment,
                input_width: self.input_width,
                params: self.params,
                files,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = read_json(&dir.join("manifest.json"))?;
        check_width(m.feature_names.len(), m.files.len())?;
        let regressors = m
            .files
            .iter()
            .map(|f| TreeEnsemble::load_json(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        for r in &regressors {
            check_width(m.input_width, r.n_features)?;
        }
        Ok(PerFeatureSurrogate {
            feature_names: m.feature_names,
            augment: m.augment,
            input_width: m.input_width,
            params: m.params,
            regressors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::fit_gbt_classifier;
    use crate::data::make_synthetic;
    use crate::explain::explain_batch;
    use crate::surrogate::Surrogate;

    fn small(n_estimators: usize) -> GbtParams {
        GbtParams {
            n_estimators,
            ..GbtParams::default()
        }
    }

    #[test]
    fn one_regressor_per_feature_and_constant_targets() {
        let ds = make_synthetic(60, 2, 2, 0).unwrap();
        let bb = fit_gbt_classifier(&ds, &small(10)).unwrap();
        let zeros = ExplanationMatrix::new(
            ds.feature_names.clone(),
            vec![0.0; 60],
            vec![0; 60],
            Matrix::zeros(60, 2),
        )
        .unwrap();
        let s = PerFeatureSurrogate::fit(&ds.features, &zeros, &bb, &small(20), AugmentMode::Probability).unwrap();
        assert_eq!(s.regressors.len(), 2);
        let pred = Surrogate::Trees(s).predict(&ds.features, &bb).unwrap().value;
        assert_eq!((pred.n_rows(), pred.n_features()), (60, 2));
        assert!(pred.rows.as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn copies_an_input_column() {
        let ds = make_synthetic(80, 2, 2, 1).unwrap();
        let bb = fit_gbt_classifier(&ds, &small(10)).unwrap();
        let mut target = Matrix::zeros(80, 2);
        for i in 0..80 {
            target.set(i, 0, ds.features.get(i, 1));
        }
        let y = ExplanationMatrix::new(ds.feature_names.clone(), vec![0.0; 80], vec![0; 80], target).unwrap();
        let params = GbtParams {
            learning_rate: 0.5,
            n_estimators: 300,
            max_depth: 3,
            ..GbtParams::default()
        };
        let s = PerFeatureSurrogate::fit(&ds.features, &y, &bb, &params, AugmentMode::Probability).unwrap();
        let xa = crate::surrogate::augment(&ds.features, &bb, AugmentMode::Probability).unwrap();
        let pred = s.predict_augmented(&xa).unwrap();
        let mse: f64 = (0..80).map(|i| (pred.get(i, 0) - ds.features.get(i, 1)).powi(2)).sum::<f64>() / 80.0;
        assert!(mse < 1e-6, "mse {mse}");
    }

    #[test]
    fn batch_equals_rowwise_and_persists() {
        let ds = make_synthetic(50, 3, 2, 2).unwrap();
        let bb = fit_gbt_classifier(&ds, &small(10)).unwrap();
        let truth = explain_batch(&bb, &ds.features, &ds.feature_names).unwrap().value;
        let s = PerFeatureSurrogate::fit(&ds.features, &truth, &bb, &small(15), AugmentMode::Probability).unwrap();
        let sur = Surrogate::Trees(s.clone());
        let batch = sur.predict(&ds.features, &bb).unwrap().value;
        for i in 0..50 {
            let one = sur.predict(&ds.features.select_rows(&[i]), &bb).unwrap().value;
            assert_eq!(one.row(0), batch.row(i));
        }
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(PerFeatureSurrogate::load(dir.path()).unwrap(), s);
    }
}
