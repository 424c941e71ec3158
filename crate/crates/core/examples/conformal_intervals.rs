//! Calibrated interval explanations: every feature's importance gets an
//! interval that covers the exact value at the requested rate.
//!
//! cargo run --release --example conformal_intervals

use std::sync::Arc;

use confexplain::blackbox::{fit_gbt_classifier, GbtParams};
use confexplain::conformal::difficulty::{DifficultyConfig, DifficultyEstimator, DifficultyKind};
use confexplain::conformal::{calibrate_explainer, required_calibration_size};
use confexplain::data::{make_synthetic, split, SplitSpec};
use confexplain::eval::{empirical_coverage, per_feature_coverage};
use confexplain::explain::explain_batch;
use confexplain::surrogate::{AugmentMode, PerFeatureSurrogate, Surrogate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(3000, 5, 2, 21)?;
    let (train, calib, test) = split(&ds, &SplitSpec::new(0.5, 0.25, 0.25, 21)?)?;
    let names = &ds.feature_names;
    let bb = Arc::new(fit_gbt_classifier(&train, &GbtParams { n_estimators: 200, ..GbtParams::default() })?);
    let truth_train = explain_batch(&bb, &train.features, names)?.value;
    let truth_calib = explain_batch(&bb, &calib.features, names)?.value;
    let truth_test = explain_batch(&bb, &test.features, names)?.value;

    let params = GbtParams { n_estimators: 200, ..GbtParams::default() };
    let surrogate = Arc::new(Surrogate::Trees(PerFeatureSurrogate::fit(
        &train.features,
        &truth_train,
        &bb,
        &params,
        AugmentMode::Probability,
    )?));
    let estimator = DifficultyEstimator::fit(DifficultyConfig::of(DifficultyKind::PredConf), &train, &truth_train)?;
    let epsilons = [0.05, 0.1, 0.2];
    for e in epsilons {
        println!("epsilon {e}: needs at least {} calibration rows", required_calibration_size(e));
    }
    let explainer = calibrate_explainer(surrogate, estimator, &calib.features, &truth_calib, bb.clone(), &epsilons)?;

    let one = explainer.predict_interval(test.features.row(0), 0.1)?;
    println!("row 0 at epsilon 0.1 (sigma {:?}):", one.sigma);
    for (f, iv) in one.features.iter().enumerate() {
        println!(
            "  {:<3} [{:+.4}, {:+.4}] point {:+.4} exact {:+.4}",
            names[f],
            iv.lo,
            iv.hi,
            iv.point,
            truth_test.row(0)[f]
        );
    }
    for e in epsilons {
        let ivs = explainer.predict(&test.features, e)?.value;
        let per: Vec<String> = per_feature_coverage(&ivs, &truth_test)?.iter().map(|c| format!("{c:.3}")).collect();
        println!("epsilon {e}: coverage {:.3}, per feature {}", empirical_coverage(&ivs, &truth_test)?, per.join(" "));
    }
    Ok(())
}
