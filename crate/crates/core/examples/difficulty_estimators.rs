//! Every difficulty estimator on the same surrogate: coverage stays near the
//! target while interval widths adapt to how hard each instance is.
//!
//! cargo run --release --example difficulty_estimators

use std::sync::Arc;

use confexplain::blackbox::{fit_gbt_classifier, GbtParams};
use confexplain::conformal::calibrate_explainer;
use confexplain::conformal::difficulty::{DifficultyConfig, DifficultyEstimator, DifficultyKind};
use confexplain::data::{make_synthetic, split, SplitSpec};
use confexplain::eval::{interval_metrics, TopKMode};
use confexplain::explain::explain_batch;
use confexplain::surrogate::{AugmentMode, PerFeatureSurrogate, Surrogate};
use confexplain::Error;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(3000, 6, 2, 4)?;
    let (train, calib, test) = split(&ds, &SplitSpec::new(0.5, 0.25, 0.25, 4)?)?;
    let names = &ds.feature_names;
    let bb = Arc::new(fit_gbt_classifier(&train, &GbtParams { n_estimators: 200, max_depth: 4, ..GbtParams::default() })?);
    let truth_train = explain_batch(&bb, &train.features, names)?.value;
    let truth_calib = explain_batch(&bb, &calib.features, names)?.value;
    let truth_test = explain_batch(&bb, &test.features, names)?.value;
    let surrogate = Arc::new(Surrogate::Trees(PerFeatureSurrogate::fit(
        &train.features,
        &truth_train,
        &bb,
        &GbtParams { n_estimators: 150, ..GbtParams::default() },
        AugmentMode::Probability,
    )?));

    println!("{:<16} {:>8} {:>10} {:>10} {:>9}", "estimator", "coverage", "width all", "width top2", "seconds");
    for kind in DifficultyKind::ALL {
        let estimator = match DifficultyEstimator::fit(DifficultyConfig::of(kind), &train, &truth_train) {
            Ok(e) => e,
            Err(e @ Error::DegenerateMedian { .. }) => {
                println!("{kind:<16} skipped: {e}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let ce = calibrate_explainer(surrogate.clone(), estimator, &calib.features, &truth_calib, bb.clone(), &[0.1])?;
        let timed = ce.predict(&test.features, 0.1)?;
        let (coverage, _, widths) = interval_metrics(&timed.value, &truth_test, &[2], TopKMode::Absolute)?;
        println!(
            "{kind:<16} {coverage:>8.3} {:>10.3} {:>10.3} {:>9.4}",
            widths.all.unwrap_or(f64::NAN),
            widths.top[0].mean.unwrap_or(f64::NAN),
            timed.elapsed
        );
    }
    Ok(())
}
