//! One boosted regressor per feature, trained to reproduce TreeSHAP from the
//! instance and the black box's predicted probability.
//!
//! cargo run --release --example tree_surrogate

use confexplain::blackbox::{fit_gbt_classifier, GbtParams};
use confexplain::data::{make_synthetic, split, SplitSpec};
use confexplain::explain::explain_batch;
use confexplain::surrogate::{AugmentMode, PerFeatureSurrogate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(2000, 8, 2, 5)?;
    let (train, _, test) = split(&ds, &SplitSpec::new(0.6, 0.2, 0.2, 5)?)?;
    let bb_params = GbtParams {
        n_estimators: 300,
        max_depth: 6,
        ..GbtParams::default()
    };
    let bb = fit_gbt_classifier(&train, &bb_params)?;
    let truth_train = explain_batch(&bb, &train.features, &ds.feature_names)?.value;
    let exact = explain_batch(&bb, &test.features, &ds.feature_names)?;

    let params = GbtParams {
        n_estimators: 200,
        ..GbtParams::default()
    };
    let surrogate = PerFeatureSurrogate::fit(&train.features, &truth_train, &bb, &params, AugmentMode::Probability)?;
    let approx = confexplain::surrogate::Surrogate::Trees(surrogate).predict(&test.features, &bb)?;
    println!("exact {:.3}s, surrogate {:.3}s on {} rows", exact.elapsed, approx.elapsed, test.len());
    for f in 0..ds.width() {
        let (t, p) = (exact.value.column(f), approx.value.column(f));
        let mae = t.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64;
        let scale = t.iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64;
        println!("  {:<3} mean |phi| {scale:.4}  surrogate MAE {mae:.4}", ds.feature_names[f]);
    }
    Ok(())
}
