//! Exact TreeSHAP attributions of a black-box margin, checked against subset
//! enumeration and for local accuracy.
//!
//! cargo run --release --example exact_attributions

use confexplain::blackbox::{fit_gbt_classifier, GbtParams};
use confexplain::data::make_synthetic;
use confexplain::explain::{brute_force_shapley, explain_batch, tree_shap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(600, 5, 3, 11)?;
    let params = GbtParams {
        n_estimators: 50,
        max_depth: 4,
        ..GbtParams::default()
    };
    let model = fit_gbt_classifier(&ds, &params)?;
    let x = ds.features.row(0);
    let margins = model.predict_margin(x)?;
    let fast = tree_shap(&model, x)?;
    let slow = brute_force_shapley(&model, x)?;
    for (k, (v, b)) in fast.iter().zip(&slow).enumerate() {
        let gap = v.phi.iter().zip(&b.phi).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        println!(
            "class {k}: margin {:+.4}  base {:+.4}  sum(phi) {:+.4}  max |fast - enumeration| {gap:.1e}",
            margins[k],
            v.base_value,
            v.phi.iter().sum::<f64>()
        );
    }
    let batch = explain_batch(&model, &ds.features, &ds.feature_names)?;
    println!("explained {} rows in {:.3}s", batch.value.n_rows(), batch.elapsed);
    println!("row 0 explains class {}: {:?}", batch.value.outputs[0], batch.value.row(0));
    Ok(())
}
