//! A multi-output perceptron surrogate with early stopping, and its loss
//! trace.
//!
//! cargo run --release --example mlp_surrogate

use confexplain::blackbox::{fit_gbt_classifier, GbtParams};
use confexplain::data::{make_synthetic, split, SplitSpec};
use confexplain::explain::explain_batch;
use confexplain::surrogate::{AugmentMode, MlpConfig, MlpSurrogate, Surrogate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(2000, 6, 3, 8)?;
    let (train, _, test) = split(&ds, &SplitSpec::new(0.6, 0.2, 0.2, 8)?)?;
    let bb = fit_gbt_classifier(
        &train,
        &GbtParams {
            n_estimators: 200,
            max_depth: 4,
            ..GbtParams::default()
        },
    )?;
    let truth = explain_batch(&bb, &train.features, &ds.feature_names)?.value;
    let cfg = MlpConfig {
        hidden_sizes: vec![64, 64],
        learning_rate: 5e-3,
        max_epochs: 80,
        ..MlpConfig::default()
    };
    let mlp = MlpSurrogate::fit(&train.features, &truth, &bb, &cfg, AugmentMode::Probability)?;
    let m = &mlp.model;
    println!("trained {} epochs, kept epoch {} (val MSE {:.5})", m.trace.len(), m.best_epoch, m.best_val_loss());
    for (e, l) in m.trace.iter().enumerate().step_by(10) {
        println!("  epoch {:>3}: train {:.5}  val {:.5}", e + 1, l.train, l.val);
    }
    let pred = Surrogate::Mlp(mlp).predict(&test.features, &bb)?.value;
    let exact = explain_batch(&bb, &test.features, &ds.feature_names)?.value;
    let mse = pred.rows.as_slice().iter().zip(exact.rows.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / pred.rows.as_slice().len() as f64;
    println!("test MSE against TreeSHAP {mse:.5}");
    Ok(())
}
