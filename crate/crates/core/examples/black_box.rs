//! Gradient-boosted black box chosen by calibration log-loss, then saved and
//! reloaded.
//!
//! cargo run --release --example black_box

use confexplain::blackbox::{default_grid, grid_search, log_loss, TreeEnsemble};
use confexplain::data::{make_synthetic, split, SplitSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(1200, 6, 2, 3)?;
    let (train, calib, test) = split(&ds, &SplitSpec::new(0.6, 0.2, 0.2, 3)?)?;
    let grid = default_grid();
    let outcome = grid_search(&train, &calib, &grid)?;
    println!("searched {} grid points", grid.len());
    println!("best #{}: {:?}", outcome.best_index, outcome.best);
    println!("calibration log-loss {:.4}", outcome.calib_losses[outcome.best_index]);

    let model = outcome.model;
    let correct = test
        .features
        .iter_rows()
        .zip(&test.labels)
        .filter(|(r, &y)| model.predict_class(r).is_ok_and(|c| c == y))
        .count();
    println!("test log-loss {:.4}, accuracy {:.3}", log_loss(&model, &test)?, correct as f64 / test.len() as f64);
    println!("{} trees, max depth {}", model.trees.len(), model.max_depth());

    let path = std::env::temp_dir().join("confexplain_black_box.json");
    model.save_json(&path)?;
    let back = TreeEnsemble::load_json(&path)?;
    assert_eq!(back.predict_margin(test.features.row(0))?, model.predict_margin(test.features.row(0))?);
    println!("round-tripped through {}", path.display());
    Ok(())
}
