//! The whole experiment from a config file: black boxes, exact attributions,
//! both surrogates, every estimator, coverage, widths, rank tests and plots.
//!
//! cargo run --release --example full_pipeline [config.json] [out_dir]

use std::path::PathBuf;

use confexplain::pipeline::{self, verify, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data/quick.json"));
    let cfg = ExperimentConfig::load(&config)?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone());
    let report = pipeline::run(&cfg, &out)?;

    for d in &report.datasets {
        println!("{} ({} rows, {} features, test accuracy {:.3})", d.name, d.rows, d.features, d.black_box.test_accuracy);
        for m in d.methods.iter().filter(|m| m.coverage.is_some()) {
            println!(
                "  {:<22} eps {:<4} coverage {:.3} width {:.3}",
                m.method,
                m.epsilon.unwrap_or_default(),
                m.coverage.unwrap_or_default(),
                m.widths.as_ref().and_then(|w| w.all).unwrap_or(f64::NAN)
            );
        }
        for s in &d.skipped {
            println!("  {:<22} skipped: {}", s.method, s.reason);
        }
    }
    for section in &report.rank_tables {
        println!(
            "{}: CD {:?}, Friedman reject {:?}, plot {:?}",
            section.name,
            section.critical_difference,
            section.friedman.map(|f| f.reject),
            section.plot
        );
    }
    let v = verify(&out)?;
    println!("verified {} coverages (max diff {:.1e}); report at {}", v.checked, v.max_abs_diff, out.join(pipeline::REPORT_FILE).display());
    Ok(())
}
