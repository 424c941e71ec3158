//! Friedman test and Nemenyi critical difference over a method-by-dataset
//! table, rendered as a critical-difference diagram.
//!
//! cargo run --example rank_statistics [out.svg]

use confexplain::eval::plot::{cd_diagram_svg, CdPlotData};
use confexplain::eval::{rank_test, RankTable};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let methods: Vec<String> = ["trees+none", "trees+pred-conf", "trees+knn-dist", "mlp+none"].map(String::from).to_vec();
    // Mean normalized interval width per dataset; lower is better.
    let values = vec![
        vec![0.92, 0.71, 0.64, 1.10],
        vec![0.88, 0.69, 0.70, 1.03],
        vec![1.01, 0.80, 0.66, 1.20],
        vec![0.95, 0.74, 0.61, 0.99],
        vec![0.83, 0.77, 0.68, 1.15],
        vec![0.90, 0.73, 0.62, 1.08],
    ];
    let rows = (0..values.len()).map(|i| format!("dataset{i}")).collect();
    let table = RankTable::new(methods.clone(), rows, values, true)?;
    let test = rank_test(&table, 0.05)?;
    for (m, r) in methods.iter().zip(&table.average_ranks) {
        println!("{m:<16} average rank {r:.3}");
    }
    println!(
        "Friedman chi2 = {:.3} (df {}, critical {:.3}) reject: {}",
        test.friedman.statistic, test.friedman.degrees_of_freedom, test.friedman.critical_value, test.friedman.reject
    );
    println!("Nemenyi CD at alpha 0.05 = {:.4}", test.critical_difference);

    let svg = cd_diagram_svg(&CdPlotData {
        title: "normalized width".into(),
        methods,
        average_ranks: table.average_ranks.clone(),
        critical_difference: test.critical_difference,
        alpha: 0.05,
    });
    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("cd.svg").display().to_string());
    std::fs::write(&path, svg)?;
    println!("wrote {path}");
    Ok(())
}
