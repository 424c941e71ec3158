//! Synthetic blobs, a stratified three-way split, and a CSV dataset with a
//! categorical column encoded one-hot.
//!
//! cargo run --example data_and_splits

use std::path::Path;

use confexplain::data::{load_csv, make_synthetic, one_hot_encode, partition, split, Column, Schema, SplitSpec};
use confexplain::seed::substream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = make_synthetic(900, 4, 3, substream(7, "synthetic/blobs"))?;
    let spec = SplitSpec::new(0.6, 0.2, 0.2, substream(7, "split/blobs"))?;
    let (train, calib, test) = split(&ds, &spec)?;
    println!("blobs: {} rows, classes {:?}", ds.len(), ds.class_counts());
    for (name, part) in [("train", &train), ("calib", &calib), ("test", &test)] {
        println!("  {name:<5} {:>4} rows, per class {:?}", part.len(), part.class_counts());
    }

    let schema = Schema {
        columns: vec![
            Column::numeric("temperature"),
            Column::numeric("humidity"),
            Column::categorical("outlook"),
            Column::categorical("play"),
        ],
        target: "play".into(),
        positive_label: Some("yes".into()),
    };
    let csv = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/weather.csv");
    let raw = load_csv(&csv, &schema)?;
    // The encoder only sees training rows, so unseen categories stay unseen.
    let part = partition(&raw.labels, raw.n_classes(), &SplitSpec::new(0.6, 0.2, 0.2, 1)?)?;
    let (encoder, encoded) = one_hot_encode(&raw, &part.train)?;
    println!("weather: {} rows, labels {:?}", raw.len(), raw.label_names);
    println!("  encoded features: {:?}", encoder.feature_names());
    println!("  first row: {:?}", encoded.features.row(0));
    Ok(())
}
