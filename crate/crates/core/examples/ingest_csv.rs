//! Writes the synthetic raw CSVs, ingests them and saves the canonical
//! dataset directory.
//!
//! cargo run --release --example ingest_csv -- /tmp/idmir-data

use idmir::data::synthetic::{write_raw_csv, SyntheticSpec};
use idmir::data::{BuildOptions, LoggedDataset};

fn main() -> idmir::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("idmir-data"));
    let raw = out.join("raw");
    write_raw_csv(&SyntheticSpec::default(), &raw)?;
    let ds = LoggedDataset::from_csv(raw.join("interactions.csv"), Some(raw.join("trust.csv").as_path()), 4.0, BuildOptions::default())?;
    let positives = ds.records().filter(|r| r.feedback == 1).count();
    println!(
        "{} users, {} items, {} records ({:.1}% positive), {} time buckets",
        ds.n_users,
        ds.n_items,
        ds.num_records(),
        100.0 * positives as f64 / ds.num_records() as f64,
        ds.buckets.len()
    );
    for t in [0, ds.last_bucket()] {
        println!("bucket {t}: popularity entropy {:.3}", ds.popularity.normalized_entropy(t));
    }
    ds.save_dir(out.join("dataset"))?;
    let back = LoggedDataset::load_dir(out.join("dataset"))?;
    assert_eq!(back, ds);
    println!("canonical dataset -> {}", out.join("dataset").display());
    Ok(())
}
