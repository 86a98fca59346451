//! Frozen trace of a seeded NC-SOBA run. Regenerate with
//! `UPDATE_GOLDEN=1 cargo test --test golden` after an intended change.

use std::path::PathBuf;

use compressed_soba::metrics::{read_csv, write_csv};
use compressed_soba::problems::{make_quadratic, QuadraticSpec};
use compressed_soba::{run, AlgoConfig, Algorithm, RunOptions};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/nc_soba_seed3.csv")
}

#[test]
fn nc_soba_trace_matches_golden_file() {
    let p = make_quadratic(&QuadraticSpec::new(3, 4, 3, 12).with_sigma(0.2).with_hetero(0.5)).unwrap();
    let cfg = AlgoConfig::new(Algorithm::NcSoba, 0.1, 0.2, 0.2);
    let trace = run(&cfg, &p, 40, 3, &RunOptions::default()).unwrap();
    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        write_csv(&trace, &path).unwrap();
    }
    let expected = std::fs::read_to_string(&path).expect("golden file present");
    assert_eq!(trace.to_csv_string(), expected);
    assert_eq!(read_csv(&path).unwrap(), trace);
}
