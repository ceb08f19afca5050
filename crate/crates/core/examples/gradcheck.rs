//! Runs every finite-difference gradient suite in double precision.
//!
//! cargo run --release --example gradcheck

use warpnet::gradcheck::{default_suites, run_suites};

fn main() {
    let report = run_suites(&default_suites(0));
    println!("{report}");
    if !report.passed() {
        std::process::exit(1);
    }
}
