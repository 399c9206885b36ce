//! Runs a scenario file and prints its report and rate summary.
//!
//! `cargo run --release --example scenario -- scenarios/minimal.toml`

use bfnet::cli::{run, RunOptions, Scenario};

fn main() -> bfnet::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/minimal.toml").to_string());
    let scenario = Scenario::from_file(&path)?;
    let out = std::env::temp_dir().join(format!("bfnet-{}", scenario.hash()));
    let result = run(&scenario, &out, &RunOptions { resume: true, log: true })?;
    println!("outputs in {}", out.display());
    print!("{}", std::fs::read_to_string(out.join("report.csv"))?);
    for row in &result.summary {
        println!(
            "{} seed {}: var slope {:.3}, Y slope {:.3}, spline slope {:.3}",
            row.net, row.seed, row.var_slope, row.y_slope, row.spline_slope
        );
    }
    Ok(())
}
