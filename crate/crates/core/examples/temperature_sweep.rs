//! Pick the Gibbs temperature on a validation split.

use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::kernel::compute_features;
use apk::model::ReadoutMode;
use apk::predictor::{default_temperature_grid, temperature_sweep};
use apk::solver::SolverConfig;

fn main() -> apk::Result<()> {
    let cfg = HmcTaskConfig {
        test_count: 300,
        ..Default::default()
    };
    let split = gen_hmc_dataset(&cfg)?;
    let heads = build_hmc_heads(&cfg, 1000)?;
    let mode = ReadoutMode::SingleToken(1);
    let train = compute_features(&split.train.examples, &heads, mode, true)?;
    let val = compute_features(&split.test.examples, &heads, mode, true)?;
    let solver = SolverConfig {
        alpha: 10.0,
        ..Default::default()
    };
    let r = temperature_sweep(
        &train,
        &split.train.labels_vector(),
        &val,
        &split.test.labels_vector(),
        &default_temperature_grid(),
        &solver,
    )?;
    for row in &r.table {
        match (row.accuracy, &row.error) {
            (Some(a), _) => println!("T={:<6} accuracy {a:.3}", row.temperature),
            (None, e) => println!("T={:<6} failed: {}", row.temperature, e.as_deref().unwrap_or("")),
        }
    }
    println!("best T={} ({:.3})", r.best_temperature, r.best_accuracy);
    Ok(())
}
