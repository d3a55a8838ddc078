//! Finite width: the solved order parameter boosts the good and denoising
//! paths and suppresses the rest, beating the infinite-width predictor.

use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::kernel::compute_features;
use apk::model::ReadoutMode;
use apk::predictor::evaluate_predictor;
use apk::solver::{solve_saddle, OrderParameterSet, SolverConfig};

fn main() -> apk::Result<()> {
    let cfg = HmcTaskConfig::default();
    let split = gen_hmc_dataset(&cfg)?;
    let heads = build_hmc_heads(&cfg, 1000)?;
    let mode = ReadoutMode::SingleToken(1);
    let train = compute_features(&split.train.examples, &heads, mode, true)?;
    let test = compute_features(&split.test.examples, &heads, mode, true)?;
    let (y, yt) = (split.train.labels_vector(), split.test.labels_vector());
    let t = 0.01;
    let gp = OrderParameterSet::gp_point(2, 2, 1.0)?;
    let gp_acc = evaluate_predictor(gp.u1(), &train, &y, &test, Some(&yt), t)?.accuracy;
    for width in [100, 20, 10] {
        let solver = SolverConfig {
            alpha: split.train.len() as f64 / width as f64,
            temperature: t,
            ..Default::default()
        };
        let (u, trace) = solve_saddle(&train, &y, &solver)?;
        let acc = evaluate_predictor(u.u1(), &train, &y, &test, Some(&yt), t)?.accuracy;
        println!(
            "N={width} (alpha {:.0}): accuracy {:.3} vs GP {:.3}, {} iterations, lr {:e}",
            solver.alpha,
            acc.unwrap_or(f64::NAN),
            gp_acc.unwrap_or(f64::NAN),
            trace.iterations(),
            trace.learning_rate
        );
        println!("{:.3}", u.u1());
    }
    Ok(())
}
