//! Score heads by their order-parameter mass and prune the weakest first.

use apk::analysis::{head_scores, ordered_pruning};
use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::kernel::compute_features;
use apk::model::ReadoutMode;
use apk::solver::{solve_saddle, SolverConfig};

fn main() -> apk::Result<()> {
    let cfg = HmcTaskConfig::default();
    let split = gen_hmc_dataset(&cfg)?;
    let heads = build_hmc_heads(&cfg, 1000)?;
    let mode = ReadoutMode::SingleToken(1);
    let train = compute_features(&split.train.examples, &heads, mode, true)?;
    let test = compute_features(&split.test.examples, &heads, mode, true)?;
    let (y, yt) = (split.train.labels_vector(), split.test.labels_vector());
    let solver = SolverConfig {
        alpha: 10.0,
        temperature: 0.01,
        ..Default::default()
    };
    let (u, _) = solve_saddle(&train, &y, &solver)?;
    for s in head_scores(u.u1(), 2, 2)?.scores {
        println!("layer {} head {}: score {:.3}", s.layer, s.head + 1, s.normalized);
    }
    for step in ordered_pruning(u.u1(), &train, &y, &test, Some(&yt), 0.01, 3)? {
        let (l, h) = step.removed.last().copied().unwrap_or_default();
        println!(
            "removed layer {l} head {}: {} paths left, accuracy {:.3}",
            h + 1,
            step.kept_paths.len(),
            step.report.accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
