//! Kernel-task alignment: overlap of the label vector with the top
//! principal components of the GP and the renormalized kernels.

use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::kernel::{compute_features, kernel_task_alignment, total_kernel};
use apk::model::ReadoutMode;
use apk::solver::{solve_saddle, OrderParameterSet, SolverConfig};

fn main() -> apk::Result<()> {
    let cfg = HmcTaskConfig::default();
    let split = gen_hmc_dataset(&cfg)?;
    let heads = build_hmc_heads(&cfg, 1000)?;
    let train = compute_features(&split.train.examples, &heads, ReadoutMode::SingleToken(1), true)?;
    let y = split.train.labels_vector();
    let gp = OrderParameterSet::gp_point(2, 2, 1.0)?;
    let solver = SolverConfig {
        alpha: 10.0,
        temperature: 0.01,
        ..Default::default()
    };
    let (u, _) = solve_saddle(&train, &y, &solver)?;
    for (name, u1) in [("GP", gp.u1()), ("N=10", u.u1())] {
        let k = total_kernel(u1, &train)?;
        let a = kernel_task_alignment(&k.values, &y)?;
        let top: Vec<String> = a.iter().take(5).map(|e| format!("{:.3}", e.overlap * e.overlap)).collect();
        let total: f64 = a.iter().map(|e| e.overlap * e.overlap).sum();
        println!("{name}: top squared overlaps [{}], total {total:.6}", top.join(", "));
    }
    Ok(())
}
