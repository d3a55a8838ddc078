//! Sample the weight posterior with HMC and compare the empirical order
//! parameter and predictor with the saddle point.

use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::kernel::compute_features;
use apk::model::ReadoutMode;
use apk::predictor::evaluate_predictor;
use apk::sampler::{empirical_order_parameter_with_error, empirical_predictor, hmc_sample, HmcConfig};
use apk::solver::{solve_saddle, SolverConfig};

fn main() -> apk::Result<()> {
    let cfg = HmcTaskConfig {
        train_count: 50,
        test_count: 100,
        ..Default::default()
    };
    let split = gen_hmc_dataset(&cfg)?;
    let heads = build_hmc_heads(&cfg, 1000)?;
    let mode = ReadoutMode::SingleToken(1);
    let train = compute_features(&split.train.examples, &heads, mode, true)?;
    let test = compute_features(&split.test.examples, &heads, mode, true)?;
    let y = split.train.labels_vector();
    let (n, t) = (10, 0.01);
    let solver = SolverConfig {
        alpha: split.train.len() as f64 / n as f64,
        temperature: t,
        ..Default::default()
    };
    let (u, _) = solve_saddle(&train, &y, &solver)?;
    let theory = evaluate_predictor(u.u1(), &train, &y, &test, None, t)?;
    let sampler = HmcConfig {
        width: n,
        chains: 2,
        warmup: 200,
        samples: 200,
        thin: 5,
        temperature: t,
        ..Default::default()
    };
    let samples = hmc_sample(&train, &y, &sampler)?;
    println!("acceptance per chain {:?}, divergences {:?}", samples.acceptance, samples.divergences);
    let (u_est, se) = empirical_order_parameter_with_error(&samples)?;
    println!("theory U1 {:.3}sampled U1 {:.3}standard error {:.3}", u.u1(), u_est, se);
    let (mean, _) = empirical_predictor(&samples, &test)?;
    let a = nalgebra::DVector::from_vec(theory.mean);
    let (ca, cb) = (a.add_scalar(-a.mean()), mean.add_scalar(-mean.mean()));
    println!("mean-predictor correlation {:.3}", ca.dot(&cb) / (ca.norm() * cb.norm()));
    Ok(())
}
