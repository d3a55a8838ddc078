//! Infinite-width limit: the saddle point is `sigma^(2(L+1)) I` at every
//! level whatever the data.

use apk::kernel::PathFeatureMatrix;
use apk::paths::enumerate_paths;
use apk::solver::{action_gradient, solve_saddle, OrderParameterSet, SolverConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> apk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, l) in [(2, 2), (4, 2), (3, 3)] {
        let paths = enumerate_paths(h, l)?;
        let (p, w) = (8, 3);
        let stack = DMatrix::from_fn(p, paths.len() * w, |_, _| rng.sample(StandardNormal));
        let features = PathFeatureMatrix::from_stack(h, l, w, paths, stack)?;
        let labels = DVector::from_fn(p, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let cfg = SolverConfig {
            sigma2: 1.5,
            ..Default::default()
        };
        let (u, trace) = solve_saddle(&features, &labels, &cfg)?;
        let gp = OrderParameterSet::gp_point(h, l, cfg.sigma2)?;
        let dev = (u.u1() - gp.u1()).abs().max();
        let grad = action_gradient(&gp, &features, &labels, &cfg)?.max_abs();
        println!(
            "H={h} L={l}: {} paths, {} iterations, max |U1 - U_gp| = {dev:.2e}, gradient at U_gp = {grad:.1e}",
            u.u1().nrows(),
            trace.iterations()
        );
    }
    Ok(())
}
