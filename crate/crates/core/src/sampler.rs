//! Hamiltonian Monte Carlo over the network weights, with the sampled
//! order parameter and predictor as estimators.
//!
//! Outputs are evaluated through the path decomposition: with the scaled
//! attentioned inputs `F` (rows are examples, see [`PathFeatureMatrix`]) and
//! `W_pi = Veff_pi V0`, every output is `F vec(W) / sqrt(H^L N)`.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernel::PathFeatureMatrix;
use crate::model::{attentioned_inputs, AttentionStack, NetworkDims, NetworkWeights, ReadoutMode, TokenSequence};
use crate::paths::{enumerate_paths, PathIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    /// Hidden width `N`.
    pub width: usize,
    /// Initial leapfrog step; adapted during warmup when `adapt` is set.
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub warmup: usize,
    /// Sampling iterations after warmup, before thinning.
    pub samples: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub temperature: f64,
    pub sigma2: f64,
    pub adapt: bool,
    pub target_accept: f64,
    /// Relative uniform jitter of the step size after warmup.
    pub step_jitter: f64,
    /// Sample the prior alone (the infinite-temperature limit).
    pub prior_only: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            width: 10,
            step_size: 0.01,
            leapfrog_steps: 32,
            warmup: 1000,
            samples: 1000,
            thin: 10,
            chains: 10,
            seed: 0,
            temperature: 0.01,
            sigma2: 1.0,
            adapt: true,
            target_accept: 0.8,
            step_jitter: 0.1,
            prior_only: false,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.chains == 0 || self.thin == 0 {
            return bad("width, chains and thin must be >= 1");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be > 0 for sampling");
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return bad("sigma2 must be > 0");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return bad("step_jitter must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Kept draws of every chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub dims: NetworkDims,
    pub draws: Vec<NetworkWeights>,
    /// Chain index of each draw.
    pub chain_of: Vec<usize>,
    /// Post-warmup acceptance rate per chain.
    pub acceptance: Vec<f64>,
    /// Rejected divergent trajectories per chain (warmup included).
    pub divergences: Vec<usize>,
    /// Potential energy after every post-warmup iteration, per chain.
    pub potential: Vec<Vec<f64>>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Fraction of all iterations that diverged.
    pub fn divergence_rate(&self, iterations_per_chain: usize) -> f64 {
        let total: usize = self.divergences.iter().sum();
        total as f64 / (iterations_per_chain.max(1) * self.divergences.len().max(1)) as f64
    }
}

/// Scaled attentioned inputs from precomputed attention matrices.
pub fn features_from_attention(
    inputs: &[TokenSequence],
    attention: &AttentionStack,
    mode: ReadoutMode,
) -> Result<PathFeatureMatrix> {
    if inputs.is_empty() || inputs.len() != attention.examples.len() {
        return Err(shape_err!(
            "{} inputs for {} attention sets",
            inputs.len(),
            attention.examples.len()
        ));
    }
    let att0 = &attention.examples[0];
    let (h, l) = (att0.head_count(), att0.depth());
    let width = inputs[0].width();
    let paths = enumerate_paths(h, l)?;
    let scale = 1.0 / (width as f64).sqrt();
    let mut stack = DMatrix::zeros(inputs.len(), paths.len() * width);
    for (mu, (x, att)) in inputs.iter().zip(&attention.examples).enumerate() {
        let xi = attentioned_inputs(x, att, mode)?;
        for (j, v) in xi.iter().enumerate() {
            stack[(mu, j)] = v * scale;
        }
    }
    PathFeatureMatrix::from_stack(h, l, width, paths, stack)
}

fn check_weights(w: &NetworkWeights, f: &PathFeatureMatrix) -> Result<NetworkDims> {
    w.validate()?;
    let d = w.dims();
    if d.heads != f.head_count() || d.depth != f.depth() || d.input_width != f.input_width() {
        return Err(shape_err!(
            "weights are H={}, L={}, N0={}; features are H={}, L={}, N0={}",
            d.heads,
            d.depth,
            d.input_width,
            f.head_count(),
            f.depth(),
            f.input_width()
        ));
    }
    if f.paths().len() != crate::paths::path_count(d.heads, d.depth)? {
        return Err(shape_err!("sampling needs features for every path"));
    }
    Ok(d)
}

/// Readout row times values along `path`, before the `N^(-L/2)` factor,
/// together with the left partial products `a V^L ... V^(l+1)` for every `l`.
fn left_products(w: &NetworkWeights, path: &PathIndex) -> Vec<RowDVector<f64>> {
    let l = path.depth();
    let mut lefts = vec![RowDVector::zeros(0); l + 1];
    lefts[l] = w.readout.clone();
    for layer in (1..=l).rev() {
        lefts[layer - 1] = &lefts[layer] * &w.values[layer - 1][path.head_at(layer)];
    }
    lefts
}

fn path_weight_rows(w: &NetworkWeights, paths: &[PathIndex]) -> (Vec<Vec<RowDVector<f64>>>, DMatrix<f64>) {
    let d = w.dims();
    let s = (d.width as f64).powf(-(d.depth as f64) / 2.0);
    let lefts: Vec<_> = paths.iter().map(|p| left_products(w, p)).collect();
    let mut stacked = DMatrix::zeros(paths.len(), d.input_width);
    for (k, lp) in lefts.iter().enumerate() {
        stacked.set_row(k, &(&lp[0] * &w.projection * s));
    }
    (lefts, stacked)
}

/// Outputs on every example of `features`.
pub fn outputs(w: &NetworkWeights, features: &PathFeatureMatrix) -> Result<DVector<f64>> {
    let d = check_weights(w, features)?;
    let (_, wrows) = path_weight_rows(w, features.paths());
    Ok(outputs_from_rows(&wrows, features, d))
}

fn outputs_from_rows(wrows: &DMatrix<f64>, features: &PathFeatureMatrix, d: NetworkDims) -> DVector<f64> {
    let flat = DVector::from_iterator(wrows.len(), wrows.transpose().iter().copied());
    let c = 1.0 / ((features.paths().len() * d.width) as f64).sqrt();
    features.stack() * flat * c
}

/// Gradient of `sum_mu r_mu f_mu` with respect to every weight.
fn output_pullback(
    w: &NetworkWeights,
    features: &PathFeatureMatrix,
    lefts: &[Vec<RowDVector<f64>>],
    r: &DVector<f64>,
    d: NetworkDims,
) -> NetworkWeights {
    let n_paths = features.paths().len();
    let n0 = d.input_width;
    let c = 1.0 / ((n_paths * d.width) as f64).sqrt();
    let s = (d.width as f64).powf(-(d.depth as f64) / 2.0);
    let g_flat = features.stack().transpose() * r * c;
    let mut grad = NetworkWeights::zeros(d);
    for (k, path) in features.paths().iter().enumerate() {
        let g_w = RowDVector::from_iterator(n0, g_flat.rows(k * n0, n0).iter().copied());
        let veff = &lefts[k][0] * s;
        grad.projection += veff.transpose() * &g_w;
        // d/dVeff, then through Veff = s a V^L ... V^1.
        let g_veff = &g_w * w.projection.transpose() * s;
        let mut right = g_veff;
        for (layer, left) in lefts[k].iter().enumerate().skip(1) {
            let head = path.head_at(layer);
            grad.values[layer - 1][head] += left.transpose() * &right;
            right = &right * w.values[layer - 1][head].transpose();
        }
        grad.readout += right;
    }
    grad
}

fn axpy_weights(target: &mut NetworkWeights, a: f64, x: &NetworkWeights) {
    target.projection += &x.projection * a;
    for (t, v) in target.values.iter_mut().flatten().zip(x.values.iter().flatten()) {
        *t += v * a;
    }
    target.readout += &x.readout * a;
}

/// Log density of the Gibbs posterior up to a constant, and its gradient:
/// `-sum (f - y)^2 / (2 T) - |Theta|^2 / (2 sigma^2)`.
pub fn log_posterior(
    w: &NetworkWeights,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    temperature: f64,
    sigma2: f64,
) -> Result<(f64, NetworkWeights)> {
    log_density(w, features, labels, temperature, sigma2, false)
}

fn log_density(
    w: &NetworkWeights,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    temperature: f64,
    sigma2: f64,
    prior_only: bool,
) -> Result<(f64, NetworkWeights)> {
    let d = check_weights(w, features)?;
    if labels.len() != features.example_count() {
        return Err(shape_err!("{} labels for {} examples", labels.len(), features.example_count()));
    }
    let mut grad = w.clone();
    grad.projection *= -1.0 / sigma2;
    grad.values.iter_mut().flatten().for_each(|m| *m *= -1.0 / sigma2);
    grad.readout *= -1.0 / sigma2;
    let mut value = -w.norm_squared() / (2.0 * sigma2);
    if !prior_only {
        let (lefts, wrows) = path_weight_rows(w, features.paths());
        let f = outputs_from_rows(&wrows, features, d);
        let resid = f - labels;
        value -= resid.norm_squared() / (2.0 * temperature);
        let r = resid * (-1.0 / temperature);
        let g = output_pullback(w, features, &lefts, &r, d);
        axpy_weights(&mut grad, 1.0, &g);
    }
    if !value.is_finite() {
        return Err(Error::Numeric("log posterior is not finite".into()));
    }
    Ok((value, grad))
}

/// A differentiable log density over a flat parameter vector.
pub trait Target {
    fn dim(&self) -> usize;
    /// `(log density, gradient)`.
    fn log_density(&self, q: &[f64]) -> Result<(f64, Vec<f64>)>;
}

struct WeightTarget<'a> {
    dims: NetworkDims,
    features: &'a PathFeatureMatrix,
    labels: &'a DVector<f64>,
    cfg: &'a HmcConfig,
}

impl Target for WeightTarget<'_> {
    fn dim(&self) -> usize {
        self.dims.parameter_count()
    }

    fn log_density(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let w = NetworkWeights::from_flat(self.dims, q)?;
        let (v, g) = log_density(
            &w,
            self.features,
            self.labels,
            self.cfg.temperature,
            self.cfg.sigma2,
            self.cfg.prior_only,
        )?;
        Ok((v, g.to_flat()))
    }
}

/// State after a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn hamiltonian(&self) -> f64 {
        -self.log_density + 0.5 * self.p.iter().map(|v| v * v).sum::<f64>()
    }
}

/// `steps` leapfrog steps of size `eps` with identity mass.
pub fn leapfrog<T: Target + ?Sized>(target: &T, start: &PhasePoint, eps: f64, steps: usize) -> Result<PhasePoint> {
    let mut q = start.q.clone();
    let mut p = start.p.clone();
    let mut grad = start.grad.clone();
    let mut logd = start.log_density;
    for _ in 0..steps {
        p.iter_mut().zip(&grad).for_each(|(pi, gi)| *pi += 0.5 * eps * gi);
        q.iter_mut().zip(&p).for_each(|(qi, pi)| *qi += eps * pi);
        let (v, g) = target.log_density(&q)?;
        logd = v;
        grad = g;
        p.iter_mut().zip(&grad).for_each(|(pi, gi)| *pi += 0.5 * eps * gi);
    }
    Ok(PhasePoint {
        q,
        p,
        log_density: logd,
        grad,
    })
}

/// Energy error beyond which a trajectory counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Outcome of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub acceptance: f64,
    pub divergences: usize,
    pub potential: Vec<f64>,
    pub step_size: f64,
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        let log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// One HMC chain from `init`.
pub fn run_chain<T: Target + ?Sized>(
    target: &T,
    init: Vec<f64>,
    cfg: &HmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ChainOutput> {
    let (v, g) = target.log_density(&init)?;
    let mut current = PhasePoint {
        q: init,
        p: vec![0.0; target.dim()],
        log_density: v,
        grad: g,
    };
    let mut eps = cfg.step_size;
    let mut adapt = DualAveraging::new(eps, cfg.target_accept);
    let mut out = ChainOutput {
        draws: Vec::new(),
        acceptance: 0.0,
        divergences: 0,
        potential: Vec::with_capacity(cfg.samples),
        step_size: eps,
    };
    let mut accepted = 0usize;
    for it in 0..cfg.warmup + cfg.samples {
        let sampling = it >= cfg.warmup;
        if sampling && it == cfg.warmup && cfg.adapt && cfg.warmup > 0 {
            eps = adapt.final_step();
            out.step_size = eps;
        }
        for p in current.p.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let eps_now = if sampling && cfg.step_jitter > 0.0 {
            eps * (1.0 + cfg.step_jitter * (2.0 * rng.random::<f64>() - 1.0))
        } else {
            eps
        };
        let h0 = current.hamiltonian();
        let (accept_prob, proposal) = match leapfrog(target, &current, eps_now, cfg.leapfrog_steps) {
            Ok(prop) => {
                let dh = prop.hamiltonian() - h0;
                if !dh.is_finite() || dh > DIVERGENCE_THRESHOLD {
                    out.divergences += 1;
                    (0.0, None)
                } else {
                    ((-dh).exp().min(1.0), Some(prop))
                }
            }
            Err(_) => {
                out.divergences += 1;
                (0.0, None)
            }
        };
        let u: f64 = rng.random();
        if let Some(prop) = proposal {
            if u < accept_prob {
                current = prop;
                if sampling {
                    accepted += 1;
                }
            }
        }
        if !sampling && cfg.adapt {
            eps = adapt.update(accept_prob);
        }
        if sampling {
            out.potential.push(-current.log_density);
            if (it - cfg.warmup + 1).is_multiple_of(cfg.thin) {
                out.draws.push(current.q.clone());
            }
        }
    }
    out.acceptance = if cfg.samples > 0 {
        accepted as f64 / cfg.samples as f64
    } else {
        1.0
    };
    Ok(out)
}

/// Independent chains targeting the Gibbs posterior on the examples in
/// `features`; chain `c` uses stream `c` of the seeded generator.
pub fn hmc_sample(features: &PathFeatureMatrix, labels: &DVector<f64>, cfg: &HmcConfig) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let dims = NetworkDims {
        width: cfg.width,
        input_width: features.input_width(),
        heads: features.head_count(),
        depth: features.depth(),
    };
    if labels.len() != features.example_count() {
        return Err(shape_err!("{} labels for {} examples", labels.len(), features.example_count()));
    }
    let target = WeightTarget {
        dims,
        features,
        labels,
        cfg,
    };
    let chains: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let init = NetworkWeights::sample_prior(dims, cfg.sigma2, &mut rng).to_flat();
            run_chain(&target, init, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut samples = PosteriorSamples {
        dims,
        draws: Vec::new(),
        chain_of: Vec::new(),
        acceptance: Vec::new(),
        divergences: Vec::new(),
        potential: Vec::new(),
    };
    for (c, ch) in chains.into_iter().enumerate() {
        log::debug!("chain {c}: acceptance {:.3}, step {:.3e}", ch.acceptance, ch.step_size);
        for q in ch.draws {
            samples.draws.push(NetworkWeights::from_flat(dims, &q)?);
            samples.chain_of.push(c);
        }
        samples.acceptance.push(ch.acceptance);
        samples.divergences.push(ch.divergences);
        samples.potential.push(ch.potential);
    }
    Ok(samples)
}

/// `(1/N) mean_s Veff_pi Veff_pi'^T` with per-entry standard errors.
pub fn empirical_order_parameter_with_error(samples: &PosteriorSamples) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples".into()));
    }
    let n = samples.dims.width as f64;
    let per: Vec<DMatrix<f64>> = samples
        .draws
        .iter()
        .map(|w| {
            let v = crate::model::all_effective_weights(w)?;
            Ok(&v * v.transpose() / n)
        })
        .collect::<Result<_>>()?;
    let count = per.len() as f64;
    let mean = per.iter().fold(DMatrix::zeros(per[0].nrows(), per[0].ncols()), |a, m| a + m) / count;
    let se = if per.len() > 1 {
        let var = per
            .iter()
            .fold(DMatrix::zeros(mean.nrows(), mean.ncols()), |a, m| {
                a + (m - &mean).map(|x| x * x)
            })
            / (count - 1.0);
        var.map(|v| (v / count).sqrt())
    } else {
        DMatrix::from_element(mean.nrows(), mean.ncols(), f64::INFINITY)
    };
    Ok((mean, se))
}

pub fn empirical_order_parameter(samples: &PosteriorSamples) -> Result<DMatrix<f64>> {
    Ok(empirical_order_parameter_with_error(samples)?.0)
}

/// Monte Carlo mean and sample variance of the output on each test example.
pub fn empirical_predictor(
    samples: &PosteriorSamples,
    test: &PathFeatureMatrix,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples".into()));
    }
    let outs = samples
        .draws
        .iter()
        .map(|w| outputs(w, test))
        .collect::<Result<Vec<_>>>()?;
    let count = outs.len() as f64;
    let mean = outs.iter().fold(DVector::zeros(test.example_count()), |a, o| a + o) / count;
    let var = if outs.len() > 1 {
        outs.iter()
            .fold(DVector::zeros(test.example_count()), |a, o| a + (o - &mean).map(|x| x * x))
            / (count - 1.0)
    } else {
        DVector::from_element(test.example_count(), f64::NAN)
    };
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{column_softmax, network_output, ExampleAttention};

    fn tiny(seed: u64, h: usize, l: usize, n0: usize, t: usize, p: usize) -> (Vec<TokenSequence>, AttentionStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xs: Vec<_> = (0..p).map(|_| TokenSequence::new(m(n0, t)).unwrap()).collect();
        let examples = (0..p)
            .map(|_| {
                ExampleAttention::new(
                    (0..l)
                        .map(|_| (0..h).map(|_| column_softmax(&m(t, t)).unwrap()).collect())
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        (xs, AttentionStack { examples })
    }

    fn dims(n: usize, n0: usize, h: usize, l: usize) -> NetworkDims {
        NetworkDims {
            width: n,
            input_width: n0,
            heads: h,
            depth: l,
        }
    }

    #[test]
    fn feature_outputs_match_forward_pass() {
        let (xs, att) = tiny(1, 2, 2, 3, 4, 5);
        let f = features_from_attention(&xs, &att, ReadoutMode::SingleToken(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = NetworkWeights::sample_prior(dims(3, 3, 2, 2), 1.0, &mut rng);
        let out = outputs(&w, &f).unwrap();
        for (mu, x) in xs.iter().enumerate() {
            let direct = network_output(x, &w, &att.examples[mu], ReadoutMode::SingleToken(1)).unwrap();
            assert!((out[mu] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn log_posterior_examples() {
        let (xs, att) = tiny(3, 1, 1, 2, 3, 2);
        let f = features_from_attention(&xs, &att, ReadoutMode::AveragePool).unwrap();
        let d = dims(2, 2, 1, 1);
        let zero = NetworkWeights::zeros(d);
        let (v, _) = log_posterior(&zero, &f, &DVector::zeros(2), 0.5, 1.0).unwrap();
        assert_eq!(v, 0.0);
        // Prior only: |Theta|^2 = 2 sigma^2.
        let s2: f64 = 0.7;
        let mut w = NetworkWeights::zeros(d);
        w.projection[(0, 0)] = (2.0 * s2).sqrt();
        let (v, _) = log_density(&w, &f, &DVector::zeros(2), 0.5, s2, true).unwrap();
        assert!((v + 1.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (xs, att) = tiny(4, 2, 2, 3, 3, 2);
        let f = features_from_attention(&xs, &att, ReadoutMode::SingleToken(0)).unwrap();
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let d = dims(2, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = NetworkWeights::sample_prior(d, 1.0, &mut rng);
        let (_, g) = log_posterior(&w, &f, &y, 0.3, 1.2).unwrap();
        let g = g.to_flat();
        let q = w.to_flat();
        for i in 0..q.len() {
            let at = |s: f64| {
                let mut qq = q.clone();
                qq[i] += s;
                log_posterior(&NetworkWeights::from_flat(d, &qq).unwrap(), &f, &y, 0.3, 1.2)
                    .unwrap()
                    .0
            };
            let h = 1e-5;
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "param {i}: {fd} vs {}", g[i]);
        }
    }

    struct Gaussian2 {
        prec: DMatrix<f64>,
    }

    impl Target for Gaussian2 {
        fn dim(&self) -> usize {
            2
        }

        fn log_density(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
            let x = DVector::from_column_slice(q);
            let g = -(&self.prec * &x);
            Ok((0.5 * x.dot(&g), g.iter().copied().collect()))
        }
    }

    fn toy() -> (Gaussian2, DMatrix<f64>) {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.5]);
        (
            Gaussian2 {
                prec: cov.clone().try_inverse().unwrap(),
            },
            cov,
        )
    }

    fn point<T: Target>(t: &T, q: Vec<f64>, p: Vec<f64>) -> PhasePoint {
        let (v, g) = t.log_density(&q).unwrap();
        PhasePoint {
            q,
            p,
            log_density: v,
            grad: g,
        }
    }

    #[test]
    fn leapfrog_is_reversible_and_conserves_energy() {
        let (t, _) = toy();
        let start = point(&t, vec![0.3, -0.7], vec![1.1, 0.4]);
        let fwd = leapfrog(&t, &start, 0.05, 40).unwrap();
        let flipped = PhasePoint {
            p: fwd.p.iter().map(|v| -v).collect(),
            ..fwd.clone()
        };
        let back = leapfrog(&t, &flipped, 0.05, 40).unwrap();
        for (a, b) in back.q.iter().zip(&start.q) {
            assert!((a - b).abs() < 1e-10);
        }
        let fine = leapfrog(&t, &start, 1e-4, 1000).unwrap();
        let h0 = start.hamiltonian();
        assert!((fine.hamiltonian() - h0).abs() / h0.abs() < 1e-6);
    }

    #[test]
    fn zero_steps_always_accept() {
        let (t, _) = toy();
        let cfg = HmcConfig {
            leapfrog_steps: 0,
            warmup: 0,
            samples: 50,
            thin: 1,
            adapt: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = run_chain(&t, vec![0.2, 0.1], &cfg, &mut rng).unwrap();
        assert_eq!(out.acceptance, 1.0);
        assert!(out.draws.iter().all(|q| q == &vec![0.2, 0.1]));
    }

    #[test]
    fn toy_covariance_recovered() {
        let (t, cov) = toy();
        let cfg = HmcConfig {
            step_size: 0.1,
            leapfrog_steps: 10,
            warmup: 500,
            samples: 10_000,
            thin: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = run_chain(&t, vec![0.0, 0.0], &cfg, &mut rng).unwrap();
        let n = out.draws.len() as f64;
        let mean: Vec<f64> = (0..2).map(|i| out.draws.iter().map(|q| q[i]).sum::<f64>() / n).collect();
        for i in 0..2 {
            for j in 0..2 {
                let c = out.draws.iter().map(|q| (q[i] - mean[i]) * (q[j] - mean[j])).sum::<f64>() / (n - 1.0);
                assert!((c - cov[(i, j)]).abs() <= 0.05 * cov[(i, j)].abs(), "({i},{j}): {c}");
            }
        }
        assert!(out.acceptance > 0.5);
    }

    fn prior_run(chains: usize, samples: usize, seed: u64) -> PosteriorSamples {
        let (xs, att) = tiny(8, 2, 1, 3, 3, 4);
        let f = features_from_attention(&xs, &att, ReadoutMode::AveragePool).unwrap();
        let cfg = HmcConfig {
            width: 3,
            step_size: 0.3,
            leapfrog_steps: 8,
            warmup: 100,
            samples,
            thin: 2,
            chains,
            seed,
            prior_only: true,
            ..Default::default()
        };
        hmc_sample(&f, &DVector::zeros(4), &cfg).unwrap()
    }

    #[test]
    fn prior_moments_and_determinism() {
        let s = prior_run(2, 2000, 9);
        let mut second = 0.0;
        let mut count = 0.0;
        for w in &s.draws {
            for v in w.to_flat() {
                second += v * v;
                count += 1.0;
            }
        }
        assert!((second / count - 1.0).abs() < 0.05);
        let (u, se) = empirical_order_parameter_with_error(&s).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((u[(i, j)] - expect).abs() <= 3.5 * se[(i, j)] + 1e-12, "U[{i},{j}] = {}", u[(i, j)]);
            }
        }
        assert_eq!(u, u.transpose());
        assert_eq!(prior_run(2, 50, 9).draws, prior_run(2, 50, 9).draws);
        assert!(s.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn pooled_chains_agree() {
        let a = prior_run(2, 1000, 10);
        let b = prior_run(1, 2000, 11);
        let (ua, sa) = empirical_order_parameter_with_error(&a).unwrap();
        let (ub, sb) = empirical_order_parameter_with_error(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let tol = 4.0 * (sa[(i, j)].powi(2) + sb[(i, j)].powi(2)).sqrt();
                assert!((ua[(i, j)] - ub[(i, j)]).abs() <= tol);
            }
        }
    }

    #[test]
    fn scalar_order_parameter_by_hand() {
        let d = dims(1, 1, 1, 1);
        let w = NetworkWeights::from_flat(d, &[1.0, 1.0, 1.0]).unwrap();
        let s = PosteriorSamples {
            dims: d,
            draws: vec![w],
            chain_of: vec![0],
            acceptance: vec![1.0],
            divergences: vec![0],
            potential: vec![vec![]],
        };
        assert_eq!(empirical_order_parameter(&s).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn predictor_statistics_by_hand() {
        let (xs, att) = tiny(12, 1, 1, 1, 2, 1);
        let f = features_from_attention(&xs, &att, ReadoutMode::AveragePool).unwrap();
        let d = dims(1, 1, 1, 1);
        let base = outputs(&NetworkWeights::from_flat(d, &[1.0, 1.0, 1.0]).unwrap(), &f).unwrap()[0];
        // Readout scales the output linearly: outputs 0 and 2.
        let mk = |a: f64| NetworkWeights::from_flat(d, &[1.0, 1.0, a / base]).unwrap();
        let s = PosteriorSamples {
            dims: d,
            draws: vec![mk(0.0), mk(2.0)],
            chain_of: vec![0, 0],
            acceptance: vec![1.0],
            divergences: vec![0],
            potential: vec![vec![]],
        };
        let (m, v) = empirical_predictor(&s, &f).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12 && (v[0] - 2.0).abs() < 1e-12);
        let c = PosteriorSamples {
            draws: vec![mk(1.0), mk(1.0)],
            ..s
        };
        assert_eq!(empirical_predictor(&c, &f).unwrap().1[0], 0.0);
    }

    #[test]
    fn prior_predictive_mean_is_zero() {
        let s = prior_run(2, 1000, 13);
        let (xs, att) = tiny(8, 2, 1, 3, 3, 4);
        let f = features_from_attention(&xs, &att, ReadoutMode::AveragePool).unwrap();
        let (m, v) = empirical_predictor(&s, &f).unwrap();
        let n = s.len() as f64;
        for i in 0..4 {
            assert!(m[i].abs() <= 3.5 * (v[i] / n).sqrt());
        }
    }
}
