//! Order-parameter action, its analytic gradient and an Adam minimizer.
//!
//! The action over the hierarchy `U^(1) .. U^(L+1)` is
//! `L(U^(L+1)) + sum_l L(U^(l) (I_H (x) U^(l+1))^-1) + alpha E(U^(1))` with
//! `L(M) = tr(M)/sigma^2 - ln det M` and `E` the label negative
//! log-likelihood under the kernel `K(U^(1)) + T I`.
//!
//! Each `U^(l)` is stored as `F F^T` with `F` lower triangular and a softplus
//! diagonal, so every iterate is positive definite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernel::{kernel_pullback, total_kernel, PathFeatureMatrix};
use crate::linalg::{log_det, require_symmetric, shifted, spd_factor, symmetrize};
use crate::paths::{extend_order_parameter, path_count};

/// The nested order parameters, `layers[l - 1] = U^(l)` of size `H^(L+1-l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderParameterSet {
    head_count: usize,
    layers: Vec<DMatrix<f64>>,
}

impl OrderParameterSet {
    pub fn new(head_count: usize, layers: Vec<DMatrix<f64>>) -> Result<Self> {
        if head_count == 0 || layers.len() < 2 {
            return Err(Error::Domain(
                "order parameters need a head count and at least two levels".into(),
            ));
        }
        let depth = layers.len() - 1;
        for (i, u) in layers.iter().enumerate() {
            let size = path_count(head_count, depth - i)?;
            if u.shape() != (size, size) {
                return Err(shape_err!(
                    "U^({}) must be {size}x{size}, got {:?}",
                    i + 1,
                    u.shape()
                ));
            }
            require_symmetric(u, 1e-10, "order parameter")?;
        }
        Ok(Self { head_count, layers })
    }

    /// `U^(l) = sigma^(2(L+2-l)) I`, the infinite-width solution.
    pub fn gp_point(head_count: usize, depth: usize, sigma2: f64) -> Result<Self> {
        let layers = (1..=depth + 1)
            .map(|l| {
                let size = path_count(head_count, depth + 1 - l)?;
                Ok(DMatrix::identity(size, size) * sigma2.powi((depth + 2 - l) as i32))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(head_count, layers)
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// `U^(1)`, the matrix over full paths.
    pub fn u1(&self) -> &DMatrix<f64> {
        &self.layers[0]
    }

    /// `U^(l)`, one-based.
    pub fn get(&self, level: usize) -> &DMatrix<f64> {
        &self.layers[level - 1]
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }
}

/// `dS/dU^(l)` for every level, symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGradient {
    pub layers: Vec<DMatrix<f64>>,
}

impl ActionGradient {
    pub fn max_abs(&self) -> f64 {
        self.layers.iter().map(|g| g.amax()).fold(0.0, f64::max)
    }
}

fn default_grid() -> Vec<f64> {
    let mut grid = vec![1e-4];
    for b in 0..=3 {
        for a in [1.0, 5.0, 8.0] {
            grid.push(a * 10f64.powi(-b));
        }
    }
    grid
}

/// Minimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// `P / N`.
    pub alpha: f64,
    pub temperature: f64,
    /// Prior variance `sigma^2`.
    pub sigma2: f64,
    pub max_iterations: usize,
    /// Stop when `max |dS/dU| <= tolerance * (1 + |S|)`.
    pub tolerance: f64,
    pub learning_rates: Vec<f64>,
    pub warmup_iterations: usize,
    pub seed: u64,
    /// Scale of the Gaussian jitter added to the factors at initialization.
    pub jitter: f64,
    /// Independent starts with derived seeds; the lowest action wins.
    pub restarts: usize,
    /// Iterations without a new best action before the rate is cut.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            temperature: 0.01,
            sigma2: 1.0,
            max_iterations: 20_000,
            tolerance: 1e-7,
            learning_rates: default_grid(),
            warmup_iterations: 10,
            seed: 0,
            jitter: 1e-3,
            restarts: 1,
            plateau_patience: 100,
            plateau_factor: 0.5,
            min_learning_rate: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and >= 0");
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return bad("sigma2 must be finite and > 0");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1");
        }
        if self.learning_rates.is_empty()
            || self.learning_rates.iter().any(|r| !(r.is_finite() && *r > 0.0))
        {
            return bad("learning_rates must be a non-empty list of positive rates");
        }
        if !(self.tolerance >= 0.0 && self.jitter >= 0.0) {
            return bad("tolerance and jitter must be >= 0");
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Outcome of one warmup run in the learning-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTrial {
    pub learning_rate: f64,
    /// Energy after warmup (action when `alpha = 0`); `None` if the run failed.
    pub score: Option<f64>,
}

/// Per-iteration record of a minimization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub action: Vec<f64>,
    pub entropy: Vec<f64>,
    pub energy: Vec<f64>,
    pub gradient_norm: Vec<f64>,
    pub learning_rate_at: Vec<f64>,
    pub learning_rate: f64,
    pub converged: bool,
    pub sweep: Vec<RateTrial>,
    pub restart: usize,
}

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.action.len()
    }

    pub fn final_action(&self) -> Option<f64> {
        self.action.last().copied()
    }
}

/// `tr(M) / sigma^2 - ln det M`.
pub fn entropy_term(m: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    let f = spd_factor(m, "entropy argument")?;
    Ok(m.trace() / sigma2 - log_det(&f))
}

/// `(1/P) [ln det(K + T I) + Y^T (K + T I)^-1 Y]` with `K = K(U^(1))`.
pub fn energy_term(
    u1: &DMatrix<f64>,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    temperature: f64,
) -> Result<f64> {
    Ok(energy_parts(u1, features, labels, temperature, false)?.0)
}

fn energy_parts(
    u1: &DMatrix<f64>,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let p = features.example_count();
    if labels.len() != p {
        return Err(shape_err!("{} labels for {p} examples", labels.len()));
    }
    let k = total_kernel(u1, features)?;
    let a = shifted(&k.values, temperature);
    let chol = spd_factor(&a, "K + T I")
        .map_err(|e| Error::Numeric(format!("kernel system is singular: {e}")))?;
    let sol = chol.solve(labels);
    let pf = p as f64;
    let value = (log_det(&chol) + labels.dot(&sol)) / pf;
    if !value.is_finite() {
        return Err(Error::Numeric("energy term is not finite".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let inv = chol.inverse();
    let r = (inv - &sol * sol.transpose()) / pf;
    Ok((value, Some(symmetrize(&kernel_pullback(&r, features)?))))
}

struct Evaluation {
    action: f64,
    entropy: f64,
    energy: f64,
    grads: Option<Vec<DMatrix<f64>>>,
}

impl Evaluation {
    fn grad_inf(&self) -> f64 {
        self.grads
            .as_ref()
            .map(|g| g.iter().map(|m| m.amax()).fold(0.0, f64::max))
            .unwrap_or(f64::NAN)
    }
}

fn check_problem(
    head_count: usize,
    depth: usize,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
) -> Result<()> {
    if features.head_count() != head_count || features.depth() != depth {
        return Err(shape_err!(
            "order parameters are for H={head_count}, L={depth}; features for H={}, L={}",
            features.head_count(),
            features.depth()
        ));
    }
    if features.paths().len() != path_count(head_count, depth)? {
        return Err(shape_err!("the action needs features for every path"));
    }
    if labels.len() != features.example_count() {
        return Err(shape_err!(
            "{} labels for {} examples",
            labels.len(),
            features.example_count()
        ));
    }
    Ok(())
}

fn evaluate(
    layers: &[DMatrix<f64>],
    head_count: usize,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    cfg: &SolverConfig,
    want_grad: bool,
) -> Result<Evaluation> {
    let inv_s2 = 1.0 / cfg.sigma2;
    let depth = layers.len() - 1;
    let mut grads: Vec<DMatrix<f64>> = layers
        .iter()
        .map(|u| DMatrix::zeros(u.nrows(), u.ncols()))
        .collect();

    let top = &layers[depth];
    let top_f = spd_factor(top, "U^(L+1)")?;
    let mut entropy = top.trace() * inv_s2 - log_det(&top_f);
    if want_grad {
        grads[depth] += DMatrix::identity(top.nrows(), top.nrows()) * inv_s2 - top_f.inverse();
    }

    for l in 0..depth {
        let u = &layers[l];
        let b = extend_order_parameter(&layers[l + 1], head_count)?;
        let bf = spd_factor(&b, "lifted order parameter")?;
        let uf = spd_factor(u, "order parameter")?;
        let binv_u = bf.solve(u);
        entropy += binv_u.trace() * inv_s2 - log_det(&uf) + log_det(&bf);
        if want_grad {
            let binv = bf.inverse();
            grads[l] += &binv * inv_s2 - uf.inverse();
            let gb = &binv - &binv_u * &binv * inv_s2;
            let s = layers[l + 1].nrows();
            for h in 0..head_count {
                grads[l + 1] += gb.view((h * s, h * s), (s, s));
            }
        }
    }

    let (energy, energy_grad) = if cfg.alpha > 0.0 || !want_grad {
        energy_parts(&layers[0], features, labels, cfg.temperature, want_grad && cfg.alpha > 0.0)?
    } else {
        // Reported only; at alpha = 0 a failing energy must not stop the solve.
        (
            energy_parts(&layers[0], features, labels, cfg.temperature, false)
                .map(|v| v.0)
                .unwrap_or(f64::NAN),
            None,
        )
    };
    if let Some(eg) = energy_grad {
        grads[0] += eg * cfg.alpha;
    }
    let action = entropy + if cfg.alpha > 0.0 { cfg.alpha * energy } else { 0.0 };
    if !action.is_finite() {
        return Err(Error::Numeric("action is not finite".into()));
    }
    Ok(Evaluation {
        action,
        entropy,
        energy,
        grads: want_grad.then(|| grads.iter().map(symmetrize).collect()),
    })
}

/// Full action at `params`.
pub fn action(
    params: &OrderParameterSet,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_problem(params.head_count, params.depth(), features, labels)?;
    Ok(evaluate(&params.layers, params.head_count, features, labels, cfg, false)?.action)
}

/// Analytic `dS/dU^(l)` for every level.
pub fn action_gradient(
    params: &OrderParameterSet,
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<ActionGradient> {
    check_problem(params.head_count, params.depth(), features, labels)?;
    let e = evaluate(&params.layers, params.head_count, features, labels, cfg, true)?;
    Ok(ActionGradient {
        layers: e.grads.expect("gradient requested"),
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lower-triangular raw parameters of every level, packed column by column.
#[derive(Debug, Clone)]
struct Packing {
    sizes: Vec<usize>,
}

impl Packing {
    fn len(&self) -> usize {
        self.sizes.iter().map(|n| n * (n + 1) / 2).sum()
    }

    fn factors(&self, raw: &[f64]) -> Vec<DMatrix<f64>> {
        let mut k = 0;
        self.sizes
            .iter()
            .map(|&n| {
                let mut f = DMatrix::zeros(n, n);
                for j in 0..n {
                    for i in j..n {
                        f[(i, j)] = if i == j { softplus(raw[k]) } else { raw[k] };
                        k += 1;
                    }
                }
                f
            })
            .collect()
    }

    fn unpack(&self, raw: &[f64]) -> Vec<DMatrix<f64>> {
        self.factors(raw).iter().map(|f| f * f.transpose()).collect()
    }

    /// Raw parameters reproducing `layers` through Cholesky factors.
    fn pack(&self, layers: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        let mut raw = Vec::with_capacity(self.len());
        for u in layers {
            let l = spd_factor(u, "initial order parameter")?.l();
            let n = u.nrows();
            for j in 0..n {
                for i in j..n {
                    raw.push(if i == j { softplus_inv(l[(i, j)]) } else { l[(i, j)] });
                }
            }
        }
        Ok(raw)
    }

    /// Chain rule from symmetric `dS/dU` to the raw parameters.
    fn pull_back(&self, raw: &[f64], grads: &[DMatrix<f64>]) -> Vec<f64> {
        let factors = self.factors(raw);
        let mut out = Vec::with_capacity(raw.len());
        let mut k = 0;
        for (f, g) in factors.iter().zip(grads) {
            let df = g * f * 2.0;
            let n = f.nrows();
            for j in 0..n {
                for i in j..n {
                    out.push(if i == j { df[(i, j)] * sigmoid(raw[k]) } else { df[(i, j)] });
                    k += 1;
                }
            }
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, x: &[f64], g: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                xi - lr * mh / (vh.sqrt() + Self::EPS)
            })
            .collect()
    }
}

struct Problem<'a> {
    head_count: usize,
    packing: Packing,
    features: &'a PathFeatureMatrix,
    labels: &'a DVector<f64>,
    cfg: &'a SolverConfig,
}

struct RunOutcome {
    raw: Vec<f64>,
    last: Evaluation,
    trace: SolveTrace,
}

impl Problem<'_> {
    fn eval(&self, raw: &[f64]) -> Result<Evaluation> {
        let layers = self.packing.unpack(raw);
        evaluate(&layers, self.head_count, self.features, self.labels, self.cfg, true)
    }

    /// Adam from `raw0` at `lr`; plateau cuts only when `decay` is set.
    fn run(&self, raw0: &[f64], lr0: f64, iterations: usize, decay: bool) -> Result<RunOutcome> {
        let cfg = self.cfg;
        let mut raw = raw0.to_vec();
        let mut eval = self.eval(&raw)?;
        let mut adam = Adam::new(raw.len());
        let mut trace = SolveTrace {
            learning_rate: lr0,
            ..Default::default()
        };
        let mut lr = lr0;
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        for _ in 0..iterations {
            let gnorm = eval.grad_inf();
            trace.action.push(eval.action);
            trace.entropy.push(eval.entropy);
            trace.energy.push(eval.energy);
            trace.gradient_norm.push(gnorm);
            trace.learning_rate_at.push(lr);
            if gnorm <= cfg.tolerance * (1.0 + eval.action.abs()) {
                trace.converged = true;
                break;
            }
            let g = self.packing.pull_back(&raw, eval.grads.as_ref().expect("gradient"));
            let candidate = adam.step(&raw, &g, lr);
            match self.eval(&candidate) {
                Ok(e) => {
                    raw = candidate;
                    eval = e;
                }
                Err(err) => {
                    if !decay {
                        return Err(err);
                    }
                    lr *= cfg.plateau_factor;
                }
            }
            if decay {
                if eval.action < best {
                    best = eval.action;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.plateau_patience {
                        lr *= cfg.plateau_factor;
                        since_best = 0;
                    }
                }
                if lr < cfg.min_learning_rate {
                    break;
                }
            }
        }
        Ok(RunOutcome {
            raw,
            last: eval,
            trace,
        })
    }

    fn sweep(&self, raw0: &[f64]) -> (Option<f64>, Vec<RateTrial>) {
        let cfg = self.cfg;
        let mut trials = Vec::with_capacity(cfg.learning_rates.len());
        let mut best: Option<(f64, f64)> = None;
        for &lr in &cfg.learning_rates {
            let score = self
                .run(raw0, lr, cfg.warmup_iterations, false)
                .ok()
                .map(|o| if cfg.alpha > 0.0 { o.last.energy } else { o.last.action })
                .filter(|s| s.is_finite());
            if let Some(s) = score {
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, lr));
                }
            }
            trials.push(RateTrial {
                learning_rate: lr,
                score,
            });
        }
        (best.map(|b| b.1), trials)
    }
}

/// Minimize the action from the jittered infinite-width point.
pub fn solve_saddle(
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<(OrderParameterSet, SolveTrace)> {
    solve_saddle_from(features, labels, cfg, None)
}

/// Minimize the action starting from `init` (the jittered infinite-width point
/// when `None`). Restarts beyond the first always use fresh jitter.
pub fn solve_saddle_from(
    features: &PathFeatureMatrix,
    labels: &DVector<f64>,
    cfg: &SolverConfig,
    init: Option<&OrderParameterSet>,
) -> Result<(OrderParameterSet, SolveTrace)> {
    cfg.validate()?;
    if features.example_count() == 0 {
        return Err(Error::Domain("no training examples".into()));
    }
    let h = features.head_count();
    let l = features.depth();
    check_problem(h, l, features, labels)?;
    let gp = OrderParameterSet::gp_point(h, l, cfg.sigma2)?;
    let packing = Packing {
        sizes: gp.layers.iter().map(|u| u.nrows()).collect(),
    };
    let problem = Problem {
        head_count: h,
        packing,
        features,
        labels,
        cfg,
    };

    let mut best: Option<(OrderParameterSet, SolveTrace)> = None;
    let mut last_failure = None;
    for restart in 0..cfg.restarts {
        let raw0 = match (restart, init) {
            (0, Some(u)) => problem.packing.pack(&u.layers)?,
            _ => {
                let mut raw = problem.packing.pack(&gp.layers)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(restart as u64));
                for v in raw.iter_mut() {
                    *v += cfg.jitter * rng.sample::<f64, _>(StandardNormal);
                }
                raw
            }
        };
        let (lr, trials) = problem.sweep(&raw0);
        let Some(lr) = lr else {
            last_failure = Some(SolveTrace {
                sweep: trials,
                restart,
                ..Default::default()
            });
            continue;
        };
        log::debug!("restart {restart}: learning rate {lr}");
        let outcome = match problem.run(&raw0, lr, cfg.max_iterations, true) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("restart {restart} failed: {e}");
                last_failure = Some(SolveTrace {
                    sweep: trials,
                    restart,
                    ..Default::default()
                });
                continue;
            }
        };
        let mut trace = outcome.trace;
        trace.sweep = trials;
        trace.restart = restart;
        let params = OrderParameterSet::new(h, problem.packing.unpack(&outcome.raw))?;
        if best
            .as_ref()
            .is_none_or(|(_, t)| outcome.last.action < t.final_action().unwrap_or(f64::INFINITY))
        {
            best = Some((params, trace));
        }
    }
    best.ok_or_else(|| Error::Solver {
        message: "every learning rate in the grid diverged".into(),
        trace: Box::new(last_failure.unwrap_or_default()),
    })
}
