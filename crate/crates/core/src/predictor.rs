//! Bayesian predictor statistics, accuracy and temperature sweeps.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernel::{cross_kernel, kernel_diagonal, total_kernel, PathFeatureMatrix};
use crate::linalg::{require_symmetric, shifted, spd_factor, SpdFactor};
use crate::solver::{solve_saddle, SolverConfig};

fn factor_system(k: &DMatrix<f64>, temperature: f64) -> Result<SpdFactor> {
    require_symmetric(k, 1e-10, "train kernel")?;
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::Domain(format!("temperature must be >= 0, got {temperature}")));
    }
    spd_factor(&shifted(k, temperature), "K + T I").map_err(|e| match e {
        Error::Domain(m) => Error::Numeric(format!("{m}; use a positive temperature")),
        other => other,
    })
}

fn check_cross(k: &DMatrix<f64>, cross: &DMatrix<f64>) -> Result<()> {
    if cross.ncols() != k.nrows() {
        return Err(shape_err!(
            "test-train kernel has {} columns, train kernel is {}x{}",
            cross.ncols(),
            k.nrows(),
            k.ncols()
        ));
    }
    Ok(())
}

/// `k^T (K + T I)^-1 Y` for every test row of `cross` (`P* x P`).
pub fn predictor_mean(
    k: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    labels: &DVector<f64>,
    temperature: f64,
) -> Result<DVector<f64>> {
    check_cross(k, cross)?;
    if labels.len() != k.nrows() {
        return Err(shape_err!("{} labels for a {}x{} kernel", labels.len(), k.nrows(), k.nrows()));
    }
    let f = factor_system(k, temperature)?;
    Ok(cross * f.solve(labels))
}

/// `K_test - k^T (K + T I)^-1 k` for every test example.
pub fn predictor_variance(
    k: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    test_diagonal: &DVector<f64>,
    temperature: f64,
) -> Result<DVector<f64>> {
    check_cross(k, cross)?;
    if test_diagonal.len() != cross.nrows() {
        return Err(shape_err!("test diagonal length differs from test row count"));
    }
    let f = factor_system(k, temperature)?;
    let sol = f.solve(&cross.transpose());
    Ok(DVector::from_fn(cross.nrows(), |i, _| {
        test_diagonal[i] - cross.row(i).dot(&sol.column(i).transpose())
    }))
}

/// Fraction of examples whose mean has the sign of the label; `sign(0) = +1`.
pub fn classification_accuracy(means: &DVector<f64>, labels: &DVector<f64>) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::Domain("accuracy of an empty test set".into()));
    }
    if means.len() != labels.len() {
        return Err(shape_err!("{} predictions for {} labels", means.len(), labels.len()));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::Domain("labels must be +1 or -1".into()));
    }
    let hits = means
        .iter()
        .zip(labels.iter())
        .filter(|(&m, &y)| (if m >= 0.0 { 1.0 } else { -1.0 }) == y)
        .count();
    Ok(hits as f64 / means.len() as f64)
}

/// Predictions on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Present when test labels were supplied.
    pub labels: Option<Vec<f64>>,
    pub accuracy: Option<f64>,
    pub temperature: f64,
    pub width: Option<usize>,
    pub train_count: usize,
    pub alpha: Option<f64>,
}

/// Mean, variance and accuracy of the predictor with order parameter `u1`.
pub fn evaluate_predictor(
    u1: &DMatrix<f64>,
    train: &PathFeatureMatrix,
    labels: &DVector<f64>,
    test: &PathFeatureMatrix,
    test_labels: Option<&DVector<f64>>,
    temperature: f64,
) -> Result<PredictorReport> {
    let k = total_kernel(u1, train)?.values;
    let cross = cross_kernel(u1, test, train)?;
    let mean = predictor_mean(&k, &cross, labels, temperature)?;
    let variance = predictor_variance(&k, &cross, &kernel_diagonal(u1, test)?, temperature)?;
    let accuracy = test_labels
        .map(|y| classification_accuracy(&mean, y))
        .transpose()?;
    Ok(PredictorReport {
        mean: mean.iter().copied().collect(),
        variance: variance.iter().copied().collect(),
        labels: test_labels.map(|y| y.iter().copied().collect()),
        accuracy,
        temperature,
        width: None,
        train_count: train.example_count(),
        alpha: None,
    })
}

/// `{a 10^-b : a in {1, 2.5, 5, 7.5}, b in {1, 2}} + {1, 1.5}`, ascending.
pub fn default_temperature_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = [1.0, 2.0]
        .iter()
        .flat_map(|&b: &f64| [1.0, 2.5, 5.0, 7.5].map(|a| a * 10f64.powf(-b)))
        .chain([1.0, 1.5])
        .collect();
    grid.sort_by(f64::total_cmp);
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_temperature: f64,
    pub best_accuracy: f64,
    pub table: Vec<SweepRow>,
}

/// Solve and evaluate at every temperature; best validation accuracy wins,
/// ties go to the larger temperature. Failed grid points are recorded and
/// skipped.
pub fn temperature_sweep(
    train: &PathFeatureMatrix,
    labels: &DVector<f64>,
    validation: &PathFeatureMatrix,
    validation_labels: &DVector<f64>,
    grid: &[f64],
    solver: &SolverConfig,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("temperature grid is empty".into()));
    }
    let run = |&t: &f64| -> SweepRow {
        let cfg = SolverConfig {
            temperature: t,
            ..solver.clone()
        };
        let outcome = solve_saddle(train, labels, &cfg).and_then(|(u, _)| {
            evaluate_predictor(u.u1(), train, labels, validation, Some(validation_labels), t)
        });
        match outcome {
            Ok(r) => SweepRow {
                temperature: t,
                accuracy: r.accuracy,
                error: None,
            },
            Err(e) => {
                log::warn!("temperature {t}: {e}");
                SweepRow {
                    temperature: t,
                    accuracy: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let table: Vec<SweepRow> = grid.par_iter().map(run).collect();
    let best = table
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (a, r.temperature)))
        .reduce(|best, cur| {
            if cur.0 > best.0 || (cur.0 == best.0 && cur.1 > best.1) {
                cur
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Numeric("every temperature in the sweep failed".into()))?;
    Ok(SweepResult {
        best_temperature: best.1,
        best_accuracy: best.0,
        table,
    })
}
