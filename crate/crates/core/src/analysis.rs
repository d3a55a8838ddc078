//! Reading the solved order parameter: head scores, pruning without
//! re-solving, and infinite-width versus finite-width comparisons.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernel::{kernel_task_alignment, total_kernel, AlignmentEntry, PathFeatureMatrix};
use crate::paths::{enumerate_paths, path_count, positions_through_head};
use crate::predictor::{evaluate_predictor, PredictorReport};
use crate::solver::{solve_saddle, OrderParameterSet, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    /// One-based.
    pub layer: usize,
    /// Zero-based; exported one-based.
    pub head: usize,
    pub raw: f64,
    pub normalized: f64,
}

/// Scores of every head, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub head_count: usize,
    pub depth: usize,
    pub scores: Vec<HeadScore>,
}

impl HeadScoreTable {
    pub fn get(&self, layer: usize, head: usize) -> &HeadScore {
        &self.scores[(layer - 1) * self.head_count + head]
    }

    /// Heads sorted by ascending raw score; ties keep layer-major order.
    pub fn ascending(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<&HeadScore> = self.scores.iter().collect();
        order.sort_by(|a, b| a.raw.total_cmp(&b.raw));
        order.iter().map(|s| (s.layer, s.head)).collect()
    }
}

/// `s(l, h) = sum over ordered pairs (pi, pi') through (l, h) of |U[pi, pi']|`.
pub fn head_scores(u1: &DMatrix<f64>, head_count: usize, depth: usize) -> Result<HeadScoreTable> {
    let n = path_count(head_count, depth)?;
    if u1.shape() != (n, n) {
        return Err(shape_err!("order parameter is {:?}, expected {n}x{n}", u1.shape()));
    }
    let paths = enumerate_paths(head_count, depth)?;
    let mut scores = Vec::with_capacity(depth * head_count);
    for layer in 1..=depth {
        for head in 0..head_count {
            let through = positions_through_head(layer, head, &paths, head_count, depth)?;
            let mut raw = 0.0;
            for &a in &through {
                for &b in &through {
                    raw += u1[(a, b)].abs();
                }
            }
            scores.push(HeadScore {
                layer,
                head,
                raw,
                normalized: 0.0,
            });
        }
    }
    let max = scores.iter().map(|s| s.raw).fold(0.0, f64::max);
    if max > 0.0 {
        for s in &mut scores {
            s.normalized = s.raw / max;
        }
    }
    Ok(HeadScoreTable {
        head_count,
        depth,
        scores,
    })
}

/// Path positions surviving the removal of `heads` (one-based layer, zero-based head).
pub fn surviving_paths(head_count: usize, depth: usize, heads: &[(usize, usize)]) -> Result<Vec<usize>> {
    let paths = enumerate_paths(head_count, depth)?;
    for &(layer, head) in heads {
        if layer == 0 || layer > depth || head >= head_count {
            return Err(Error::Index(format!("no head {head} at layer {layer}")));
        }
    }
    Ok(paths
        .iter()
        .enumerate()
        .filter(|(_, p)| heads.iter().all(|&(l, h)| p.head_at(l) != h))
        .map(|(i, _)| i)
        .collect())
}

/// Result of evaluating a pruned network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub removed: Vec<(usize, usize)>,
    pub kept_paths: Vec<usize>,
    pub report: PredictorReport,
}

/// Evaluate the predictor on the paths avoiding `heads`, reusing the solved
/// `U` entries. The kernel keeps the full model's `1/H^L` unless `renormalize`
/// is set, in which case it divides by the surviving path count.
#[allow(clippy::too_many_arguments)]
pub fn prune_heads(
    u1: &DMatrix<f64>,
    train: &PathFeatureMatrix,
    labels: &DVector<f64>,
    test: &PathFeatureMatrix,
    test_labels: Option<&DVector<f64>>,
    temperature: f64,
    heads: &[(usize, usize)],
    renormalize: bool,
) -> Result<PruneOutcome> {
    let kept = surviving_paths(train.head_count(), train.depth(), heads)?;
    if kept.is_empty() {
        return Err(Error::Domain("pruning removes every path".into()));
    }
    if u1.nrows() != train.paths().len() {
        return Err(shape_err!("order parameter does not match the feature path set"));
    }
    let sub_u = u1.select_rows(&kept).select_columns(&kept);
    let mut train_k = train.select_paths(&kept)?;
    let mut test_k = test.select_paths(&kept)?;
    if renormalize {
        train_k.set_normalization(kept.len() as f64);
        test_k.set_normalization(kept.len() as f64);
    }
    let report = evaluate_predictor(&sub_u, &train_k, labels, &test_k, test_labels, temperature)?;
    Ok(PruneOutcome {
        removed: heads.to_vec(),
        kept_paths: kept,
        report,
    })
}

/// Remove heads one at a time in ascending score order, cumulatively.
#[allow(clippy::too_many_arguments)]
pub fn ordered_pruning(
    u1: &DMatrix<f64>,
    train: &PathFeatureMatrix,
    labels: &DVector<f64>,
    test: &PathFeatureMatrix,
    test_labels: Option<&DVector<f64>>,
    temperature: f64,
    max_removed: usize,
) -> Result<Vec<PruneOutcome>> {
    let table = head_scores(u1, train.head_count(), train.depth())?;
    let mut removed = Vec::new();
    let mut out = Vec::new();
    for head in table.ascending().into_iter().take(max_removed) {
        removed.push(head);
        match prune_heads(u1, train, labels, test, test_labels, temperature, &removed, false) {
            Ok(o) => out.push(o),
            Err(Error::Domain(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub alpha: f64,
    pub u1: DMatrix<f64>,
    pub accuracy: Option<f64>,
    pub alignment: Vec<AlignmentEntry>,
    /// False for the closed-form infinite-width row.
    pub used_solver: bool,
}

/// Accuracy and kernel alignment for every `alpha`; `alpha = 0` uses the
/// closed form `sigma^(2(L+1)) I` and never runs the optimizer.
#[allow(clippy::too_many_arguments)]
pub fn gp_vs_renormalized(
    train: &PathFeatureMatrix,
    labels: &DVector<f64>,
    test: &PathFeatureMatrix,
    test_labels: &DVector<f64>,
    sigma2: f64,
    temperature: f64,
    alphas: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<ComparisonRow>> {
    if !alphas.contains(&0.0) {
        return Err(Error::Config("alpha grid must include 0".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let (u1, used_solver) = if alpha == 0.0 {
            let gp = OrderParameterSet::gp_point(train.head_count(), train.depth(), sigma2)?;
            (gp.u1().clone(), false)
        } else {
            let cfg = SolverConfig {
                alpha,
                sigma2,
                temperature,
                ..solver.clone()
            };
            let (u, _) = solve_saddle(train, labels, &cfg)?;
            (u.u1().clone(), true)
        };
        let report = evaluate_predictor(&u1, train, labels, test, Some(test_labels), temperature)?;
        let k = total_kernel(&u1, train)?;
        rows.push(ComparisonRow {
            alpha,
            alignment: kernel_task_alignment(&k.values, labels)?,
            u1,
            accuracy: report.accuracy,
            used_solver,
        });
    }
    Ok(rows)
}
