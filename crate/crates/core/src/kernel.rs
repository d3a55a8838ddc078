//! Path-pair kernels and the order-parameter weighted total kernel.
//!
//! Everything is assembled from the stacked feature matrix `F` of shape
//! `P x (n_paths * N_0)`, whose row `mu` concatenates the scaled attentioned
//! inputs `xi^(pi, mu) / sqrt(N_0)` of every path. The total kernel is
//! `F (U (x) I) F^T / norm`, so no path-pair `P x P` block is ever held in
//! memory while building it. Reductions run in a fixed order and give the same
//! bits on every run.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{require_symmetric, sorted_symmetric_eigen};
use crate::model::{attentioned_inputs, AttentionHeads, ReadoutMode, TokenSequence};
use crate::paths::{enumerate_paths, path_count, PathIndex};

/// Scaled attentioned inputs for a set of paths and examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFeatureMatrix {
    head_count: usize,
    depth: usize,
    input_width: usize,
    paths: Vec<PathIndex>,
    /// Divisor of the total kernel; `H^L` of the full model.
    normalization: f64,
    stack: DMatrix<f64>,
}

impl PathFeatureMatrix {
    /// Build from a stacked `P x (paths.len() * input_width)` matrix.
    pub fn from_stack(
        head_count: usize,
        depth: usize,
        input_width: usize,
        paths: Vec<PathIndex>,
        stack: DMatrix<f64>,
    ) -> Result<Self> {
        if stack.ncols() != paths.len() * input_width {
            return Err(shape_err!(
                "feature stack has {} columns, expected {} paths x {} width",
                stack.ncols(),
                paths.len(),
                input_width
            ));
        }
        if paths.iter().any(|p| p.depth() != depth) {
            return Err(shape_err!("all paths must have depth {depth}"));
        }
        if stack.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite path features".into()));
        }
        Ok(Self {
            head_count,
            depth,
            input_width,
            paths,
            normalization: path_count(head_count, depth)? as f64,
            stack,
        })
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn paths(&self) -> &[PathIndex] {
        &self.paths
    }

    pub fn example_count(&self) -> usize {
        self.stack.nrows()
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn set_normalization(&mut self, value: f64) {
        self.normalization = value;
    }

    pub fn stack(&self) -> &DMatrix<f64> {
        &self.stack
    }

    /// Position of `path` in this matrix's path list.
    pub fn path_position(&self, path: &PathIndex) -> Result<usize> {
        self.paths
            .iter()
            .position(|p| p == path)
            .ok_or_else(|| Error::Index(format!("path {path} not in feature set")))
    }

    /// Feature vector of one path on one example.
    pub fn feature(&self, path_pos: usize, example: usize) -> DVector<f64> {
        let w = self.input_width;
        DVector::from_iterator(w, self.stack.view((example, path_pos * w), (1, w)).iter().copied())
    }

    /// `P x N_0` block of one path.
    pub fn block(&self, path_pos: usize) -> DMatrix<f64> {
        let w = self.input_width;
        self.stack.columns(path_pos * w, w).into_owned()
    }

    /// Keep only the listed path positions; normalization is unchanged.
    pub fn select_paths(&self, positions: &[usize]) -> Result<Self> {
        let w = self.input_width;
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.paths.len()) {
            return Err(Error::Index(format!("path position {bad} out of range")));
        }
        let mut stack = DMatrix::zeros(self.example_count(), positions.len() * w);
        for (k, &p) in positions.iter().enumerate() {
            stack
                .columns_mut(k * w, w)
                .copy_from(&self.stack.columns(p * w, w));
        }
        Ok(Self {
            paths: positions.iter().map(|&p| self.paths[p].clone()).collect(),
            stack,
            ..self.clone_header()
        })
    }

    /// Rows `range` as a new matrix.
    pub fn select_examples(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.example_count() || range.start > range.end {
            return Err(Error::Index(format!("example range {range:?} out of bounds")));
        }
        Ok(Self {
            paths: self.paths.clone(),
            stack: self.stack.rows(range.start, range.len()).into_owned(),
            ..self.clone_header()
        })
    }

    /// Append the examples of `other` below those of `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.paths != other.paths || self.input_width != other.input_width {
            return Err(shape_err!("cannot concatenate features with different paths or widths"));
        }
        let mut stack = DMatrix::zeros(self.example_count() + other.example_count(), self.stack.ncols());
        stack.rows_mut(0, self.example_count()).copy_from(&self.stack);
        stack
            .rows_mut(self.example_count(), other.example_count())
            .copy_from(&other.stack);
        Ok(Self {
            paths: self.paths.clone(),
            stack,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Self {
        Self {
            head_count: self.head_count,
            depth: self.depth,
            input_width: self.input_width,
            paths: Vec::new(),
            normalization: self.normalization,
            stack: DMatrix::zeros(0, 0),
        }
    }

    /// `F (U (x) I)`: every path block replaced by the `U`-weighted sum of blocks.
    fn mixed(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.paths.len();
        if u.shape() != (n, n) {
            return Err(shape_err!(
                "order parameter is {:?}, feature set has {n} paths",
                u.shape()
            ));
        }
        let w = self.input_width;
        let mut out = DMatrix::zeros(self.example_count(), n * w);
        for a in 0..n {
            let mut target = out.columns_mut(a * w, w);
            for b in 0..n {
                let coef = u[(a, b)];
                if coef != 0.0 {
                    target += self.stack.columns(b * w, w) * coef;
                }
            }
        }
        Ok(out)
    }
}

/// Attentioned inputs of every path on every example, scaled by `1/sqrt(N_0)`.
pub fn compute_features(
    inputs: &[TokenSequence],
    heads: &AttentionHeads,
    mode: ReadoutMode,
    parallel: bool,
) -> Result<PathFeatureMatrix> {
    if inputs.is_empty() {
        return Err(Error::Domain("dataset is empty".into()));
    }
    let h = heads.head_count();
    let l = heads.depth();
    let width = heads.input_width();
    let paths = enumerate_paths(h, l)?;
    let scale = 1.0 / (width as f64).sqrt();
    let row = |x: &TokenSequence| -> Result<Vec<f64>> {
        let att = heads.attend(x)?;
        let xi = attentioned_inputs(x, &att, mode)?;
        Ok(xi.iter().map(|v| v * scale).collect())
    };
    let rows: Vec<Vec<f64>> = if parallel {
        inputs.par_iter().map(row).collect::<Result<_>>()?
    } else {
        inputs.iter().map(row).collect::<Result<_>>()?
    };
    let ncols = paths.len() * width;
    let stack = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    PathFeatureMatrix::from_stack(h, l, width, paths, stack)
}

/// `C_{pi pi'}`: entry `(mu, nu)` is `f_pi(mu) . f_pi'(nu)`.
pub fn path_pair_kernel(
    features: &PathFeatureMatrix,
    left: &PathIndex,
    right: &PathIndex,
) -> Result<DMatrix<f64>> {
    let a = features.path_position(left)?;
    let b = features.path_position(right)?;
    Ok(features.block(a) * features.block(b).transpose())
}

/// A symmetric kernel matrix with the order parameter that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub order_parameter: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

/// `K = (1/H^L) sum_{pi, pi'} U[pi, pi'] C_{pi pi'}`.
pub fn total_kernel(u: &DMatrix<f64>, features: &PathFeatureMatrix) -> Result<KernelMatrix> {
    require_symmetric(u, 1e-12, "order parameter")?;
    let mixed = features.mixed(u)?;
    let mut values = mixed * features.stack.transpose() / features.normalization;
    // Exact symmetry; the two triangles differ only by rounding.
    for i in 0..values.nrows() {
        for j in 0..i {
            let v = 0.5 * (values[(i, j)] + values[(j, i)]);
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        values,
        order_parameter: u.clone(),
    })
}

/// Kernel rows between `left` examples and `right` examples under the same `U`.
pub fn cross_kernel(
    u: &DMatrix<f64>,
    left: &PathFeatureMatrix,
    right: &PathFeatureMatrix,
) -> Result<DMatrix<f64>> {
    if left.paths != right.paths {
        return Err(shape_err!("cross kernel needs matching path sets"));
    }
    Ok(left.mixed(u)? * right.stack.transpose() / left.normalization)
}

/// Diagonal `K(x_mu, x_mu)` for every example.
pub fn kernel_diagonal(u: &DMatrix<f64>, features: &PathFeatureMatrix) -> Result<DVector<f64>> {
    let mixed = features.mixed(u)?;
    Ok(DVector::from_fn(features.example_count(), |i, _| {
        mixed.row(i).dot(&features.stack.row(i)) / features.normalization
    }))
}

/// Gradient of `sum_{mu nu} R[mu, nu] K[mu, nu]` with respect to `U`:
/// entry `(pi, pi')` is `<F_pi, R F_pi'> / norm`.
pub fn kernel_pullback(r: &DMatrix<f64>, features: &PathFeatureMatrix) -> Result<DMatrix<f64>> {
    let p = features.example_count();
    if r.shape() != (p, p) {
        return Err(shape_err!("pullback weight must be {p}x{p}"));
    }
    let n = features.paths.len();
    let w = features.input_width;
    let rf = r * &features.stack;
    let mut g = DMatrix::zeros(n, n);
    for a in 0..n {
        let fa = features.stack.columns(a * w, w);
        for b in 0..n {
            g[(a, b)] = fa.dot(&rf.columns(b * w, w)) / features.normalization;
        }
    }
    Ok(g)
}

/// One principal component of a kernel and its overlap with the labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentEntry {
    pub eigenvalue: f64,
    /// `|v . Y| / (|v| |Y|)`.
    pub overlap: f64,
}

/// Principal components sorted by descending eigenvalue, with label overlaps.
pub fn kernel_task_alignment(k: &DMatrix<f64>, labels: &DVector<f64>) -> Result<Vec<AlignmentEntry>> {
    require_symmetric(k, 1e-10, "kernel")?;
    if labels.len() != k.nrows() {
        return Err(shape_err!(
            "label vector has length {}, kernel is {}x{}",
            labels.len(),
            k.nrows(),
            k.ncols()
        ));
    }
    let ynorm = labels.norm();
    if ynorm == 0.0 {
        return Err(Error::Domain("label vector is zero".into()));
    }
    let (values, vectors) = sorted_symmetric_eigen(k)?;
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, eigenvalue)| {
            let v = vectors.column(i);
            AlignmentEntry {
                eigenvalue,
                overlap: v.dot(labels).abs() / (v.norm() * ynorm),
            }
        })
        .collect())
}
