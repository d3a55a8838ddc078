//! Forward pass of the linear-value multi-head attention network.
//!
//! Two formulations are provided and must agree: the layer-wise recursion
//! ([`layerwise_output`]) and the decomposition into attention paths
//! ([`network_output`]), where each path contributes its effective weights
//! applied to its attentioned input.
//!
//! Attention matrices are column-stochastic: `omega[(s, t)]` is the softmax
//! over the key token `s` for a fixed query token `t`. Logits are always
//! computed from the bare input tokens.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::paths::{path_count, PathIndex};

/// Input tokens as columns: `width x token_count`. Token 0 is the
/// beginning-of-sequence token when the task uses one.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    values: DMatrix<f64>,
}

impl TokenSequence {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("token sequence has non-finite entries".into()));
        }
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(shape_err!("token sequence must be non-empty"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.nrows()
    }

    pub fn token_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn token(&self, t: usize) -> DVector<f64> {
        self.values.column(t).into_owned()
    }
}

/// How the pre-softmax logit between two tokens is formed.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionLogitSpec {
    /// `x_s^T K^T Q x_t / (width * sqrt(G))` with `Q, K` of shape `G x width`.
    QueryKey { query: DMatrix<f64>, key: DMatrix<f64> },
    /// `beta * x_s^T W x_t` with `W = K^T Q` given directly.
    Direct { w: DMatrix<f64>, beta: f64 },
}

impl AttentionLogitSpec {
    pub fn direct(w: DMatrix<f64>, beta: f64) -> Result<Self> {
        let spec = Self::Direct { w, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn query_key(query: DMatrix<f64>, key: DMatrix<f64>) -> Result<Self> {
        let spec = Self::QueryKey { query, key };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Direct { w, beta } => {
                if !w.is_square() {
                    return Err(shape_err!("direct logit matrix must be square"));
                }
                if !(beta.is_finite() && *beta > 0.0) {
                    return Err(Error::Config(format!("hardness beta must be finite and > 0, got {beta}")));
                }
            }
            Self::QueryKey { query, key } => {
                if query.shape() != key.shape() || query.nrows() == 0 {
                    return Err(shape_err!(
                        "query {:?} and key {:?} must share a non-empty G x width shape",
                        query.shape(),
                        key.shape()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Token width this spec expects.
    pub fn input_width(&self) -> usize {
        match self {
            Self::Direct { w, .. } => w.nrows(),
            Self::QueryKey { query, .. } => query.ncols(),
        }
    }

    /// The `T x T` logit matrix, entry `(s, t)` for key `s` and query `t`.
    pub fn logits(&self, x0: &TokenSequence) -> Result<DMatrix<f64>> {
        let x = x0.values();
        if x.nrows() != self.input_width() {
            return Err(shape_err!(
                "attention spec expects width {}, tokens have width {}",
                self.input_width(),
                x.nrows()
            ));
        }
        Ok(match self {
            Self::Direct { w, beta } => (x.transpose() * (w * x)) * *beta,
            Self::QueryKey { query, key } => {
                let g = query.nrows() as f64;
                let scale = 1.0 / (x.nrows() as f64 * g.sqrt());
                let kx = key * x;
                let qx = query * x;
                (kx.transpose() * qx) * scale
            }
        })
    }
}

/// Column-wise softmax with per-column max subtraction.
pub fn column_softmax(logits: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite attention logits".into()));
    }
    let mut out = logits.clone();
    for mut col in out.column_iter_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total: f64 = col.iter().sum();
        col.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Softmax attention matrix for one head on one input.
pub fn attention_matrix(x0: &TokenSequence, spec: &AttentionLogitSpec) -> Result<DMatrix<f64>> {
    column_softmax(&spec.logits(x0)?)
}

/// Logit specs for every `(layer, head)`, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeads {
    specs: Vec<Vec<AttentionLogitSpec>>,
}

impl AttentionHeads {
    pub fn new(specs: Vec<Vec<AttentionLogitSpec>>) -> Result<Self> {
        let heads = specs.first().map(Vec::len).unwrap_or(0);
        if heads == 0 {
            return Err(Error::Config("need at least one layer with one head".into()));
        }
        if specs.iter().any(|layer| layer.len() != heads) {
            return Err(Error::Config("every layer must have the same head count".into()));
        }
        let width = specs[0][0].input_width();
        for spec in specs.iter().flatten() {
            spec.validate()?;
            if spec.input_width() != width {
                return Err(shape_err!("all heads must share one token width"));
            }
        }
        Ok(Self { specs })
    }

    pub fn depth(&self) -> usize {
        self.specs.len()
    }

    pub fn head_count(&self) -> usize {
        self.specs[0].len()
    }

    pub fn input_width(&self) -> usize {
        self.specs[0][0].input_width()
    }

    /// Spec at `layer` (one-based) and `head` (zero-based).
    pub fn get(&self, layer: usize, head: usize) -> &AttentionLogitSpec {
        &self.specs[layer - 1][head]
    }

    pub fn layers(&self) -> &[Vec<AttentionLogitSpec>] {
        &self.specs
    }

    /// Attention matrices of every head on one input.
    pub fn attend(&self, x0: &TokenSequence) -> Result<ExampleAttention> {
        let omegas = self
            .specs
            .iter()
            .map(|layer| layer.iter().map(|s| attention_matrix(x0, s)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(ExampleAttention { omegas })
    }

    /// Attention for a whole dataset. Output order follows the input order
    /// regardless of scheduling, so parallel and serial runs are identical.
    pub fn attend_all(&self, inputs: &[TokenSequence], parallel: bool) -> Result<AttentionStack> {
        let examples = if parallel {
            inputs.par_iter().map(|x| self.attend(x)).collect::<Result<Vec<_>>>()?
        } else {
            inputs.iter().map(|x| self.attend(x)).collect::<Result<Vec<_>>>()?
        };
        Ok(AttentionStack { examples })
    }
}

/// Attention matrices for one example, indexed `[layer - 1][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleAttention {
    omegas: Vec<Vec<DMatrix<f64>>>,
}

impl ExampleAttention {
    pub fn new(omegas: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        let t = omegas
            .first()
            .and_then(|l| l.first())
            .map(|m| m.nrows())
            .ok_or_else(|| Error::Config("empty attention set".into()))?;
        let h = omegas[0].len();
        for layer in &omegas {
            if layer.len() != h {
                return Err(Error::Config("ragged head count in attention set".into()));
            }
            if layer.iter().any(|m| m.shape() != (t, t)) {
                return Err(shape_err!("attention matrices must all be {t}x{t}"));
            }
        }
        Ok(Self { omegas })
    }

    pub fn depth(&self) -> usize {
        self.omegas.len()
    }

    pub fn head_count(&self) -> usize {
        self.omegas[0].len()
    }

    pub fn token_count(&self) -> usize {
        self.omegas[0][0].nrows()
    }

    pub fn get(&self, layer: usize, head: usize) -> &DMatrix<f64> {
        &self.omegas[layer - 1][head]
    }
}

/// Attention sets for every example of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub examples: Vec<ExampleAttention>,
}

/// Token reduction at readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    SingleToken(usize),
    AveragePool,
}

impl ReadoutMode {
    /// Readout weights over tokens: a one-hot or the uniform average.
    pub fn token_weights(&self, token_count: usize) -> Result<DVector<f64>> {
        match *self {
            ReadoutMode::SingleToken(t) => {
                if t >= token_count {
                    return Err(Error::Index(format!(
                        "readout token {t} outside [0, {token_count})"
                    )));
                }
                let mut e = DVector::zeros(token_count);
                e[t] = 1.0;
                Ok(e)
            }
            ReadoutMode::AveragePool => Ok(DVector::from_element(
                token_count,
                1.0 / token_count as f64,
            )),
        }
    }
}

/// Token mixing vectors `Omega^(1)h1 ... Omega^(L)hL r` for every path in
/// canonical order, as the columns of a `T x H^L` matrix.
pub fn path_token_weights(omegas: &ExampleAttention, mode: ReadoutMode) -> Result<DMatrix<f64>> {
    let t = omegas.token_count();
    let h = omegas.head_count();
    let mut current = vec![mode.token_weights(t)?];
    for layer in (1..=omegas.depth()).rev() {
        let mut next = Vec::with_capacity(current.len() * h);
        for head in 0..h {
            let omega = omegas.get(layer, head);
            next.extend(current.iter().map(|r| omega * r));
        }
        current = next;
    }
    Ok(DMatrix::from_columns(&current))
}

/// Attentioned inputs for all paths, as the columns of a `width x H^L` matrix.
pub fn attentioned_inputs(
    x0: &TokenSequence,
    omegas: &ExampleAttention,
    mode: ReadoutMode,
) -> Result<DMatrix<f64>> {
    if omegas.token_count() != x0.token_count() {
        return Err(shape_err!(
            "attention covers {} tokens, input has {}",
            omegas.token_count(),
            x0.token_count()
        ));
    }
    Ok(x0.values() * path_token_weights(omegas, mode)?)
}

/// Attentioned input of a single path.
pub fn attentioned_input(
    x0: &TokenSequence,
    omegas: &ExampleAttention,
    path: &PathIndex,
    mode: ReadoutMode,
) -> Result<DVector<f64>> {
    if path.depth() > omegas.depth() {
        return Err(Error::Config(format!(
            "path has {} layers, attention set only {}",
            path.depth(),
            omegas.depth()
        )));
    }
    if omegas.token_count() != x0.token_count() {
        return Err(shape_err!("attention and input token counts differ"));
    }
    let mut r = mode.token_weights(x0.token_count())?;
    for layer in (1..=path.depth()).rev() {
        let head = path.head_at(layer);
        if head >= omegas.head_count() {
            return Err(Error::Index(format!("head {head} missing at layer {layer}")));
        }
        r = omegas.get(layer, head) * r;
    }
    Ok(x0.values() * r)
}

/// Shape of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    /// Hidden width `N`.
    pub width: usize,
    /// Input token width `N_0`.
    pub input_width: usize,
    pub heads: usize,
    pub depth: usize,
}

impl NetworkDims {
    pub fn parameter_count(&self) -> usize {
        let n = self.width;
        n * self.input_width + self.depth * self.heads * n * n + n
    }
}

/// Input projection, per-layer-head value matrices and the readout row.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub projection: DMatrix<f64>,
    /// Indexed `[layer - 1][head]`.
    pub values: Vec<Vec<DMatrix<f64>>>,
    pub readout: RowDVector<f64>,
}

impl NetworkWeights {
    pub fn zeros(dims: NetworkDims) -> Self {
        let n = dims.width;
        Self {
            projection: DMatrix::zeros(n, dims.input_width),
            values: vec![vec![DMatrix::zeros(n, n); dims.heads]; dims.depth],
            readout: RowDVector::zeros(n),
        }
    }

    /// Draw every entry from `N(0, sigma2)`.
    pub fn sample_prior<R: Rng + ?Sized>(dims: NetworkDims, sigma2: f64, rng: &mut R) -> Self {
        let sd = sigma2.sqrt();
        let mut draw = || sd * rng.sample::<f64, _>(StandardNormal);
        let mut w = Self::zeros(dims);
        w.projection.iter_mut().for_each(|v| *v = draw());
        for m in w.values.iter_mut().flatten() {
            m.iter_mut().for_each(|v| *v = draw());
        }
        w.readout.iter_mut().for_each(|v| *v = draw());
        w
    }

    pub fn dims(&self) -> NetworkDims {
        NetworkDims {
            width: self.projection.nrows(),
            input_width: self.projection.ncols(),
            heads: self.values.first().map(Vec::len).unwrap_or(0),
            depth: self.values.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.depth == 0 || d.heads == 0 {
            return Err(shape_err!("weights need at least one layer and one head"));
        }
        if self.readout.len() != d.width {
            return Err(shape_err!(
                "readout has length {}, width is {}",
                self.readout.len(),
                d.width
            ));
        }
        for layer in &self.values {
            if layer.len() != d.heads {
                return Err(shape_err!("ragged head count in value weights"));
            }
            if layer.iter().any(|m| m.shape() != (d.width, d.width)) {
                return Err(shape_err!("value matrices must be {0}x{0}", d.width));
            }
        }
        Ok(())
    }

    /// Squared Frobenius norm of all parameters.
    pub fn norm_squared(&self) -> f64 {
        self.projection.norm_squared()
            + self.values.iter().flatten().map(|m| m.norm_squared()).sum::<f64>()
            + self.readout.norm_squared()
    }

    /// Flatten in the order projection, values (layer-major), readout;
    /// each matrix column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims().parameter_count());
        out.extend(self.projection.iter());
        for m in self.values.iter().flatten() {
            out.extend(m.iter());
        }
        out.extend(self.readout.iter());
        out
    }

    pub fn from_flat(dims: NetworkDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.parameter_count() {
            return Err(shape_err!(
                "expected {} parameters, got {}",
                dims.parameter_count(),
                flat.len()
            ));
        }
        let n = dims.width;
        let mut offset = 0;
        let mut take = |len: usize| {
            let s = &flat[offset..offset + len];
            offset += len;
            s
        };
        let projection = DMatrix::from_column_slice(n, dims.input_width, take(n * dims.input_width));
        let values = (0..dims.depth)
            .map(|_| {
                (0..dims.heads)
                    .map(|_| DMatrix::from_column_slice(n, n, take(n * n)))
                    .collect()
            })
            .collect();
        let readout = RowDVector::from_row_slice(take(n));
        Ok(Self {
            projection,
            values,
            readout,
        })
    }
}

/// `N^(-L/2) a V^(L)hL ... V^(1)h1` for one path.
pub fn effective_weights(weights: &NetworkWeights, path: &PathIndex) -> Result<RowDVector<f64>> {
    weights.validate()?;
    let dims = weights.dims();
    if path.depth() != dims.depth {
        return Err(shape_err!(
            "path depth {} differs from network depth {}",
            path.depth(),
            dims.depth
        ));
    }
    let mut row = weights.readout.clone();
    for layer in (1..=dims.depth).rev() {
        let head = path.head_at(layer);
        if head >= dims.heads {
            return Err(Error::Index(format!("head {head} out of range")));
        }
        row *= &weights.values[layer - 1][head];
    }
    Ok(row * (dims.width as f64).powf(-(dims.depth as f64) / 2.0))
}

/// Effective weights of every path, canonical order, as rows of an `H^L x N` matrix.
pub fn all_effective_weights(weights: &NetworkWeights) -> Result<DMatrix<f64>> {
    weights.validate()?;
    let dims = weights.dims();
    let paths = crate::paths::enumerate_paths(dims.heads, dims.depth)?;
    let rows = paths
        .iter()
        .map(|p| effective_weights(weights, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_rows(&rows))
}

fn check_forward_dims(
    x0: &TokenSequence,
    weights: &NetworkWeights,
    omegas: &ExampleAttention,
) -> Result<NetworkDims> {
    weights.validate()?;
    let dims = weights.dims();
    if x0.width() != dims.input_width {
        return Err(shape_err!(
            "input width {} differs from projection width {}",
            x0.width(),
            dims.input_width
        ));
    }
    if omegas.depth() != dims.depth || omegas.head_count() != dims.heads {
        return Err(shape_err!(
            "attention set is {}x{} (layers x heads), weights are {}x{}",
            omegas.depth(),
            omegas.head_count(),
            dims.depth,
            dims.heads
        ));
    }
    if omegas.token_count() != x0.token_count() {
        return Err(shape_err!("attention and input token counts differ"));
    }
    Ok(dims)
}

/// Scalar output through the path decomposition:
/// `(H^L N N_0)^(-1/2) sum_pi Veff_pi V0 xi_pi`.
pub fn network_output(
    x0: &TokenSequence,
    weights: &NetworkWeights,
    omegas: &ExampleAttention,
    mode: ReadoutMode,
) -> Result<f64> {
    let dims = check_forward_dims(x0, weights, omegas)?;
    let xi = attentioned_inputs(x0, omegas, mode)?;
    let veff = all_effective_weights(weights)?;
    let projected = &weights.projection * xi;
    let n_paths = path_count(dims.heads, dims.depth)?;
    let total: f64 = (0..n_paths)
        .map(|p| veff.row(p).dot(&projected.column(p).transpose()))
        .sum();
    let norm = (n_paths as f64 * dims.width as f64 * dims.input_width as f64).sqrt();
    Ok(total / norm)
}

/// Scalar output through the layer-wise recursion.
pub fn layerwise_output(
    x0: &TokenSequence,
    weights: &NetworkWeights,
    omegas: &ExampleAttention,
    mode: ReadoutMode,
) -> Result<f64> {
    let dims = check_forward_dims(x0, weights, omegas)?;
    let n = dims.width as f64;
    let mut x = &weights.projection * x0.values() / (dims.input_width as f64).sqrt();
    let mix = 1.0 / (n * dims.heads as f64).sqrt();
    for layer in 1..=dims.depth {
        let mut next = DMatrix::zeros(x.nrows(), x.ncols());
        for head in 0..dims.heads {
            next += &weights.values[layer - 1][head] * &x * omegas.get(layer, head);
        }
        x = next * mix;
    }
    let pooled = x * mode.token_weights(x0.token_count())?;
    Ok(weights.readout.dot(&pooled.transpose()) / n.sqrt())
}
