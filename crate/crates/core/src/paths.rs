//! Attention-path index algebra.
//!
//! A full path picks one head per layer, `(h_1, ..., h_L)`. Paths are kept in
//! a canonical order in which the layer-1 head is the most significant digit,
//! so the partial path `(h_l, pi_{l+1})` sits at flat index
//! `h_l * H^(L-l) + flat(pi_{l+1})`. With that ordering the lifted order
//! parameter of [`extend_order_parameter`] is literally `I_H (x) U_next`.
//!
//! Heads are zero-based here. Anything rendered for humans (labels, CSV) is
//! one-based.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

/// One head index per layer, layer 1 first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathIndex {
    heads: Vec<usize>,
}

impl PathIndex {
    pub fn new(heads: Vec<usize>, head_count: usize) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Domain("a path needs at least one layer".into()));
        }
        if let Some(&bad) = heads.iter().find(|&&h| h >= head_count) {
            return Err(Error::Index(format!(
                "head {bad} out of range for H={head_count}"
            )));
        }
        Ok(Self { heads })
    }

    /// Decode a flat canonical index.
    pub fn from_flat(mut flat: usize, head_count: usize, depth: usize) -> Result<Self> {
        let total = path_count(head_count, depth)?;
        if flat >= total {
            return Err(Error::Index(format!(
                "flat index {flat} out of range for {total} paths"
            )));
        }
        let mut heads = vec![0; depth];
        for slot in heads.iter_mut().rev() {
            *slot = flat % head_count;
            flat /= head_count;
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn depth(&self) -> usize {
        self.heads.len()
    }

    /// Head used at `layer` (one-based).
    pub fn head_at(&self, layer: usize) -> usize {
        self.heads[layer - 1]
    }

    pub fn flat(&self, head_count: usize) -> usize {
        self.heads.iter().fold(0, |acc, &h| acc * head_count + h)
    }

    /// One-based label such as `(1,2)`.
    pub fn label(&self) -> String {
        let inner: Vec<String> = self.heads.iter().map(|h| (h + 1).to_string()).collect();
        format!("({})", inner.join(","))
    }

    /// Parse a one-based label produced by [`PathIndex::label`].
    pub fn parse_label(label: &str, head_count: usize) -> Result<Self> {
        let body = label
            .trim()
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("malformed path label {label:?}")))?;
        let heads = body
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&h| h >= 1)
                    .map(|h| h - 1)
                    .ok_or_else(|| Error::Config(format!("malformed path label {label:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(heads, head_count)
    }
}

impl fmt::Display for PathIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Heads from `start_layer` (one-based, up to `L + 1`) through layer `L`.
///
/// `start_layer == L + 1` is the empty partial path that indexes the scalar
/// readout order parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PartialPathIndex {
    start_layer: usize,
    heads: Vec<usize>,
}

impl PartialPathIndex {
    pub fn new(start_layer: usize, heads: Vec<usize>, depth: usize) -> Result<Self> {
        if start_layer == 0 || start_layer > depth + 1 {
            return Err(Error::Index(format!(
                "start layer {start_layer} outside [1, {}]",
                depth + 1
            )));
        }
        if heads.len() != depth + 1 - start_layer {
            return Err(shape_err!(
                "partial path from layer {start_layer} of a depth-{depth} net needs {} heads, got {}",
                depth + 1 - start_layer,
                heads.len()
            ));
        }
        Ok(Self { start_layer, heads })
    }

    pub fn start_layer(&self) -> usize {
        self.start_layer
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn flat(&self, head_count: usize) -> usize {
        self.heads.iter().fold(0, |acc, &h| acc * head_count + h)
    }

    /// Tail of a full path starting at `start_layer`.
    pub fn of_path(path: &PathIndex, start_layer: usize) -> Result<Self> {
        let depth = path.depth();
        if start_layer == 0 || start_layer > depth + 1 {
            return Err(Error::Index(format!("start layer {start_layer} out of range")));
        }
        Ok(Self {
            start_layer,
            heads: path.heads[start_layer - 1..].to_vec(),
        })
    }
}

/// `H^L` with an explicit error instead of wrapping.
pub fn path_count(head_count: usize, depth: usize) -> Result<usize> {
    let exp = u32::try_from(depth)
        .map_err(|_| Error::Overflow(format!("depth {depth} too large")))?;
    head_count
        .checked_pow(exp)
        .ok_or_else(|| Error::Overflow(format!("H^L = {head_count}^{depth} overflows usize")))
}

/// All `H^L` paths in canonical order.
pub fn enumerate_paths(head_count: usize, depth: usize) -> Result<Vec<PathIndex>> {
    if head_count == 0 || depth == 0 {
        return Err(Error::Domain(format!(
            "need H >= 1 and L >= 1, got H={head_count}, L={depth}"
        )));
    }
    let total = path_count(head_count, depth)?;
    // Keep the flat index space addressable for dense matrices of this size.
    total
        .checked_mul(total)
        .ok_or_else(|| Error::Overflow(format!("{total} paths cannot index a dense matrix")))?;
    (0..total)
        .map(|i| PathIndex::from_flat(i, head_count, depth))
        .collect()
}

/// Lift `U^(l+1)` over `Pi_{l+1}` to `Pi_l`: entry `(h pi, h' pi')` equals
/// `U_next[pi, pi'] * delta(h, h')`, i.e. `H` copies of `U_next` on the diagonal.
pub fn extend_order_parameter(u_next: &DMatrix<f64>, head_count: usize) -> Result<DMatrix<f64>> {
    if !u_next.is_square() {
        return Err(shape_err!(
            "order parameter must be square, got {}x{}",
            u_next.nrows(),
            u_next.ncols()
        ));
    }
    if head_count == 0 {
        return Err(Error::Domain("H must be >= 1".into()));
    }
    let n = u_next.nrows();
    let mut out = DMatrix::zeros(n * head_count, n * head_count);
    for h in 0..head_count {
        out.view_mut((h * n, h * n), (n, n)).copy_from(u_next);
    }
    Ok(out)
}

/// Paths of `paths` whose head at `layer` (one-based) is `head` (zero-based).
pub fn paths_through_head(
    layer: usize,
    head: usize,
    paths: &[PathIndex],
    head_count: usize,
    depth: usize,
) -> Result<Vec<PathIndex>> {
    Ok(positions_through_head(layer, head, paths, head_count, depth)?
        .into_iter()
        .map(|i| paths[i].clone())
        .collect())
}

/// Positions within `paths` of the paths through `(layer, head)`.
pub fn positions_through_head(
    layer: usize,
    head: usize,
    paths: &[PathIndex],
    head_count: usize,
    depth: usize,
) -> Result<Vec<usize>> {
    if layer == 0 || layer > depth {
        return Err(Error::Index(format!("layer {layer} outside [1, {depth}]")));
    }
    if head >= head_count {
        return Err(Error::Index(format!("head {head} outside [0, {head_count})")));
    }
    Ok(paths
        .iter()
        .enumerate()
        .filter(|(_, p)| p.depth() == depth && p.head_at(layer) == head)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tuples(paths: &[PathIndex]) -> Vec<Vec<usize>> {
        paths.iter().map(|p| p.heads().to_vec()).collect()
    }

    #[test]
    fn two_heads_two_layers() {
        let paths = enumerate_paths(2, 2).unwrap();
        assert_eq!(
            tuples(&paths),
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
    }

    #[test]
    fn single_head_is_one_path() {
        let paths = enumerate_paths(1, 3).unwrap();
        assert_eq!(tuples(&paths), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn four_heads_flat_index() {
        let paths = enumerate_paths(4, 2).unwrap();
        assert_eq!(paths.len(), 16);
        for (i, p) in paths.iter().enumerate() {
            assert_eq!(i, 4 * p.heads()[0] + p.heads()[1]);
            assert_eq!(p.flat(4), i);
        }
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(enumerate_paths(1 << 20, 8), Err(Error::Overflow(_))));
        assert!(matches!(enumerate_paths(0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_and_identity_lift() {
        let u = DMatrix::from_element(1, 1, 2.5);
        assert_eq!(
            extend_order_parameter(&u, 2).unwrap(),
            DMatrix::from_diagonal_element(2, 2, 2.5)
        );
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(
            extend_order_parameter(&i2, 3).unwrap(),
            DMatrix::<f64>::identity(6, 6)
        );
    }

    #[test]
    fn lift_matches_delta_definition() {
        let (a, b, c) = (1.3, -0.4, 0.7);
        let u = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
        let lifted = extend_order_parameter(&u, 2).unwrap();
        // Elementwise from U_ext[(h,p),(h',p')] = U[p,p'] delta(h,h') with
        // partial paths of length 2 starting at layer 1 of a depth-2 net.
        let paths = enumerate_paths(2, 2).unwrap();
        for p in &paths {
            for q in &paths {
                let tail_p = PartialPathIndex::of_path(p, 2).unwrap().flat(2);
                let tail_q = PartialPathIndex::of_path(q, 2).unwrap().flat(2);
                let delta = if p.head_at(1) == q.head_at(1) { 1.0 } else { 0.0 };
                assert_eq!(lifted[(p.flat(2), q.flat(2))], u[(tail_p, tail_q)] * delta);
            }
        }
    }

    #[test]
    fn lift_rejects_non_square() {
        let u = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(extend_order_parameter(&u, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn through_head_examples() {
        let paths = enumerate_paths(2, 2).unwrap();
        let l1h0 = paths_through_head(1, 0, &paths, 2, 2).unwrap();
        assert_eq!(tuples(&l1h0), vec![vec![0, 0], vec![0, 1]]);
        let l2h1 = paths_through_head(2, 1, &paths, 2, 2).unwrap();
        assert_eq!(tuples(&l2h1), vec![vec![0, 1], vec![1, 1]]);
        assert!(matches!(
            paths_through_head(3, 0, &paths, 2, 2),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            paths_through_head(1, 2, &paths, 2, 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn through_head_brute_force() {
        let paths = enumerate_paths(4, 2).unwrap();
        for layer in 1..=2 {
            for head in 0..4 {
                let got = paths_through_head(layer, head, &paths, 4, 2).unwrap();
                let brute: Vec<_> = paths
                    .iter()
                    .filter(|p| p.heads()[layer - 1] == head)
                    .cloned()
                    .collect();
                assert_eq!(got.len(), 4);
                assert_eq!(got, brute);
            }
        }
    }

    #[test]
    fn labels_round_trip() {
        let p = PathIndex::new(vec![0, 3, 1], 4).unwrap();
        assert_eq!(p.label(), "(1,4,2)");
        assert_eq!(PathIndex::parse_label("(1,4,2)", 4).unwrap(), p);
        assert!(PathIndex::parse_label("(0,1)", 4).is_err());
    }

    #[test]
    fn partial_path_validation() {
        assert!(PartialPathIndex::new(3, vec![], 2).is_ok());
        assert!(PartialPathIndex::new(2, vec![1], 2).is_ok());
        assert!(PartialPathIndex::new(2, vec![1, 0], 2).is_err());
        assert!(PartialPathIndex::new(4, vec![], 2).is_err());
    }

    proptest! {
        #[test]
        fn flat_round_trip(h in 1usize..5, l in 1usize..5) {
            let paths = enumerate_paths(h, l).unwrap();
            prop_assert_eq!(paths.len(), h.pow(l as u32));
            for (i, p) in paths.iter().enumerate() {
                prop_assert_eq!(p.flat(h), i);
                prop_assert_eq!(&PathIndex::from_flat(i, h, l).unwrap(), p);
            }
        }

        #[test]
        fn heads_partition_paths(h in 1usize..5, l in 1usize..4) {
            let paths = enumerate_paths(h, l).unwrap();
            for layer in 1..=l {
                let mut seen = vec![0usize; paths.len()];
                for head in 0..h {
                    let pos = positions_through_head(layer, head, &paths, h, l).unwrap();
                    prop_assert_eq!(pos.len(), h.pow(l as u32 - 1));
                    for i in pos { seen[i] += 1; }
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
            }
        }

        #[test]
        fn lift_preserves_spectrum(h in 1usize..4, entries in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let a = DMatrix::from_row_slice(3, 3, &entries);
            let u = &a * a.transpose();
            let lifted = extend_order_parameter(&u, h).unwrap();
            prop_assert!((&lifted - lifted.transpose()).amax() == 0.0);
            let mut base: Vec<f64> = u.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut big: Vec<f64> = lifted.symmetric_eigen().eigenvalues.iter().copied().collect();
            base.sort_by(f64::total_cmp);
            big.sort_by(f64::total_cmp);
            let expect: Vec<f64> = base.iter().flat_map(|&e| std::iter::repeat_n(e, h)).collect();
            for (x, y) in big.iter().zip(expect.iter()) {
                prop_assert!((x - y).abs() <= 1e-10);
                prop_assert!(*x >= -1e-10);
            }
        }
    }
}
