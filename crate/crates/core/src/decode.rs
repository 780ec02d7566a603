//! Discrete structures from probe predictions.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::treebank::{edge, Edge};

pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("weight matrix is {0}x{1}, expected square")]
    NotSquare(usize, usize),
    #[error("weight matrix is asymmetric at ({i}, {j}): difference {diff:e}")]
    Asymmetric { i: usize, j: usize, diff: f64 },
    #[error("non-finite weight at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("empty input")]
    Empty,
}

/// Minimum spanning tree of the complete graph weighted by `weights`, by
/// Prim's algorithm from node 0.
///
/// Among equal-weight candidates the edge with the lexicographically
/// smallest `(min, max)` endpoint pair wins, which makes the output fully
/// deterministic.
pub fn mst(weights: &Matrix) -> Result<BTreeSet<Edge>, DecodeError> {
    let n = weights.rows();
    if weights.cols() != n {
        return Err(DecodeError::NotSquare(n, weights.cols()));
    }
    if n == 0 {
        return Err(DecodeError::Empty);
    }
    for i in 0..n {
        for j in 0..n {
            if !weights[(i, j)].is_finite() {
                return Err(DecodeError::NonFinite(i, j));
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (weights[(i, j)] - weights[(j, i)]).abs();
            if diff > SYMMETRY_TOLERANCE {
                return Err(DecodeError::Asymmetric { i, j, diff });
            }
        }
    }

    let w = |a: usize, b: usize| {
        let (lo, hi) = edge(a, b);
        weights[(lo, hi)]
    };

    let mut in_tree = vec![false; n];
    // Cheapest known connection of each outside node: (weight, tree endpoint).
    let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); n];
    let mut edges = BTreeSet::new();

    in_tree[0] = true;
    for v in 1..n {
        best[v] = (w(0, v), 0);
    }

    for _ in 1..n {
        let mut pick: Option<usize> = None;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            pick = match pick {
                None => Some(v),
                Some(u) => {
                    let cand = (best[v].0, edge(best[v].1, v));
                    let cur = (best[u].0, edge(best[u].1, u));
                    if cand.0 < cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                        Some(v)
                    } else {
                        Some(u)
                    }
                }
            };
        }
        let v = pick.expect("an outside node remains");
        in_tree[v] = true;
        edges.insert(edge(best[v].1, v));

        for u in 0..n {
            if in_tree[u] {
                continue;
            }
            let cw = w(v, u);
            let (bw, bp) = best[u];
            if cw < bw || (cw == bw && edge(v, u) < edge(bp, u)) {
                best[u] = (cw, v);
            }
        }
    }
    Ok(edges)
}

/// Position of the smallest predicted depth; ties go to the earliest token.
pub fn predicted_root(depths: &[f64]) -> Result<usize, DecodeError> {
    let mut root: Option<usize> = None;
    for (i, &d) in depths.iter().enumerate() {
        if !d.is_finite() {
            return Err(DecodeError::NonFinite(i, i));
        }
        if root.is_none_or(|r| d < depths[r]) {
            root = Some(i);
        }
    }
    root.ok_or(DecodeError::Empty)
}
