//! Independent reference implementations used as test oracles. None of these
//! call into the code paths they are used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use structprobe::linalg::Matrix;
use structprobe::treebank::SentenceTree;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random valid tree built by attaching each token to an earlier token of a
/// random permutation. Deliberately unrelated to the Prüfer generator.
pub fn attach_tree(n: usize, rng: &mut ChaCha8Rng) -> SentenceTree {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut heads = vec![0usize; n];
    for k in 1..n {
        let parent = perm[rng.random_range(0..k)];
        heads[perm[k]] = parent + 1;
    }
    SentenceTree::from_heads(format!("t{n}"), &heads, None).unwrap()
}

/// All-pairs shortest paths on the undirected head graph.
pub fn floyd_warshall(tree: &SentenceTree) -> Vec<Vec<u32>> {
    let n = tree.len();
    let inf = u32::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        let h = tree.tokens[i].head;
        if h != 0 {
            d[i][h - 1] = 1;
            d[h - 1][i] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Decodes a Prüfer sequence over `0..n` into the edges of a labeled tree.
pub fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &x in seq {
        degree[x] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &x in seq {
        let mut leaf = 0;
        while degree[leaf] != 1 {
            leaf += 1;
        }
        edges.push((leaf.min(x), leaf.max(x)));
        degree[leaf] -= 1;
        degree[x] -= 1;
    }
    let mut last = (0..n).filter(|&v| degree[v] == 1);
    let (a, b) = (last.next().unwrap(), last.next().unwrap());
    edges.push((a, b));
    edges
}

/// Minimum total weight over all n^(n-2) labeled spanning trees.
pub fn brute_force_mst_weight(w: &Matrix) -> f64 {
    let n = w.rows();
    if n <= 1 {
        return 0.0;
    }
    if n == 2 {
        return w[(0, 1)];
    }
    let len = n - 2;
    let mut seq = vec![0usize; len];
    let mut best = f64::INFINITY;
    loop {
        let total: f64 = prufer_edges(&seq, n).iter().map(|&(a, b)| w[(a, b)]).sum();
        if total < best {
            best = total;
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == len {
                return best;
            }
            seq[k] += 1;
            if seq[k] < n {
                break;
            }
            seq[k] = 0;
            k += 1;
        }
    }
}

/// Average ranks by counting: rank(x_i) = #{x_j < x_i} + (#{x_j == x_i} + 1) / 2.
pub fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rx = counting_ranks(x);
    let ry = counting_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx.sqrt() * vy.sqrt()))
    }
}

/// `|B(h_i - h_j)|^2` by explicit loops.
pub fn naive_pair_distance(b: &Matrix, hi: &[f64], hj: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in 0..b.rows() {
        let mut acc = 0.0;
        for c in 0..b.cols() {
            acc += b[(r, c)] * (hi[c] - hj[c]);
        }
        total += acc * acc;
    }
    total
}

pub fn naive_norm(b: &Matrix, h: &[f64]) -> f64 {
    let zero = vec![0.0; h.len()];
    naive_pair_distance(b, h, &zero)
}

/// Distance objective by explicit summation over ordered pairs.
pub fn naive_distance_loss(b: &Matrix, h: &Matrix, gold: &[Vec<u32>]) -> f64 {
    let n = h.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += (f64::from(gold[i][j]) - naive_pair_distance(b, h.row(i), h.row(j))).abs();
            }
        }
    }
    sum / (n * n) as f64
}

pub fn naive_depth_loss(b: &Matrix, h: &Matrix, gold: &[u32]) -> f64 {
    let n = h.rows();
    let sum: f64 = (0..n)
        .map(|i| (f64::from(gold[i]) - naive_norm(b, h.row(i))).abs())
        .sum();
    sum / n as f64
}

/// Central finite differences of `f` with respect to every entry of `b`.
pub fn finite_difference(b: &Matrix, step: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(b.rows(), b.cols());
    for r in 0..b.rows() {
        for c in 0..b.cols() {
            let mut plus = b.clone();
            plus[(r, c)] += step;
            let mut minus = b.clone();
            minus[(r, c)] -= step;
            grad[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
    }
    grad
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / b.frobenius_norm().max(1e-300)
}

/// Union-find check that `edges` form a spanning tree on `n` nodes.
pub fn is_spanning_tree(n: usize, edges: &[(usize, usize)]) -> bool {
    if edges.len() + 1 != n.max(1) {
        return false;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return false;
        }
        parent[ra] = rb;
    }
    true
}

pub fn print_criterion(number: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[criterion {number}] {} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}
