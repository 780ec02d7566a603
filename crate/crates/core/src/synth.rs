//! Synthetic embeddings with known tree geometry.
//!
//! [`exact_distance_embedding`] places tokens so that squared Euclidean
//! distance equals tree distance exactly, using classical multidimensional
//! scaling. This works because path metrics on trees are of negative type,
//! so the doubly-centered Gram matrix is positive semidefinite.
//! [`exact_depth_embedding`] does the same for depths with scaled basis
//! vectors. [`mix`] blends either with Gaussian noise and an optional hidden
//! linear map, and [`generate_series`] writes a whole checkpoint series to
//! disk.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::{
    write_embeddings_file, CheckpointManifest, EmbError, ManifestEntry, SentenceEmbedding,
};
use crate::linalg::{condition_number, jacobi_eigen, LinalgError, Matrix};
use crate::treebank::{gold_depths, gold_distances, SentenceTree, Token};

pub const EIGEN_CLAMP: f64 = 1e-9;
pub const EIGEN_NEGATIVE_LIMIT: f64 = -1e-6;
pub const MAX_TRANSFORM_CONDITION: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("gram matrix has eigenvalue {0:e}; input is not a tree metric")]
    NegativeEigenvalue(f64),
    #[error("transform is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Emb(#[from] EmbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SplitMix64 finalizer; derives independent stream seeds from tuples.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn prufer_to_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &x in seq {
        degree[x] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &x in seq {
        let leaf = (0..n).find(|&v| degree[v] == 1).expect("a leaf exists");
        edges.push((leaf, x));
        degree[leaf] -= 1;
        degree[x] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Uniformly random labeled tree on `n` tokens with a uniformly random root.
pub fn random_tree(n: usize, seed: u64) -> Result<SentenceTree, SynthError> {
    if n < 1 {
        return Err(SynthError::Argument("tree needs at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = vec![Vec::new(); n];
    if n >= 2 {
        let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
        for (a, b) in prufer_to_edges(&seq, n) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let root = rng.random_range(0..n);

    let mut heads = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                heads[v] = u + 1;
                stack.push(v);
            }
        }
    }
    let tokens = heads
        .iter()
        .enumerate()
        .map(|(i, &head)| Token {
            form: format!("w{}", i + 1),
            upos: "X".into(),
            head,
            index: i + 1,
        })
        .collect();
    Ok(SentenceTree {
        id: format!("tree-{seed}"),
        tokens,
    })
}

fn check_dim(tree: &SentenceTree, d: usize) -> Result<(), SynthError> {
    if d < tree.len() {
        return Err(SynthError::Argument(format!(
            "dimension {d} is smaller than sentence length {}",
            tree.len()
        )));
    }
    Ok(())
}

/// Embedding whose pairwise squared distances reproduce the tree metric.
pub fn exact_distance_embedding(
    tree: &SentenceTree,
    d: usize,
) -> Result<SentenceEmbedding, SynthError> {
    check_dim(tree, d)?;
    let n = tree.len();
    let dist = gold_distances(tree);

    // G = -1/2 J D J with J = I - 11^T/n
    let row_means: Vec<f64> = (0..n)
        .map(|i| dist.row(i).iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64)
        .collect();
    let grand_mean = row_means.iter().sum::<f64>() / n as f64;
    let gram = Matrix::from_fn(n, n, |i, j| {
        -0.5 * (f64::from(dist.get(i, j)) - row_means[i] - row_means[j] + grand_mean)
    });

    let eig = jacobi_eigen(&gram)?;
    let mut scales = Vec::with_capacity(n);
    for &lambda in &eig.values {
        if lambda < EIGEN_NEGATIVE_LIMIT {
            return Err(SynthError::NegativeEigenvalue(lambda));
        }
        scales.push(if lambda < EIGEN_CLAMP {
            0.0
        } else {
            lambda.sqrt()
        });
    }
    let matrix = Matrix::from_fn(n, d, |i, k| {
        if k < n {
            eig.vectors[(i, k)] * scales[k]
        } else {
            0.0
        }
    });
    Ok(SentenceEmbedding {
        id: tree.id.clone(),
        matrix,
    })
}

/// `h_i = sqrt(depth_i) e_i`, so squared norms equal depths.
pub fn exact_depth_embedding(
    tree: &SentenceTree,
    d: usize,
) -> Result<SentenceEmbedding, SynthError> {
    check_dim(tree, d)?;
    let depths = gold_depths(tree);
    let matrix = Matrix::from_fn(tree.len(), d, |i, k| {
        if i == k {
            f64::from(depths.0[i]).sqrt()
        } else {
            0.0
        }
    });
    Ok(SentenceEmbedding {
        id: tree.id.clone(),
        matrix,
    })
}

/// Side-by-side concatenation: distance geometry in the first
/// `distance_dim` columns, depth geometry in the rest.
pub fn exact_joint_embedding(
    tree: &SentenceTree,
    distance_dim: usize,
    depth_dim: usize,
) -> Result<SentenceEmbedding, SynthError> {
    let dist = exact_distance_embedding(tree, distance_dim)?;
    let depth = exact_depth_embedding(tree, depth_dim)?;
    let matrix = Matrix::from_fn(tree.len(), distance_dim + depth_dim, |i, k| {
        if k < distance_dim {
            dist.matrix[(i, k)]
        } else {
            depth.matrix[(i, k - distance_dim)]
        }
    });
    Ok(SentenceEmbedding {
        id: tree.id.clone(),
        matrix,
    })
}

/// `h'_i = A((1 - alpha) h_i + alpha g_i)` with `g_i` standard Gaussian noise
/// drawn from a generator keyed by `noise_seed`.
pub fn mix(
    exact: &SentenceEmbedding,
    noise_seed: u64,
    alpha: f64,
    transform: Option<&Matrix>,
) -> Result<SentenceEmbedding, SynthError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SynthError::Argument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    let d = exact.dim();
    if let Some(a) = transform {
        if a.shape() != (d, d) {
            return Err(SynthError::Argument(format!(
                "transform is {}x{}, expected {d}x{d}",
                a.rows(),
                a.cols()
            )));
        }
        let cond = condition_number(a)?;
        if !(cond <= MAX_TRANSFORM_CONDITION) {
            return Err(SynthError::IllConditioned(cond));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut blended = exact.matrix.clone();
    if alpha > 0.0 {
        for x in blended.as_mut_slice() {
            let g: f64 = rng.sample(StandardNormal);
            *x = (1.0 - alpha) * *x + alpha * g;
        }
    }
    let matrix = match transform {
        Some(a) => blended.matmul_transposed(a)?,
        None => blended,
    };
    Ok(SentenceEmbedding {
        id: exact.id.clone(),
        matrix,
    })
}

/// Random Haar-ish orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let mut q = Matrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let mut ok = true;
        for j in 0..d {
            for k in 0..j {
                let proj: f64 = (0..d).map(|i| q[(i, j)] * q[(i, k)]).sum();
                for i in 0..d {
                    q[(i, j)] -= proj * q[(i, k)];
                }
            }
            let norm = (0..d).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..d {
                q[(i, j)] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

/// Random `d x d` matrix with singular values spread over `[1, condition]`,
/// so its condition number is exactly `condition` (for `d >= 2`).
pub fn random_transform(d: usize, condition: f64, seed: u64) -> Result<Matrix, SynthError> {
    if !(condition >= 1.0) {
        return Err(SynthError::Argument("condition number must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthogonal(d, &mut rng);
    let v = random_orthogonal(d, &mut rng);
    let singular: Vec<f64> = (0..d)
        .map(|i| {
            if d == 1 {
                1.0
            } else {
                condition.powf(i as f64 / (d - 1) as f64)
            }
        })
        .collect();
    let us = Matrix::from_fn(d, d, |i, j| u[(i, j)] * singular[j]);
    Ok(us.matmul_transposed(&v)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub task: String,
    pub sentences: usize,
    /// Noise level per checkpoint, in checkpoint order.
    pub alphas: Vec<f64>,
    /// Fine-tuning run seeds; one file per (seed, checkpoint).
    pub run_seeds: Vec<u64>,
    pub dim: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub layer: u32,
    pub condition: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            task: "synthetic".into(),
            sentences: 200,
            alphas: vec![0.9, 0.5, 0.1],
            run_seeds: vec![1],
            dim: 48,
            seed: 0,
            min_len: 5,
            max_len: 20,
            layer: 7,
            condition: 10.0,
        }
    }
}

/// The fixed tree corpus of a series, split 80/10/10 into train/dev/test.
pub struct SeriesCorpus {
    pub train: Vec<SentenceTree>,
    pub dev: Vec<SentenceTree>,
    pub test: Vec<SentenceTree>,
}

impl SeriesCorpus {
    pub fn all(&self) -> impl Iterator<Item = &SentenceTree> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

pub fn series_corpus(config: &SeriesConfig) -> Result<SeriesCorpus, SynthError> {
    if config.min_len < 1 || config.min_len > config.max_len {
        return Err(SynthError::Argument(format!(
            "bad length range {}..={}",
            config.min_len, config.max_len
        )));
    }
    if config.sentences < 3 {
        return Err(SynthError::Argument(
            "need at least 3 sentences for three splits".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0]));
    let mut trees = Vec::with_capacity(config.sentences);
    for k in 0..config.sentences {
        let n = rng.random_range(config.min_len..=config.max_len);
        let mut tree = random_tree(n, mix_seed(&[config.seed, 1, k as u64]))?;
        tree.id = format!("synth-{k:05}");
        trees.push(tree);
    }
    let n_train = (config.sentences * 8 / 10).max(1);
    let n_dev = (config.sentences / 10).max(1);
    let test = trees.split_off(n_train + n_dev);
    let dev = trees.split_off(n_train);
    Ok(SeriesCorpus {
        train: trees,
        dev,
        test,
    })
}

/// Writes `train.conllu`, `dev.conllu`, `test.conllu`, one EMB1 file per
/// (run seed, checkpoint) and `manifest.json` into `out_dir`.
///
/// Each embedding is the joint exact embedding (distance half, depth half)
/// blended with noise at the checkpoint's alpha and passed through one hidden
/// transform shared by the whole series.
pub fn generate_series(
    config: &SeriesConfig,
    out_dir: &Path,
) -> Result<CheckpointManifest, SynthError> {
    if config.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(SynthError::Argument("alphas must lie in [0, 1]".into()));
    }
    if config.run_seeds.is_empty() || config.alphas.is_empty() {
        return Err(SynthError::Argument(
            "need at least one seed and one alpha".into(),
        ));
    }
    let distance_dim = config.dim / 2;
    let depth_dim = config.dim - distance_dim;
    if distance_dim < config.max_len {
        return Err(SynthError::Argument(format!(
            "dimension {} must be at least twice the maximum sentence length {}",
            config.dim, config.max_len
        )));
    }

    let corpus = series_corpus(config)?;
    fs::create_dir_all(out_dir)?;
    for (name, split) in [
        ("train.conllu", &corpus.train),
        ("dev.conllu", &corpus.dev),
        ("test.conllu", &corpus.test),
    ] {
        let text: String = split.iter().map(SentenceTree::to_conllu).collect();
        fs::write(out_dir.join(name), text)?;
    }

    let exact: Vec<SentenceEmbedding> = corpus
        .all()
        .map(|t| exact_joint_embedding(t, distance_dim, depth_dim))
        .collect::<Result<_, _>>()?;
    let transform = random_transform(config.dim, config.condition, mix_seed(&[config.seed, 2]))?;

    let cells: Vec<(u64, usize, f64)> = config
        .run_seeds
        .iter()
        .flat_map(|&s| {
            config
                .alphas
                .iter()
                .enumerate()
                .map(move |(c, &a)| (s, c, a))
        })
        .collect();
    let entries = cells
        .par_iter()
        .map(|&(run_seed, ckpt, alpha)| {
            let mixed = exact
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let noise = mix_seed(&[config.seed, 3, run_seed, ckpt as u64, i as u64]);
                    mix(e, noise, alpha, Some(&transform))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let file = format!("{}_seed{}_ckpt{:03}.emb", config.task, run_seed, ckpt);
            write_embeddings_file(&out_dir.join(&file), &mixed)?;
            Ok(ManifestEntry {
                task: config.task.clone(),
                seed: run_seed,
                checkpoint_index: ckpt as u32,
                epoch_fraction: ckpt as f64 / config.alphas.len() as f64,
                layer: config.layer,
                path: file,
                task_metric: None,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let manifest = CheckpointManifest { entries };
    manifest.validate()?;
    fs::write(out_dir.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}
