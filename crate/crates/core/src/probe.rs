//! Distance and depth structural probes.
//!
//! A probe is a `k x d` matrix `B`. The distance probe predicts the tree
//! distance between tokens `i` and `j` as `|B(h_i - h_j)|^2`; the depth probe
//! predicts the depth of token `i` as `|B h_i|^2`. Both are fit with an L1
//! objective normalized per sentence (`1/n^2` over ordered pairs for
//! distances, `1/n` over tokens for depths).

use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::AlignedSentence;
use crate::linalg::{squared_norm, Matrix};
use crate::treebank::{gold_depths, gold_distances, DepthVector, DistanceMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("probe expects dimension {expected}, embedding has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("prediction has {pred} entries per side but gold has {gold}")]
    Shape { pred: usize, gold: usize },
    #[error("distance loss is undefined for sentences with fewer than 2 tokens")]
    UndefinedLoss,
    #[error("{0} probe cannot be used for this prediction")]
    WrongKind(ProbeKind),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Divergence { epoch: usize, learning_rate: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid probe file: {0}")]
    Serialization(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Distance,
    Depth,
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeKind::Distance => "distance",
            ProbeKind::Depth => "depth",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub kind: ProbeKind,
    pub layer: u32,
    pub seed: u64,
    /// `k x d` projection.
    pub weights: Matrix,
}

impl ProbeParams {
    pub fn new(kind: ProbeKind, weights: Matrix) -> Self {
        ProbeParams {
            kind,
            layer: 0,
            seed: 0,
            weights,
        }
    }

    pub fn rank(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self, kind: ProbeKind, h: &Matrix) -> Result<(), ProbeError> {
        if self.kind != kind {
            return Err(ProbeError::WrongKind(self.kind));
        }
        if h.cols() != self.dim() {
            return Err(ProbeError::Dimension {
                expected: self.dim(),
                got: h.cols(),
            });
        }
        Ok(())
    }

    /// JSON header fields plus the row-major binary64 weights in base64.
    pub fn to_json(&self) -> String {
        let mut raw = Vec::with_capacity(self.weights.as_slice().len() * 8);
        for w in self.weights.as_slice() {
            raw.extend_from_slice(&w.to_le_bytes());
        }
        let file = ProbeFile {
            kind: self.kind,
            layer: self.layer,
            rank: self.rank(),
            d: self.dim(),
            seed: self.seed,
            weights: BASE64.encode(raw),
        };
        serde_json::to_string_pretty(&file).expect("probe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ProbeError> {
        let file: ProbeFile =
            serde_json::from_str(text).map_err(|e| ProbeError::Serialization(e.to_string()))?;
        let raw = BASE64
            .decode(file.weights.as_bytes())
            .map_err(|e| ProbeError::Serialization(e.to_string()))?;
        if raw.len() != file.rank * file.d * 8 {
            return Err(ProbeError::Serialization(format!(
                "expected {} weight bytes for a {}x{} probe, found {}",
                file.rank * file.d * 8,
                file.rank,
                file.d,
                raw.len()
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) || file.rank == 0 {
            return Err(ProbeError::Serialization(
                "non-finite or empty weights".into(),
            ));
        }
        Ok(ProbeParams {
            kind: file.kind,
            layer: file.layer,
            seed: file.seed,
            weights: Matrix::from_vec(file.rank, file.d, data),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    kind: ProbeKind,
    layer: u32,
    rank: usize,
    d: usize,
    seed: u64,
    weights: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rank: 128,
            learning_rate: 1e-3,
            max_epochs: 40,
            patience: 5,
            seed: 0,
            init_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.rank == 0 {
            return Err(ProbeError::Config("rank must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ProbeError::Config("learning rate must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ProbeError::Config("init scale must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(ProbeError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// `H B^T`: each token vector projected into the probe space.
fn project(weights: &Matrix, h: &Matrix) -> Matrix {
    h.matmul_transposed(weights).expect("dimension checked")
}

fn pairwise_squared_distances(projected: &Matrix) -> Matrix {
    let n = projected.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = projected
                .row(i)
                .iter()
                .zip(projected.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

pub fn predict_distances(probe: &ProbeParams, h: &Matrix) -> Result<Matrix, ProbeError> {
    probe.check(ProbeKind::Distance, h)?;
    Ok(pairwise_squared_distances(&project(&probe.weights, h)))
}

pub fn predict_depths(probe: &ProbeParams, h: &Matrix) -> Result<Vec<f64>, ProbeError> {
    probe.check(ProbeKind::Depth, h)?;
    let p = project(&probe.weights, h);
    Ok((0..p.rows()).map(|i| squared_norm(p.row(i))).collect())
}

pub fn distance_loss(pred: &Matrix, gold: &DistanceMatrix) -> Result<f64, ProbeError> {
    let n = gold.len();
    if pred.rows() != n || pred.cols() != n {
        return Err(ProbeError::Shape {
            pred: pred.rows(),
            gold: n,
        });
    }
    if n < 2 {
        return Err(ProbeError::UndefinedLoss);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += (f64::from(gold.get(i, j)) - pred[(i, j)]).abs();
            }
        }
    }
    Ok(sum / (n * n) as f64)
}

pub fn depth_loss(pred: &[f64], gold: &DepthVector) -> Result<f64, ProbeError> {
    if pred.len() != gold.len() {
        return Err(ProbeError::Shape {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(ProbeError::UndefinedLoss);
    }
    let sum: f64 = pred
        .iter()
        .zip(&gold.0)
        .map(|(p, &g)| (f64::from(g) - p).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

// sign(0) = 0, unlike f64::signum.
#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and its (sub)gradient with respect to the probe weights.
///
/// With `c_ij = -sign(gold_ij - pred_ij)` the gradient is
/// `(2/n^2) sum_{i!=j} c_ij B (h_i-h_j)(h_i-h_j)^T`. Because `c` is symmetric
/// this collapses to `(4/n^2) P^T (D - C) H` where `P = H B^T` and `D` is the
/// diagonal of row sums of `C`.
fn distance_objective(
    weights: &Matrix,
    h: &Matrix,
    gold: &DistanceMatrix,
) -> Result<(f64, Matrix), ProbeError> {
    let n = h.rows();
    if gold.len() != n {
        return Err(ProbeError::Shape {
            pred: n,
            gold: gold.len(),
        });
    }
    if n < 2 {
        return Err(ProbeError::UndefinedLoss);
    }
    let p = project(weights, h);
    let pred = pairwise_squared_distances(&p);

    let mut loss = 0.0;
    let mut coef = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let resid = f64::from(gold.get(i, j)) - pred[(i, j)];
            loss += 2.0 * resid.abs();
            let c = -sign(resid);
            coef[(i, j)] = c;
            coef[(j, i)] = c;
        }
    }
    let norm = (n * n) as f64;

    // M = (D - C) H
    let d = h.cols();
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        let row_sum: f64 = coef.row(i).iter().sum();
        let out = m.row_mut(i);
        for (o, &x) in out.iter_mut().zip(h.row(i)) {
            *o = row_sum * x;
        }
        for j in 0..n {
            let c = coef[(i, j)];
            if c != 0.0 {
                for (o, &x) in out.iter_mut().zip(h.row(j)) {
                    *o -= c * x;
                }
            }
        }
    }
    let mut grad = p.transpose().matmul(&m).expect("shapes agree");
    grad.scale(4.0 / norm);
    Ok((loss / norm, grad))
}

fn depth_objective(
    weights: &Matrix,
    h: &Matrix,
    gold: &DepthVector,
) -> Result<(f64, Matrix), ProbeError> {
    let n = h.rows();
    if gold.len() != n {
        return Err(ProbeError::Shape {
            pred: n,
            gold: gold.len(),
        });
    }
    if n == 0 {
        return Err(ProbeError::UndefinedLoss);
    }
    let mut p = project(weights, h);
    let mut loss = 0.0;
    for i in 0..n {
        let resid = f64::from(gold.0[i]) - squared_norm(p.row(i));
        loss += resid.abs();
        let c = -sign(resid);
        p.row_mut(i).iter_mut().for_each(|x| *x *= c);
    }
    // (2/n) sum_i c_i (B h_i) h_i^T
    let mut grad = p.transpose().matmul(h).expect("shapes agree");
    grad.scale(2.0 / n as f64);
    Ok((loss / n as f64, grad))
}

pub fn distance_gradient(
    probe: &ProbeParams,
    h: &Matrix,
    gold: &DistanceMatrix,
) -> Result<Matrix, ProbeError> {
    probe.check(ProbeKind::Distance, h)?;
    distance_objective(&probe.weights, h, gold).map(|(_, g)| g)
}

pub fn depth_gradient(
    probe: &ProbeParams,
    h: &Matrix,
    gold: &DepthVector,
) -> Result<Matrix, ProbeError> {
    probe.check(ProbeKind::Depth, h)?;
    depth_objective(&probe.weights, h, gold).map(|(_, g)| g)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, len: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Embedding plus the gold targets a probe is trained against.
#[derive(Clone, Debug)]
pub struct ProbeSentence {
    pub embedding: Matrix,
    pub distances: DistanceMatrix,
    pub depths: DepthVector,
}

impl From<&AlignedSentence> for ProbeSentence {
    fn from(s: &AlignedSentence) -> Self {
        ProbeSentence {
            embedding: s.embedding.matrix.clone(),
            distances: gold_distances(&s.tree),
            depths: gold_depths(&s.tree),
        }
    }
}

impl ProbeSentence {
    pub fn len(&self) -> usize {
        self.embedding.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embedding.rows() == 0
    }

    fn usable(&self, kind: ProbeKind) -> bool {
        match kind {
            ProbeKind::Distance => self.len() >= 2,
            ProbeKind::Depth => self.len() >= 1,
        }
    }

    fn objective(&self, kind: ProbeKind, weights: &Matrix) -> Result<(f64, Matrix), ProbeError> {
        match kind {
            ProbeKind::Distance => distance_objective(weights, &self.embedding, &self.distances),
            ProbeKind::Depth => depth_objective(weights, &self.embedding, &self.depths),
        }
    }

    fn loss(&self, kind: ProbeKind, weights: &Matrix) -> Result<f64, ProbeError> {
        let h = &self.embedding;
        match kind {
            ProbeKind::Distance => distance_loss(
                &pairwise_squared_distances(&project(weights, h)),
                &self.distances,
            ),
            ProbeKind::Depth => {
                let p = project(weights, h);
                let pred: Vec<f64> = (0..p.rows()).map(|i| squared_norm(p.row(i))).collect();
                depth_loss(&pred, &self.depths)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were returned.
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.dev_loss);
        }
        out
    }
}

pub fn mean_loss(
    probe: &ProbeParams,
    sentences: &[ProbeSentence],
) -> Result<Option<f64>, ProbeError> {
    let usable: Vec<&ProbeSentence> = sentences.iter().filter(|s| s.usable(probe.kind)).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for s in &usable {
        if s.embedding.cols() != probe.dim() {
            return Err(ProbeError::Dimension {
                expected: probe.dim(),
                got: s.embedding.cols(),
            });
        }
        sum += s.loss(probe.kind, &probe.weights)?;
    }
    Ok(Some(sum / usable.len() as f64))
}

/// Fits a probe with one Adam step per training sentence, shuffling each
/// epoch, and returns the weights with the lowest dev loss.
///
/// The probe rank is `min(config.rank, d)`. Training stops after
/// `max_epochs`, or once the dev loss has not improved for `patience`
/// consecutive epochs.
pub fn train_probe(
    train: &[ProbeSentence],
    dev: &[ProbeSentence],
    kind: ProbeKind,
    layer: u32,
    config: &TrainConfig,
) -> Result<(ProbeParams, TrainingLog), ProbeError> {
    config.validate()?;
    let train: Vec<&ProbeSentence> = train.iter().filter(|s| s.usable(kind)).collect();
    let dev: Vec<&ProbeSentence> = dev.iter().filter(|s| s.usable(kind)).collect();
    if train.is_empty() {
        return Err(ProbeError::EmptySplit("train"));
    }
    if dev.is_empty() {
        return Err(ProbeError::EmptySplit("dev"));
    }
    let d = train[0].embedding.cols();
    for s in train.iter().chain(&dev) {
        if s.embedding.cols() != d {
            return Err(ProbeError::Dimension {
                expected: d,
                got: s.embedding.cols(),
            });
        }
    }

    let rank = config.rank.min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = config.init_scale;
    let mut weights = Matrix::from_fn(rank, d, |_, _| rng.random_range(-scale..=scale));

    let mut log = TrainingLog::default();
    let mut best = weights.clone();
    let mut best_dev = f64::INFINITY;
    let mut since_best = 0usize;
    let mut adam = Adam::new(config.learning_rate, rank * d);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let diverged = |epoch| ProbeError::Divergence {
        epoch,
        learning_rate: config.learning_rate,
    };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for &idx in &order {
            let (loss, grad) = train[idx].objective(kind, &weights)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(diverged(epoch));
            }
            train_sum += loss;
            adam.step(weights.as_mut_slice(), grad.as_slice());
        }
        let mut dev_sum = 0.0;
        for s in &dev {
            dev_sum += s.loss(kind, &weights)?;
        }
        let train_loss = train_sum / train.len() as f64;
        let dev_loss = dev_sum / dev.len() as f64;
        if !dev_loss.is_finite() || !weights.is_finite() {
            return Err(diverged(epoch));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
        });

        if dev_loss < best_dev {
            best_dev = dev_loss;
            best.clone_from(&weights);
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok((
        ProbeParams {
            kind,
            layer,
            seed: config.seed,
            weights: best,
        },
        log,
    ))
}
