//! UUAS, DSpr, Root% and NSpr.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{self, DecodeError};
use crate::embstore::AlignedSentence;
use crate::linalg::Matrix;
use crate::probe::{self, ProbeError, ProbeParams};
use crate::treebank::{
    gold_depths, gold_distances, gold_edges, punctuation_mask, DepthVector, DistanceMatrix, Edge,
    SentenceTree,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("spearman needs at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("evaluation set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Which metrics the sentence-length filter applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterScope {
    /// DSpr, NSpr and Root%; UUAS counts every sentence.
    #[default]
    SpearmanOnly,
    /// All four metrics.
    All,
}

impl std::str::FromStr for FilterScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spearman-only" => Ok(FilterScope::SpearmanOnly),
            "all" => Ok(FilterScope::All),
            other => Err(format!("unknown filter scope {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub filter_scope: FilterScope,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            filter_scope: FilterScope::SpearmanOnly,
            min_len: 5,
            max_len: 50,
        }
    }
}

impl MetricConfig {
    pub fn in_range(&self, n: usize) -> bool {
        (self.min_len..=self.max_len).contains(&n)
    }

    fn uuas_counts(&self, n: usize) -> bool {
        match self.filter_scope {
            FilterScope::SpearmanOnly => true,
            FilterScope::All => self.in_range(n),
        }
    }
}

/// Corpus-level scores. A metric is `None` when no sentence contributed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub uuas: Option<f64>,
    pub dspr: Option<f64>,
    pub root_acc: Option<f64>,
    pub nspr: Option<f64>,
    pub counted_uuas: usize,
    pub counted_dspr: usize,
    pub counted_root_acc: usize,
    pub counted_nspr: usize,
}

/// Tie-averaged 1-based ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end share the mean of ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort(x.len()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Per-sentence UUAS after dropping every edge that touches punctuation.
/// `None` when no gold edge survives the filter.
pub fn uuas(pred: &BTreeSet<Edge>, gold: &BTreeSet<Edge>, punct: &[bool]) -> Option<f64> {
    let keep = |&&(a, b): &&Edge| !punct[a] && !punct[b];
    let gold: BTreeSet<&Edge> = gold.iter().filter(keep).collect();
    if gold.is_empty() {
        return None;
    }
    let hits = pred
        .iter()
        .filter(keep)
        .filter(|e| gold.contains(e))
        .count();
    Some(hits as f64 / gold.len() as f64)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Spearman of one token's row of gold and predicted distances, skipping
/// the diagonal.
fn row_spearman(
    gold: &DistanceMatrix,
    pred: &Matrix,
    i: usize,
) -> Result<Option<f64>, MetricError> {
    let n = gold.len();
    let g: Vec<f64> = (0..n)
        .filter(|&j| j != i)
        .map(|j| f64::from(gold.get(i, j)))
        .collect();
    let p: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| pred[(i, j)]).collect();
    spearman(&g, &p)
}

/// Sentence-level DSpr: mean over tokens with a defined row correlation.
pub fn sentence_dspr(gold: &DistanceMatrix, pred: &Matrix) -> Result<Option<f64>, MetricError> {
    let n = gold.len();
    if pred.rows() != n || pred.cols() != n {
        return Err(MetricError::LengthMismatch(n, pred.rows()));
    }
    if n < 3 {
        return Ok(None);
    }
    let mut per_word = Vec::with_capacity(n);
    for i in 0..n {
        if let Some(r) = row_spearman(gold, pred, i)? {
            per_word.push(r);
        }
    }
    Ok(mean(&per_word))
}

/// Macro-averaged DSpr over sentences inside the length range. Returns the
/// score and the number of sentences that contributed.
pub fn dspr(
    sentences: &[(&DistanceMatrix, &Matrix)],
    config: &MetricConfig,
) -> Result<(Option<f64>, usize), MetricError> {
    let mut per_sentence = Vec::new();
    for (gold, pred) in sentences {
        if !config.in_range(gold.len()) {
            continue;
        }
        if let Some(r) = sentence_dspr(gold, pred)? {
            per_sentence.push(r);
        }
    }
    Ok((mean(&per_sentence), per_sentence.len()))
}

/// `(n, gold root, predicted root)` triples; only in-range sentences count.
pub fn root_accuracy(
    sentences: &[(usize, usize, usize)],
    config: &MetricConfig,
) -> (Option<f64>, usize) {
    let counted: Vec<bool> = sentences
        .iter()
        .filter(|(n, _, _)| config.in_range(*n))
        .map(|&(_, gold, pred)| gold == pred)
        .collect();
    let correct = counted.iter().filter(|&&c| c).count();
    if counted.is_empty() {
        (None, 0)
    } else {
        (Some(correct as f64 / counted.len() as f64), counted.len())
    }
}

pub fn nspr(
    sentences: &[(&DepthVector, &[f64])],
    config: &MetricConfig,
) -> Result<(Option<f64>, usize), MetricError> {
    let mut per_sentence = Vec::new();
    for (gold, pred) in sentences {
        if pred.len() != gold.len() {
            return Err(MetricError::LengthMismatch(gold.len(), pred.len()));
        }
        if !config.in_range(gold.len()) || gold.len() < 2 {
            continue;
        }
        if let Some(r) = spearman(&gold.to_f64(), pred)? {
            per_sentence.push(r);
        }
    }
    Ok((mean(&per_sentence), per_sentence.len()))
}

/// Gold structure and probe outputs for one sentence.
#[derive(Clone, Debug)]
pub struct SentencePrediction {
    pub tree: SentenceTree,
    pub distances: Matrix,
    pub depths: Vec<f64>,
}

/// Decodes and scores a set of predictions.
pub fn evaluate_predictions(
    sentences: &[SentencePrediction],
    config: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    if sentences.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let golds: Vec<(DistanceMatrix, DepthVector)> = sentences
        .iter()
        .map(|s| (gold_distances(&s.tree), gold_depths(&s.tree)))
        .collect();

    let mut uuas_scores = Vec::new();
    let mut roots = Vec::with_capacity(sentences.len());
    for (s, (_, depths)) in sentences.iter().zip(&golds) {
        let n = s.tree.len();
        if s.distances.rows() != n || s.depths.len() != n {
            return Err(MetricError::LengthMismatch(
                n,
                s.distances.rows().max(s.depths.len()),
            ));
        }
        if config.uuas_counts(n) {
            let pred_edges = decode::mst(&s.distances)?;
            let score = uuas(
                &pred_edges,
                &gold_edges(&s.tree),
                &punctuation_mask(&s.tree),
            );
            uuas_scores.extend(score);
        }
        roots.push((n, depths.root(), decode::predicted_root(&s.depths)?));
    }

    let dist_pairs: Vec<(&DistanceMatrix, &Matrix)> = golds
        .iter()
        .zip(sentences)
        .map(|((d, _), s)| (d, &s.distances))
        .collect();
    let depth_pairs: Vec<(&DepthVector, &[f64])> = golds
        .iter()
        .zip(sentences)
        .map(|((_, d), s)| (d, s.depths.as_slice()))
        .collect();

    let (dspr, counted_dspr) = dspr(&dist_pairs, config)?;
    let (nspr, counted_nspr) = nspr(&depth_pairs, config)?;
    let (root_acc, counted_root_acc) = root_accuracy(&roots, config);
    Ok(MetricReport {
        uuas: mean(&uuas_scores),
        dspr,
        root_acc,
        nspr,
        counted_uuas: uuas_scores.len(),
        counted_dspr,
        counted_root_acc,
        counted_nspr,
    })
}

/// Runs both probes over an aligned test set and scores the result.
pub fn evaluate(
    distance_probe: &ProbeParams,
    depth_probe: &ProbeParams,
    dataset: &[AlignedSentence],
    config: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    if dataset.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    let predictions = dataset
        .iter()
        .map(|s| {
            let h = &s.embedding.matrix;
            Ok(SentencePrediction {
                tree: s.tree.clone(),
                distances: probe::predict_distances(distance_probe, h)?,
                depths: probe::predict_depths(depth_probe, h)?,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    evaluate_predictions(&predictions, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            Some(-1.0)
        );
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), None);
        assert_eq!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch(2, 1))
        );
        assert_eq!(spearman(&[1.0], &[1.0]), Err(MetricError::TooShort(1)));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }

    #[test]
    fn uuas_cases() {
        let gold = BTreeSet::from([(0, 1), (1, 2), (2, 3)]);
        let none = [false; 4];
        assert_eq!(uuas(&gold, &gold, &none), Some(1.0));
        let disjoint = BTreeSet::from([(0, 2), (0, 3), (1, 3)]);
        assert_eq!(uuas(&disjoint, &gold, &none), Some(0.0));

        // token 4 is punctuation: its edges drop out of both sides
        let punct = [false, false, false, true];
        let pred = BTreeSet::from([(0, 1), (1, 2), (0, 3)]);
        assert_eq!(uuas(&pred, &gold, &punct), Some(1.0));

        assert_eq!(uuas(&gold, &gold, &[true; 4]), None);
    }

    #[test]
    fn root_accuracy_arithmetic() {
        let cfg = MetricConfig::default();
        let mut rows: Vec<(usize, usize, usize)> =
            (0..8).map(|i| (6, 0, if i < 6 { 0 } else { 1 })).collect();
        rows.push((3, 0, 2)); // too short, ignored
        assert_eq!(root_accuracy(&rows, &cfg), (Some(0.75), 8));
        assert_eq!(root_accuracy(&[(4, 0, 0)], &cfg), (None, 0));
    }

    #[test]
    fn dspr_length_filter() {
        let cfg = MetricConfig::default();
        let short = SentenceTree::from_heads("a", &[0, 1, 2, 3], None).unwrap();
        let long = SentenceTree::from_heads("b", &[0, 1, 2, 3, 4], None).unwrap();
        let ds = gold_distances(&short);
        let dl = gold_distances(&long);
        let ps = Matrix::from_fn(4, 4, |i, j| f64::from(ds.get(i, j)));
        // reversed ordering on the short sentence would pull an average down
        let ps_bad = Matrix::from_fn(4, 4, |i, j| -ps[(i, j)]);
        let pl = Matrix::from_fn(5, 5, |i, j| f64::from(dl.get(i, j)));
        let (score, counted) = dspr(&[(&ds, &ps_bad), (&dl, &pl)], &cfg).unwrap();
        assert_eq!((score, counted), (Some(1.0), 1));
        let (score, counted) = dspr(&[(&ds, &ps)], &cfg).unwrap();
        assert_eq!((score, counted), (None, 0));
    }

    #[test]
    fn nspr_sign() {
        let cfg = MetricConfig::default();
        let t = SentenceTree::from_heads("a", &[0, 1, 2, 1, 4, 5], None).unwrap();
        let g = gold_depths(&t);
        let pred = g.to_f64();
        let neg: Vec<f64> = pred.iter().map(|x| -x).collect();
        assert_eq!(
            nspr(&[(&g, pred.as_slice())], &cfg).unwrap(),
            (Some(1.0), 1)
        );
        assert_eq!(
            nspr(&[(&g, neg.as_slice())], &cfg).unwrap(),
            (Some(-1.0), 1)
        );
    }

    #[test]
    fn filter_scope_all_restricts_uuas() {
        let t = SentenceTree::from_heads("a", &[0, 1, 2], None).unwrap();
        let d = gold_distances(&t);
        let pred = SentencePrediction {
            tree: t.clone(),
            distances: Matrix::from_fn(3, 3, |i, j| f64::from(d.get(i, j))),
            depths: gold_depths(&t).to_f64(),
        };
        let report = evaluate_predictions(&[pred.clone()], &MetricConfig::default()).unwrap();
        assert_eq!(report.uuas, Some(1.0));
        assert_eq!(report.counted_uuas, 1);
        assert_eq!(report.dspr, None);
        let all = MetricConfig {
            filter_scope: FilterScope::All,
            ..MetricConfig::default()
        };
        let report = evaluate_predictions(&[pred], &all).unwrap();
        assert_eq!((report.uuas, report.counted_uuas), (None, 0));
        assert_eq!("all".parse::<FilterScope>(), Ok(FilterScope::All));
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        assert_eq!(
            evaluate_predictions(&[], &MetricConfig::default()),
            Err(MetricError::EmptyDataset)
        );
    }

    #[test]
    fn report_json_field_names() {
        let r = MetricReport {
            uuas: Some(0.5),
            ..MetricReport::default()
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in [
            "uuas",
            "dspr",
            "root_acc",
            "nspr",
            "counted_uuas",
            "counted_dspr",
            "counted_root_acc",
            "counted_nspr",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
