//! Checkpoint x seed sweeps and the curve data they produce.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::embstore::{align, read_embeddings_file, EmbError, LoadedManifest, ManifestEntry};
use crate::metrics::{evaluate, MetricConfig, MetricError, MetricReport};
use crate::probe::{
    train_probe, ProbeError, ProbeKind, ProbeParams, ProbeSentence, TrainConfig, TrainingLog,
};
use crate::treebank::{parse_conllu_with, ParseOptions, SentenceTree, TreebankError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{0}")]
    Config(String),
    #[error("treebank {path}: {source}")]
    Treebank {
        path: PathBuf,
        source: TreebankError,
    },
    #[error("task {task} seed {seed} checkpoint {checkpoint} ({path}): {source}")]
    Entry {
        task: String,
        seed: u64,
        checkpoint: u32,
        path: String,
        source: Box<SweepError>,
    },
    #[error(transparent)]
    Emb(#[from] EmbError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Required when the manifest holds more than one task.
    pub task: Option<String>,
    pub probe: TrainConfig,
    pub metrics: MetricConfig,
    pub skip_invalid: bool,
}

impl SweepConfig {
    pub fn new(manifest: PathBuf, train: PathBuf, dev: PathBuf, test: PathBuf) -> Self {
        SweepConfig {
            manifest,
            train,
            dev,
            test,
            task: None,
            probe: TrainConfig::default(),
            metrics: MetricConfig::default(),
            skip_invalid: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Band {
    fn from_values(values: &[f64]) -> Option<Band> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Rounding in the mean must not push it outside the band.
        Some(Band {
            mean: mean.clamp(min, max),
            min,
            max,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub checkpoint_index: u32,
    pub epoch_fraction: f64,
    pub uuas: Option<Band>,
    pub dspr: Option<Band>,
    pub root_acc: Option<Band>,
    pub nspr: Option<Band>,
    pub task_metric: Option<f64>,
    pub seeds: Vec<SeedResult>,
}

impl CurvePoint {
    /// Metrics in emission order (alphabetical by name).
    pub fn metrics(&self) -> [(&'static str, Option<Band>); 4] {
        [
            ("dspr", self.dspr),
            ("nspr", self.nspr),
            ("root_acc", self.root_acc),
            ("uuas", self.uuas),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: String,
    pub points: Vec<CurvePoint>,
    pub config: SweepConfig,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SweepError> {
        let report: SweepReport = serde_json::from_str(text)?;
        if report
            .points
            .windows(2)
            .any(|w| w[0].checkpoint_index >= w[1].checkpoint_index)
        {
            return Err(SweepError::Config(
                "report checkpoint indices are not strictly increasing".into(),
            ));
        }
        Ok(report)
    }
}

/// Everything produced for one (checkpoint, seed) cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub entry: ManifestEntry,
    pub report: MetricReport,
    pub distance_probe: ProbeParams,
    pub depth_probe: ProbeParams,
    pub distance_log: TrainingLog,
    pub depth_log: TrainingLog,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub report: SweepReport,
    pub cells: Vec<CellResult>,
}

fn load_treebank(path: &Path, skip_invalid: bool) -> Result<Vec<SentenceTree>, SweepError> {
    let text = fs::read_to_string(path)?;
    parse_conllu_with(&text, ParseOptions { skip_invalid }).map_err(|source| SweepError::Treebank {
        path: path.to_path_buf(),
        source,
    })
}

struct Splits {
    train: Vec<SentenceTree>,
    dev: Vec<SentenceTree>,
    test: Vec<SentenceTree>,
}

fn load_splits(config: &SweepConfig) -> Result<Splits, SweepError> {
    let splits = Splits {
        train: load_treebank(&config.train, config.skip_invalid)?,
        dev: load_treebank(&config.dev, config.skip_invalid)?,
        test: load_treebank(&config.test, config.skip_invalid)?,
    };
    let mut seen: HashSet<&str> = HashSet::new();
    for tree in splits.train.iter().chain(&splits.dev).chain(&splits.test) {
        if !seen.insert(tree.id.as_str()) {
            return Err(SweepError::Config(format!(
                "sentence id {} appears more than once across train/dev/test",
                tree.id
            )));
        }
    }
    Ok(splits)
}

/// Probe seed for one cell: the sweep seed mixed with the run seed and
/// checkpoint index.
pub fn cell_seed(base: u64, run_seed: u64, checkpoint_index: u32) -> u64 {
    base ^ run_seed ^ u64::from(checkpoint_index)
}

fn run_cell(
    config: &SweepConfig,
    manifest: &LoadedManifest,
    splits: &Splits,
    entry: &ManifestEntry,
) -> Result<CellResult, SweepError> {
    let path = manifest.resolve(entry);
    if !path.is_file() {
        return Err(SweepError::Config(format!(
            "missing checkpoint file {}",
            path.display()
        )));
    }
    let embeddings = read_embeddings_file(&path)?;

    let mut sets = Vec::with_capacity(3);
    for (name, trees) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        let aligned = align(embeddings.clone(), trees)?;
        if !aligned.unmatched_trees.is_empty() {
            warn!(
                "{}: {} {name} sentences have no embedding",
                entry.path,
                aligned.unmatched_trees.len()
            );
        }
        if aligned.is_empty() {
            return Err(SweepError::Config(format!(
                "no {name} sentence has an embedding"
            )));
        }
        sets.push(aligned);
    }
    let test = sets.pop().expect("three splits");
    let dev: Vec<ProbeSentence> = sets
        .pop()
        .expect("three splits")
        .sentences
        .iter()
        .map(Into::into)
        .collect();
    let train: Vec<ProbeSentence> = sets
        .pop()
        .expect("three splits")
        .sentences
        .iter()
        .map(Into::into)
        .collect();

    let probe_config = TrainConfig {
        seed: cell_seed(config.probe.seed, entry.seed, entry.checkpoint_index),
        ..config.probe.clone()
    };
    let (distance_probe, distance_log) = train_probe(
        &train,
        &dev,
        ProbeKind::Distance,
        entry.layer,
        &probe_config,
    )?;
    let (depth_probe, depth_log) =
        train_probe(&train, &dev, ProbeKind::Depth, entry.layer, &probe_config)?;
    let report = evaluate(
        &distance_probe,
        &depth_probe,
        &test.sentences,
        &config.metrics,
    )?;
    info!(
        "{} seed {} checkpoint {}: uuas {:?} dspr {:?} root {:?} nspr {:?}",
        entry.task,
        entry.seed,
        entry.checkpoint_index,
        report.uuas,
        report.dspr,
        report.root_acc,
        report.nspr
    );
    Ok(CellResult {
        entry: entry.clone(),
        report,
        distance_probe,
        depth_probe,
        distance_log,
        depth_log,
    })
}

fn resolve_task(config: &SweepConfig, manifest: &LoadedManifest) -> Result<String, SweepError> {
    let tasks = manifest.manifest.tasks();
    match &config.task {
        Some(t) if tasks.contains(t) => Ok(t.clone()),
        Some(t) => Err(SweepError::Config(format!("task {t} not in manifest"))),
        None if tasks.len() == 1 => Ok(tasks[0].clone()),
        None if tasks.is_empty() => Err(SweepError::Config("manifest is empty".into())),
        None => Err(SweepError::Config(format!(
            "manifest holds several tasks ({}); pick one",
            tasks.join(", ")
        ))),
    }
}

/// Aggregates per-seed reports into one curve point per checkpoint, in
/// increasing checkpoint order.
pub fn aggregate(
    entries_and_reports: &[(ManifestEntry, MetricReport)],
) -> Result<Vec<CurvePoint>, SweepError> {
    let mut groups: BTreeMap<u32, Vec<&(ManifestEntry, MetricReport)>> = BTreeMap::new();
    for cell in entries_and_reports {
        groups
            .entry(cell.0.checkpoint_index)
            .or_default()
            .push(cell);
    }
    let mut points = Vec::with_capacity(groups.len());
    for (checkpoint_index, mut cells) in groups {
        cells.sort_by_key(|c| c.0.seed);
        let epoch_fraction = cells[0].0.epoch_fraction;
        if cells.iter().any(|c| c.0.epoch_fraction != epoch_fraction) {
            return Err(SweepError::Config(format!(
                "checkpoint {checkpoint_index} has inconsistent epoch fractions across seeds"
            )));
        }
        let band = |f: fn(&MetricReport) -> Option<f64>| {
            let values: Vec<f64> = cells.iter().filter_map(|c| f(&c.1)).collect();
            Band::from_values(&values)
        };
        let task_values: Vec<f64> = cells.iter().filter_map(|c| c.0.task_metric).collect();
        points.push(CurvePoint {
            checkpoint_index,
            epoch_fraction,
            uuas: band(|r| r.uuas),
            dspr: band(|r| r.dspr),
            root_acc: band(|r| r.root_acc),
            nspr: band(|r| r.nspr),
            task_metric: Band::from_values(&task_values).map(|b| b.mean),
            seeds: cells
                .iter()
                .map(|c| SeedResult {
                    seed: c.0.seed,
                    report: c.1.clone(),
                })
                .collect(),
        });
    }
    Ok(points)
}

/// Trains and evaluates a distance and a depth probe for every manifest
/// entry of the selected task, then aggregates across seeds.
pub fn run_sweep_detailed(config: &SweepConfig) -> Result<SweepOutcome, SweepError> {
    config.probe.validate()?;
    let manifest = LoadedManifest::load(&config.manifest)?;
    let task = resolve_task(config, &manifest)?;
    let splits = load_splits(config)?;

    let mut entries: Vec<&ManifestEntry> = manifest
        .manifest
        .entries
        .iter()
        .filter(|e| e.task == task)
        .collect();
    entries.sort_by_key(|e| (e.checkpoint_index, e.seed));

    let cells = entries
        .par_iter()
        .map(|entry| {
            run_cell(config, &manifest, &splits, entry).map_err(|e| SweepError::Entry {
                task: entry.task.clone(),
                seed: entry.seed,
                checkpoint: entry.checkpoint_index,
                path: entry.path.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let pairs: Vec<(ManifestEntry, MetricReport)> = cells
        .iter()
        .map(|c| (c.entry.clone(), c.report.clone()))
        .collect();
    let points = aggregate(&pairs)?;
    Ok(SweepOutcome {
        report: SweepReport {
            task,
            points,
            config: SweepConfig {
                task: config.task.clone(),
                ..config.clone()
            },
        },
        cells,
    })
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport, SweepError> {
    run_sweep_detailed(config).map(|o| o.report)
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes one row per (checkpoint, metric). Undefined values are empty
/// fields.
pub fn emit_csv<W: Write>(report: &SweepReport, mut sink: W) -> Result<u64, SweepError> {
    let mut out = String::from("checkpoint,epoch_fraction,metric,mean,min,max,task_metric\n");
    for p in &report.points {
        let task = p.task_metric.map(fmt6).unwrap_or_default();
        for (name, band) in p.metrics() {
            let (mean, min, max) = match band {
                Some(b) => (fmt6(b.mean), fmt6(b.min), fmt6(b.max)),
                None => Default::default(),
            };
            let _ = writeln!(
                out,
                "{},{},{name},{mean},{min},{max},{task}",
                p.checkpoint_index,
                fmt6(p.epoch_fraction)
            );
        }
    }
    sink.write_all(out.as_bytes())?;
    sink.flush()?;
    Ok(out.len() as u64)
}

/// Plot-ready series: for each metric the x (epoch fraction), y (mean),
/// y_lo (min) and y_hi (max) arrays, plus the task metric when any
/// checkpoint carries one. Undefined points are `null`.
pub fn emit_plot_data(report: &SweepReport) -> Value {
    let x: Vec<f64> = report.points.iter().map(|p| p.epoch_fraction).collect();
    let checkpoints: Vec<u32> = report.points.iter().map(|p| p.checkpoint_index).collect();
    let mut metrics = serde_json::Map::new();
    for (k, name) in ["dspr", "nspr", "root_acc", "uuas"].into_iter().enumerate() {
        let bands: Vec<Option<Band>> = report.points.iter().map(|p| p.metrics()[k].1).collect();
        metrics.insert(
            name.to_string(),
            json!({
                "x": x,
                "y": bands.iter().map(|b| b.map(|b| b.mean)).collect::<Vec<_>>(),
                "y_lo": bands.iter().map(|b| b.map(|b| b.min)).collect::<Vec<_>>(),
                "y_hi": bands.iter().map(|b| b.map(|b| b.max)).collect::<Vec<_>>(),
            }),
        );
    }
    let mut doc = json!({
        "task": report.task,
        "checkpoints": checkpoints,
        "metrics": metrics,
    });
    if report.points.iter().any(|p| p.task_metric.is_some()) {
        doc["task_metric"] = json!({
            "x": x,
            "y": report.points.iter().map(|p| p.task_metric).collect::<Vec<_>>(),
        });
    }
    doc
}

/// Writes the report, CSV, plot data, probes and training logs under
/// `out_dir`, using `<task>.` as a file prefix.
pub fn write_outputs(outcome: &SweepOutcome, out_dir: &Path) -> Result<(), SweepError> {
    let task = &outcome.report.task;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join(format!("{task}.report.json")),
        outcome.report.to_json(),
    )?;
    let csv = fs::File::create(out_dir.join(format!("{task}.curves.csv")))?;
    emit_csv(&outcome.report, io::BufWriter::new(csv))?;
    let mut plot = serde_json::to_string_pretty(&emit_plot_data(&outcome.report))?;
    plot.push('\n');
    fs::write(out_dir.join(format!("{task}.plot.json")), plot)?;

    let probe_dir = out_dir.join("probes").join(task);
    fs::create_dir_all(&probe_dir)?;
    for cell in &outcome.cells {
        let stem = format!(
            "seed{}_ckpt{:03}",
            cell.entry.seed, cell.entry.checkpoint_index
        );
        fs::write(
            probe_dir.join(format!("{stem}_distance.json")),
            cell.distance_probe.to_json(),
        )?;
        fs::write(
            probe_dir.join(format!("{stem}_depth.json")),
            cell.depth_probe.to_json(),
        )?;
        fs::write(
            probe_dir.join(format!("{stem}_distance.log.csv")),
            cell.distance_log.to_csv(),
        )?;
        fs::write(
            probe_dir.join(format!("{stem}_depth.log.csv")),
            cell.depth_log.to_csv(),
        )?;
    }
    Ok(())
}
