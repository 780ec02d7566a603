//! Structural probes over per-token embedding dumps.
//!
//! The pipeline reads gold dependency trees ([`treebank`]) and per-token
//! embeddings ([`embstore`]), fits linear distance and depth probes
//! ([`probe`]), decodes trees and roots from their predictions ([`decode`]),
//! scores them with UUAS, DSpr, Root% and NSpr ([`metrics`]), and repeats
//! this across fine-tuning checkpoints and seeds to build evolution curves
//! ([`sweep`]). [`synth`] generates embedding series with known geometry.

pub mod decode;
pub mod embstore;
pub mod linalg;
pub mod metrics;
pub mod probe;
pub mod sweep;
pub mod synth;
pub mod treebank;

pub use decode::{mst, predicted_root};
pub use embstore::{
    align, read_embeddings, write_embeddings, CheckpointManifest, SentenceEmbedding,
};
pub use linalg::Matrix;
pub use metrics::{evaluate, MetricConfig, MetricReport};
pub use probe::{train_probe, ProbeKind, ProbeParams, TrainConfig};
pub use sweep::{run_sweep, SweepConfig, SweepReport};
pub use treebank::{parse_conllu, SentenceTree};
