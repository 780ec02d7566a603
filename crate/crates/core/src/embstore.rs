//! EMB1 embedding files, the checkpoint manifest, and embedding/treebank
//! alignment.
//!
//! EMB1 layout (little-endian):
//!
//! ```text
//! header : "EMB1" | version: u8 = 1 | d: u32 | reserved: u32 = 0
//! record : id_len: u16 | id: [u8; id_len] (UTF-8) | n: u32 | n*d x f32, row-major
//! ```
//!
//! Records repeat until end of input. Values are held as `f64` in memory and
//! narrowed to binary32 on write, so `read(write(x)) == x` bit-for-bit for any
//! embedding whose values are representable in binary32, which includes
//! everything that was itself read from an EMB1 file.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::treebank::SentenceTree;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 13;

#[derive(Debug, Error)]
pub enum EmbError {
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt input at byte {offset}: {message}")]
    Corruption { offset: usize, message: String },
    #[error("sentence {id}: {message}")]
    Data { id: String, message: String },
    #[error("sentence {id}: dimension {got} does not match {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("sentence {id}: tree has {tree_tokens} tokens but embedding has {rows} rows")]
    Alignment {
        id: String,
        tree_tokens: usize,
        rows: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-token vectors for one sentence: row `i` is token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub id: String,
    pub matrix: Matrix,
}

impl SentenceEmbedding {
    pub fn new(id: impl Into<String>, matrix: Matrix) -> Result<Self, EmbError> {
        let emb = SentenceEmbedding {
            id: id.into(),
            matrix,
        };
        emb.validate()?;
        Ok(emb)
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    fn data_error(&self, message: impl Into<String>) -> EmbError {
        EmbError::Data {
            id: self.id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), EmbError> {
        if self.matrix.rows() == 0 || self.matrix.cols() == 0 {
            return Err(self.data_error(format!(
                "empty embedding ({}x{})",
                self.matrix.rows(),
                self.matrix.cols()
            )));
        }
        if !self.matrix.is_finite() {
            return Err(self.data_error("non-finite value"));
        }
        Ok(())
    }

    /// Bit-level equality of ids, shapes, and values.
    pub fn bit_eq(&self, other: &SentenceEmbedding) -> bool {
        self.id == other.id
            && self.matrix.shape() == other.matrix.shape()
            && self
                .matrix
                .as_slice()
                .iter()
                .zip(other.matrix.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Writes an EMB1 stream and returns the number of bytes emitted. All
/// sentences are checked before anything is written.
pub fn write_embeddings<W: Write>(
    sentences: &[SentenceEmbedding],
    mut sink: W,
) -> Result<u64, EmbError> {
    let dim = sentences.first().map_or(0, SentenceEmbedding::dim);
    let mut encoded: Vec<Vec<f32>> = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.dim() != dim {
            return Err(EmbError::DimensionMismatch {
                id: s.id.clone(),
                expected: dim,
                got: s.dim(),
            });
        }
        s.validate()?;
        if s.id.len() > usize::from(u16::MAX) {
            return Err(s.data_error("id longer than 65535 bytes"));
        }
        if u32::try_from(s.len()).is_err() {
            return Err(s.data_error("too many tokens for a u32 count"));
        }
        let values: Vec<f32> = s.matrix.as_slice().iter().map(|&x| x as f32).collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(s.data_error("value overflows binary32"));
        }
        encoded.push(values);
    }
    let dim = u32::try_from(dim).map_err(|_| EmbError::Format("dimension exceeds u32".into()))?;

    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    sink.write_all(&buf)?;
    let mut written = buf.len() as u64;

    for (s, values) in sentences.iter().zip(&encoded) {
        buf.clear();
        buf.extend_from_slice(&(s.id.len() as u16).to_le_bytes());
        buf.extend_from_slice(s.id.as_bytes());
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

pub fn read_embeddings<R: Read>(mut source: R) -> Result<Vec<SentenceEmbedding>, EmbError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_embeddings(&bytes)
}

pub fn read_embeddings_file(path: &Path) -> Result<Vec<SentenceEmbedding>, EmbError> {
    let file = fs::File::open(path)?;
    read_embeddings(io::BufReader::new(file))
}

pub fn write_embeddings_file(
    path: &Path,
    sentences: &[SentenceEmbedding],
) -> Result<u64, EmbError> {
    let file = fs::File::create(path)?;
    write_embeddings(sentences, io::BufWriter::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8], EmbError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(EmbError::Corruption {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16, EmbError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a complete EMB1 byte buffer.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<SentenceEmbedding>, EmbError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EmbError::Format("bad magic, expected EMB1".into()));
    }
    if bytes.len() < 5 {
        return Err(EmbError::Format("missing version byte".into()));
    }
    if bytes[4] != VERSION {
        return Err(EmbError::Format(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let mut cur = Cursor { bytes, pos: 5 };
    let dim = cur.u32("header")? as usize;
    let reserved = cur.u32("header")?;
    if reserved != 0 {
        return Err(EmbError::Format(format!(
            "reserved header field is {reserved}, expected 0"
        )));
    }

    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let record_start = cur.pos;
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| EmbError::Corruption {
                offset: record_start + 2,
                message: "id is not valid UTF-8".into(),
            })?
            .to_string();
        let n = cur.u32("token count")? as usize;
        if n == 0 || dim == 0 {
            return Err(EmbError::Data {
                id,
                message: format!("empty embedding ({n}x{dim})"),
            });
        }
        let len = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| EmbError::Corruption {
                offset: cur.pos,
                message: "declared matrix size overflows".into(),
            })?;
        let raw = cur.take(len, "values")?;
        let mut data = Vec::with_capacity(n * dim);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(EmbError::Data {
                    id,
                    message: "non-finite value".into(),
                });
            }
            data.push(f64::from(v));
        }
        out.push(SentenceEmbedding {
            id,
            matrix: Matrix::from_vec(n, dim, data),
        });
    }
    Ok(out)
}

/// One exported checkpoint for one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: String,
    pub seed: u64,
    /// 0 is the pretrained model before fine-tuning.
    pub checkpoint_index: u32,
    pub epoch_fraction: f64,
    pub layer: u32,
    /// Relative to the manifest file.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CheckpointManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CheckpointManifest {
    pub fn validate(&self) -> Result<(), EmbError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !(e.epoch_fraction >= 0.0 && e.epoch_fraction.is_finite()) {
                return Err(EmbError::Manifest(format!(
                    "{}/{}/{}: epoch_fraction must be finite and >= 0",
                    e.task, e.seed, e.checkpoint_index
                )));
            }
            if !seen.insert((e.task.as_str(), e.seed, e.checkpoint_index)) {
                return Err(EmbError::Manifest(format!(
                    "duplicate entry for task {} seed {} checkpoint {}",
                    e.task, e.seed, e.checkpoint_index
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EmbError> {
        let manifest: CheckpointManifest =
            serde_json::from_str(text).map_err(|e| EmbError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Task names in order of first appearance.
    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.task) {
                out.push(e.task.clone());
            }
        }
        out
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: CheckpointManifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self, EmbError> {
        let text = fs::read_to_string(path)?;
        let manifest = CheckpointManifest::from_json(&text)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(LoadedManifest { manifest, base_dir })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }
}

#[derive(Clone, Debug)]
pub struct AlignedSentence {
    pub tree: SentenceTree,
    pub embedding: SentenceEmbedding,
}

#[derive(Clone, Debug, Default)]
pub struct AlignedDataset {
    /// Pairs in treebank order.
    pub sentences: Vec<AlignedSentence>,
    pub unmatched_trees: Vec<String>,
    pub unmatched_embeddings: Vec<String>,
}

impl AlignedDataset {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.sentences.first().map(|s| s.embedding.dim())
    }
}

/// Pairs embeddings with trees by id. Ids present on only one side are
/// reported; an id present on both sides with different token counts is an
/// error.
pub fn align(
    embeddings: Vec<SentenceEmbedding>,
    trees: &[SentenceTree],
) -> Result<AlignedDataset, EmbError> {
    let mut by_id: HashMap<String, SentenceEmbedding> = HashMap::with_capacity(embeddings.len());
    let mut emb_order = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        emb_order.push(e.id.clone());
        by_id.insert(e.id.clone(), e);
    }

    let mut out = AlignedDataset::default();
    for tree in trees {
        match by_id.remove(&tree.id) {
            Some(embedding) => {
                if embedding.len() != tree.len() {
                    return Err(EmbError::Alignment {
                        id: tree.id.clone(),
                        tree_tokens: tree.len(),
                        rows: embedding.len(),
                    });
                }
                out.sentences.push(AlignedSentence {
                    tree: tree.clone(),
                    embedding,
                });
            }
            None => out.unmatched_trees.push(tree.id.clone()),
        }
    }
    out.unmatched_embeddings = emb_order
        .into_iter()
        .filter(|id| by_id.contains_key(id))
        .collect();
    Ok(out)
}
