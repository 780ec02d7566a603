//! CoNLL-U reading and gold tree geometry.
//!
//! Token positions are 1-based in [`Token::index`] and [`Token::head`] to
//! match the file format; every derived structure (distance matrices, depth
//! vectors, edge sets, masks) is indexed from 0.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use log::warn;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreebankError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sentence {sentence}: {message}")]
    Validation { sentence: String, message: String },
}

/// An undirected edge between two 0-based token positions, stored with the
/// smaller position first.
pub type Edge = (usize, usize);

pub fn edge(a: usize, b: usize) -> Edge {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub form: String,
    pub upos: String,
    /// Head position, 1-based; 0 is the virtual root.
    pub head: usize,
    /// Position in the sentence, 1-based.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceTree {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl SentenceTree {
    /// Builds a tree from forms/tags and 1-based heads, checking tree validity.
    pub fn from_heads(
        id: impl Into<String>,
        heads: &[usize],
        upos: Option<&[&str]>,
    ) -> Result<Self, TreebankError> {
        let tokens = heads
            .iter()
            .enumerate()
            .map(|(i, &head)| Token {
                form: format!("w{}", i + 1),
                upos: upos.map_or("X", |u| u[i]).to_string(),
                head,
                index: i + 1,
            })
            .collect();
        let tree = SentenceTree {
            id: id.into(),
            tokens,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    /// 0-based position of the token attached to the virtual root.
    pub fn root(&self) -> usize {
        self.tokens
            .iter()
            .position(|t| t.head == 0)
            .expect("validated tree has a root")
    }

    fn invalid(&self, message: impl Into<String>) -> TreebankError {
        TreebankError::Validation {
            sentence: self.id.clone(),
            message: message.into(),
        }
    }

    /// Checks that the head relation forms a single tree rooted at the
    /// head-0 token.
    pub fn validate(&self) -> Result<(), TreebankError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(self.invalid("sentence has no tokens"));
        }
        let mut roots = 0;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.index != i + 1 {
                return Err(self.invalid(format!(
                    "token at position {} has index {}",
                    i + 1,
                    tok.index
                )));
            }
            if tok.head > n {
                return Err(self.invalid(format!(
                    "token {} has head {} outside 0..={n}",
                    tok.index, tok.head
                )));
            }
            if tok.head == tok.index {
                return Err(self.invalid(format!("token {} is its own head", tok.index)));
            }
            if tok.head == 0 {
                roots += 1;
            }
        }
        if roots != 1 {
            return Err(self.invalid(format!("expected exactly one root, found {roots}")));
        }

        // Follow head pointers; a walk longer than n steps means a cycle.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while self.tokens[cur].head != 0 {
                cur = self.tokens[cur].head - 1;
                steps += 1;
                if steps > n {
                    return Err(self.invalid(format!(
                        "cycle in head assignment reachable from token {}",
                        start + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Renders the tree as one CoNLL-U block (with trailing blank line).
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# sent_id = {}", self.id);
        for t in &self.tokens {
            let deprel = if t.head == 0 { "root" } else { "dep" };
            let _ = writeln!(
                out,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                t.index, t.form, t.upos, t.head, deprel
            );
        }
        out.push('\n');
        out
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for (i, t) in self.tokens.iter().enumerate() {
            if t.head != 0 {
                adj[i].push(t.head - 1);
                adj[t.head - 1].push(i);
            }
        }
        adj
    }
}

/// Pairwise path lengths (in edges) between tokens of one tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.row(i).iter().map(|&x| f64::from(x)).collect())
            .collect()
    }
}

/// Per-token depth below the root; the root has depth 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthVector(pub Vec<u32>);

impl DepthVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn root(&self) -> usize {
        self.0
            .iter()
            .position(|&d| d == 0)
            .expect("depth vector has a root")
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&d| f64::from(d)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Log and drop sentences that fail tree validation instead of failing.
    pub skip_invalid: bool,
}

pub fn parse_conllu(text: &str) -> Result<Vec<SentenceTree>, TreebankError> {
    parse_conllu_with(text, ParseOptions::default())
}

/// Parses a CoNLL-U document. Sentence ids come from `# sent_id = ...`
/// comments; sentences without one are named by their 1-based ordinal in the
/// document.
pub fn parse_conllu_with(
    text: &str,
    options: ParseOptions,
) -> Result<Vec<SentenceTree>, TreebankError> {
    let mut trees = Vec::new();
    let mut ordinal = 0usize;
    let mut id: Option<String> = None;
    let mut tokens: Vec<Token> = Vec::new();
    let mut in_sentence = false;

    let mut finish = |id: &mut Option<String>,
                      tokens: &mut Vec<Token>,
                      ordinal: &mut usize|
     -> Result<(), TreebankError> {
        *ordinal += 1;
        let tree = SentenceTree {
            id: id.take().unwrap_or_else(|| ordinal.to_string()),
            tokens: std::mem::take(tokens),
        };
        match tree.validate() {
            Ok(()) => trees.push(tree),
            Err(e) if options.skip_invalid => warn!("skipping invalid sentence: {e}"),
            Err(e) => return Err(e),
        }
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if in_sentence {
                finish(&mut id, &mut tokens, &mut ordinal)?;
                in_sentence = false;
            }
            continue;
        }
        in_sentence = true;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    id = Some(value.trim().to_string());
                }
            }
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(TreebankError::Parse {
                line: line_no,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        let id_col = cols[0];
        if id_col.contains('-') || id_col.contains('.') {
            // Multiword ranges and empty nodes are not syntactic words.
            continue;
        }
        let index: usize = id_col.parse().map_err(|_| TreebankError::Parse {
            line: line_no,
            message: format!("invalid token id {id_col:?}"),
        })?;
        if index != tokens.len() + 1 {
            return Err(TreebankError::Parse {
                line: line_no,
                message: format!(
                    "token id {index} out of sequence, expected {}",
                    tokens.len() + 1
                ),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| TreebankError::Parse {
            line: line_no,
            message: format!("invalid head {:?}", cols[6]),
        })?;
        tokens.push(Token {
            form: cols[1].to_string(),
            upos: cols[3].to_string(),
            head,
            index,
        });
    }
    if in_sentence {
        finish(&mut id, &mut tokens, &mut ordinal)?;
    }
    Ok(trees)
}

/// All-pairs path lengths by breadth-first search from every token.
pub fn gold_distances(tree: &SentenceTree) -> DistanceMatrix {
    let n = tree.len();
    let adj = tree.adjacency();
    let mut data = vec![u32::MAX; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for src in 0..n {
        let row = &mut data[src * n..(src + 1) * n];
        row[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if row[v] == u32::MAX {
                    row[v] = row[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    DistanceMatrix { n, data }
}

pub fn gold_depths(tree: &SentenceTree) -> DepthVector {
    let n = tree.len();
    let mut depth: Vec<Option<u32>> = vec![None; n];
    for start in 0..n {
        let mut chain = Vec::new();
        let mut cur = start;
        let base = loop {
            if let Some(d) = depth[cur] {
                break d;
            }
            let head = tree.tokens[cur].head;
            if head == 0 {
                depth[cur] = Some(0);
                break 0;
            }
            chain.push(cur);
            cur = head - 1;
        };
        for (k, &node) in chain.iter().rev().enumerate() {
            depth[node] = Some(base + k as u32 + 1);
        }
    }
    DepthVector(
        depth
            .into_iter()
            .map(|d| d.expect("every token reached"))
            .collect(),
    )
}

/// Undirected (head, dependent) pairs, excluding the virtual-root attachment.
pub fn gold_edges(tree: &SentenceTree) -> BTreeSet<Edge> {
    tree.tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.head != 0)
        .map(|(i, t)| edge(i, t.head - 1))
        .collect()
}

pub fn punctuation_mask(tree: &SentenceTree) -> Vec<bool> {
    tree.tokens.iter().map(|t| t.upos == "PUNCT").collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: usize, form: &str, upos: &str, head: usize) -> String {
        format!("{id}\t{form}\t_\t{upos}\t_\t_\t{head}\tdep\t_\t_")
    }

    #[test]
    fn parses_minimal_sentence() {
        let doc = format!(
            "# sent_id = s1\n# text = I saw it\n{}\n{}\n{}\n\n",
            line(1, "I", "PRON", 2),
            line(2, "saw", "VERB", 0),
            line(3, "it", "PRON", 2)
        );
        let trees = parse_conllu(&doc).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].id, "s1");
        assert_eq!(trees[0].heads(), vec![2, 0, 2]);
        assert_eq!(trees[0].tokens[1].form, "saw");
    }

    #[test]
    fn skips_multiword_ranges_and_empty_nodes() {
        let doc = format!(
            "1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n{}\n{}\n2.1\tx\t_\tX\t_\t_\t_\t_\t_\t_\n{}\n",
            line(1, "do", "AUX", 3),
            line(2, "n't", "PART", 3),
            line(3, "go", "VERB", 0)
        );
        let trees = parse_conllu(&doc).unwrap();
        assert_eq!(trees[0].len(), 3);
        assert_eq!(trees[0].tokens[0].form, "do");
        assert_eq!(trees[0].id, "1");
    }

    #[test]
    fn head_out_of_range_names_sentence() {
        let doc = format!(
            "# sent_id = bad\n{}\n{}\n{}\n",
            line(1, "a", "X", 9),
            line(2, "b", "X", 0),
            line(3, "c", "X", 2)
        );
        match parse_conllu(&doc) {
            Err(TreebankError::Validation { sentence, .. }) => assert_eq!(sentence, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let doc = format!("# sent_id = a\n{}\n2\tb\tX\n", line(1, "a", "X", 0));
        assert_eq!(
            parse_conllu(&doc),
            Err(TreebankError::Parse {
                line: 3,
                message: "expected 10 tab-separated columns, found 3".into()
            })
        );
    }

    #[test]
    fn rejects_cycles_and_multiple_roots() {
        let cyclic = format!(
            "{}\n{}\n{}\n",
            line(1, "a", "X", 2),
            line(2, "b", "X", 1),
            line(3, "c", "X", 0)
        );
        assert!(matches!(
            parse_conllu(&cyclic),
            Err(TreebankError::Validation { .. })
        ));
        let two_roots = format!("{}\n{}\n", line(1, "a", "X", 0), line(2, "b", "X", 0));
        assert!(matches!(
            parse_conllu(&two_roots),
            Err(TreebankError::Validation { .. })
        ));
    }

    #[test]
    fn skip_invalid_drops_bad_sentences() {
        let doc = format!(
            "# sent_id = bad\n{}\n{}\n\n# sent_id = good\n{}\n",
            line(1, "a", "X", 0),
            line(2, "b", "X", 0),
            line(1, "c", "X", 0)
        );
        let trees = parse_conllu_with(&doc, ParseOptions { skip_invalid: true }).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(trees[0].id, "good");
    }

    #[test]
    fn path_tree_geometry() {
        let t = SentenceTree::from_heads("p", &[2, 3, 0], None).unwrap();
        let d = gold_distances(&t);
        assert_eq!(
            d.to_f64_rows(),
            vec![
                vec![0.0, 1.0, 2.0],
                vec![1.0, 0.0, 1.0],
                vec![2.0, 1.0, 0.0]
            ]
        );
        assert_eq!(gold_depths(&t), DepthVector(vec![2, 1, 0]));
        assert_eq!(gold_edges(&t), BTreeSet::from([(0, 1), (1, 2)]));
    }

    #[test]
    fn star_tree_geometry() {
        let t = SentenceTree::from_heads("s", &[0, 1, 1, 1, 1], None).unwrap();
        let d = gold_distances(&t);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(matches!(d.get(i, j), 1 | 2));
                }
            }
        }
        assert_eq!(d.get(1, 2), 2);
        assert_eq!(gold_depths(&t), DepthVector(vec![0, 1, 1, 1, 1]));
    }

    #[test]
    fn punctuation_masks() {
        let t =
            SentenceTree::from_heads("m", &[2, 0, 2], Some(&["NOUN", "VERB", "PUNCT"])).unwrap();
        assert_eq!(punctuation_mask(&t), vec![false, false, true]);
        let t = SentenceTree::from_heads("c", &[0, 1], Some(&["NOUN", "VERB"])).unwrap();
        assert_eq!(punctuation_mask(&t), vec![false, false]);
        let t = SentenceTree::from_heads("p", &[0, 1], Some(&["PUNCT", "PUNCT"])).unwrap();
        assert_eq!(punctuation_mask(&t), vec![true, true]);
    }

    #[test]
    fn conllu_render_round_trips() {
        let t = SentenceTree::from_heads("r", &[2, 0, 2, 3], None).unwrap();
        let back = parse_conllu(&t.to_conllu()).unwrap();
        assert_eq!(back, vec![t]);
    }
}
