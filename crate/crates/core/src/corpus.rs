//! Treebank and embedding ingestion.
//!
//! Reads CoNLL-U treebanks, word embedding tables in the `count dim` text
//! format, optional alignment matrices and externally produced per-token
//! vectors, and turns sentences into observation sequences for the model.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// The universal POS inventory, alphabetical. Tag ids index into this table.
pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

pub const NUM_UPOS: usize = UPOS_TAGS.len();

pub fn upos_id(tag: &str) -> Option<usize> {
    UPOS_TAGS.binary_search(&tag).ok()
}

pub fn upos_name(id: usize) -> &'static str {
    UPOS_TAGS[id]
}

pub fn punct_id() -> usize {
    upos_id("PUNCT").unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub sent_id: String,
    pub tokens: Vec<String>,
    pub upos: Vec<usize>,
    /// 0 is the artificial root; token positions are 1-based.
    pub heads: Option<Vec<usize>>,
    pub deprels: Option<Vec<String>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks length agreement, head range, a single root and acyclicity.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let l = self.tokens.len();
        if l == 0 {
            return Err("empty sentence".into());
        }
        if self.upos.len() != l {
            return Err("upos length differs from token count".into());
        }
        if let Some(deprels) = &self.deprels {
            if deprels.len() != l {
                return Err("deprel length differs from token count".into());
            }
        }
        if let Some(heads) = &self.heads {
            validate_heads(heads)?;
        }
        Ok(())
    }
}

/// Validates a head vector as a single-rooted tree over positions `1..=l`.
pub fn validate_heads(heads: &[usize]) -> std::result::Result<(), String> {
    let l = heads.len();
    if l == 0 {
        return Err("empty head vector".into());
    }
    if let Some(&h) = heads.iter().find(|&&h| h > l) {
        return Err(format!("head index {h} out of range for length {l}"));
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!("expected exactly one root, found {roots}"));
    }
    for start in 1..=l {
        let mut node = start;
        let mut steps = 0;
        while node != 0 {
            node = heads[node - 1];
            steps += 1;
            if steps > l {
                return Err(format!("cycle through token {start}"));
            }
        }
    }
    Ok(())
}

fn split_columns(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').collect()
    } else {
        line.split_whitespace().collect()
    }
}

#[derive(Default)]
struct Block {
    sent_id: Option<String>,
    tokens: Vec<String>,
    upos: Vec<usize>,
    heads: Vec<Option<usize>>,
    deprels: Vec<Option<String>>,
    first_line: usize,
}

impl Block {
    fn finish(self, index: usize) -> Result<Sentence> {
        let heads = if self.heads.iter().all(Option::is_some) {
            Some(self.heads.into_iter().map(Option::unwrap).collect())
        } else {
            None
        };
        let deprels = if self.deprels.iter().all(Option::is_some) {
            Some(self.deprels.into_iter().map(Option::unwrap).collect())
        } else {
            None
        };
        let sentence = Sentence {
            sent_id: self.sent_id.unwrap_or_else(|| (index + 1).to_string()),
            tokens: self.tokens,
            upos: self.upos,
            heads,
            deprels,
        };
        sentence
            .validate()
            .map_err(|m| Error::parse(self.first_line, m))?;
        Ok(sentence)
    }
}

/// Parses a CoNLL-U stream into sentences.
///
/// Multiword ranges (`1-2`) and empty nodes (`1.1`) are skipped. Comments are
/// dropped except `# sent_id = ...`. A `_` head or deprel column marks the
/// annotation as absent for the whole sentence.
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut block = Block::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            if !block.tokens.is_empty() {
                let done = std::mem::take(&mut block);
                sentences.push(done.finish(sentences.len())?);
            } else {
                block = Block::default();
            }
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    block.sent_id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let cols = split_columns(line);
        if cols.len() != 10 {
            return Err(Error::parse(
                line_no,
                format!("expected 10 columns, found {}", cols.len()),
            ));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let position: usize = id
            .parse()
            .map_err(|_| Error::parse(line_no, format!("invalid token id {id:?}")))?;
        if position != block.tokens.len() + 1 {
            return Err(Error::parse(
                line_no,
                format!("token id {position} out of sequence"),
            ));
        }
        if block.tokens.is_empty() {
            block.first_line = line_no;
        }
        let upos = upos_id(cols[3])
            .ok_or_else(|| Error::parse(line_no, format!("unknown UPOS tag {:?}", cols[3])))?;
        let head = match cols[6] {
            "_" => None,
            h => Some(
                h.parse::<usize>()
                    .map_err(|_| Error::parse(line_no, format!("non-integer head {h:?}")))?,
            ),
        };
        let deprel = match cols[7] {
            "_" => None,
            d => Some(d.to_string()),
        };
        block.tokens.push(cols[1].to_string());
        block.upos.push(upos);
        block.heads.push(head);
        block.deprels.push(deprel);
    }
    if !block.tokens.is_empty() {
        sentences.push(block.finish(sentences.len())?);
    }
    Ok(sentences)
}

pub fn parse_conllu_str(text: &str) -> Result<Vec<Sentence>> {
    parse_conllu(text.as_bytes())
}

/// Writes sentences as CoNLL-U. Columns the toolkit does not track are `_`.
pub fn write_conllu<W: Write>(mut out: W, sentences: &[Sentence]) -> Result<()> {
    for sentence in sentences {
        writeln!(out, "# sent_id = {}", sentence.sent_id)?;
        for i in 0..sentence.len() {
            let head = sentence
                .heads
                .as_ref()
                .map_or_else(|| "_".to_string(), |h| h[i].to_string());
            let deprel = sentence.deprels.as_ref().map_or("_", |d| d[i].as_str());
            writeln!(
                out,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                i + 1,
                sentence.tokens[i],
                upos_name(sentence.upos[i]),
                head,
                deprel
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Frozen word vectors keyed by surface form.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    // ordered so the fallback mean is summed the same way in every process
    entries: BTreeMap<String, Vec<f64>>,
    fallback: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table; the fallback is the componentwise mean of all entries.
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let entries: BTreeMap<String, Vec<f64>> = entries.into_iter().collect();
        if dim == 0 {
            return Err(Error::data("embedding dimension must be positive"));
        }
        if entries.is_empty() {
            return Err(Error::data("embedding table has no entries"));
        }
        let mut fallback = vec![0.0; dim];
        for (word, v) in &entries {
            if v.len() != dim {
                return Err(Error::data(format!(
                    "vector for {word:?} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            for (acc, x) in fallback.iter_mut().zip(v) {
                *acc += x;
            }
        }
        let n = entries.len() as f64;
        fallback.iter_mut().for_each(|x| *x /= n);
        Ok(EmbeddingTable {
            dim,
            entries,
            fallback,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    /// Raw form, then the lowercased form, then the mean vector.
    pub fn lookup(&self, word: &str) -> &[f64] {
        if let Some(v) = self.entries.get(word) {
            return v;
        }
        let lower = word.to_lowercase();
        if lower != word {
            if let Some(v) = self.entries.get(&lower) {
                return v;
            }
        }
        &self.fallback
    }

    /// Applies `x <- M x` to every entry and to the fallback.
    pub fn apply_alignment(&self, matrix: ArrayView2<f64>) -> Result<EmbeddingTable> {
        if matrix.nrows() != self.dim || matrix.ncols() != self.dim {
            return Err(Error::shape(format!(
                "alignment matrix is {}x{}, table dimension is {}",
                matrix.nrows(),
                matrix.ncols(),
                self.dim
            )));
        }
        let map = |v: &[f64]| -> Vec<f64> {
            matrix
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(v).map(|(m, x)| m * x).sum())
                .collect()
        };
        Ok(EmbeddingTable {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(w, v)| (w.clone(), map(v)))
                .collect(),
            fallback: map(&self.fallback),
        })
    }
}

fn parse_floats(fields: &[&str], line_no: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(line_no, format!("invalid number {f:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(line_no, format!("non-finite value {f:?}")))
            }
        })
        .collect()
}

/// Reads the `count dim` header format, one `token v1 ... vd` row per line.
pub fn load_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut lines = reader.lines().enumerate();
    let dim = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(Error::data("embedding file is empty"));
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let header: Vec<&str> = line.split_whitespace().collect();
        if header.len() != 2 {
            return Err(Error::parse(idx + 1, "expected header \"count dim\""));
        }
        let dim: usize = header[1]
            .parse()
            .map_err(|_| Error::parse(idx + 1, "invalid dimension in header"))?;
        break dim;
    };
    let mut entries = BTreeMap::new();
    let mut row = 0usize;
    for (idx, line) in lines {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        row += 1;
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                idx + 1,
                format!(
                    "embedding row {row} has {} values, header dimension is {dim}",
                    fields.len() - 1
                ),
            ));
        }
        let values = parse_floats(&fields[1..], idx + 1)?;
        entries.insert(fields[0].to_string(), values);
    }
    EmbeddingTable::new(dim, entries)
}

/// Reads a square matrix, one whitespace-separated row per line.
pub fn load_matrix<R: BufRead>(reader: R) -> Result<Array2<f64>> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        rows.push(parse_floats(&fields, idx + 1)?);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::data("matrix file is empty"));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != n) {
        return Err(Error::shape(format!(
            "matrix row {} has {} columns, expected {n}",
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).unwrap())
}

/// Per-token vectors produced outside this toolkit, keyed by `(sent_id, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualStore {
    dim: usize,
    vectors: HashMap<(String, usize), Vec<f64>>,
}

impl ContextualStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `position` is 1-based.
    pub fn get(&self, sent_id: &str, position: usize) -> Option<&[f64]> {
        self.vectors
            .get(&(sent_id.to_string(), position))
            .map(Vec::as_slice)
    }
}

/// Reads `sent_id \t index \t v1 ... vd` lines and checks coverage of `corpus`.
pub fn load_contextual_embeddings<R: BufRead>(
    reader: R,
    corpus: &[Sentence],
) -> Result<ContextualStore> {
    let mut vectors = HashMap::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(sent_id), Some(index), Some(rest)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::parse(line_no, "expected sent_id, index and vector"));
        };
        let index: usize = index
            .trim()
            .parse()
            .map_err(|_| Error::parse(line_no, format!("invalid token index {index:?}")))?;
        if index == 0 {
            return Err(Error::parse(line_no, "token index is 1-based"));
        }
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let values = parse_floats(&fields, line_no)?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    line_no,
                    format!("vector has dimension {}, expected {d}", values.len()),
                ))
            }
            _ => {}
        }
        let key = (sent_id.to_string(), index);
        if vectors.contains_key(&key) {
            return Err(Error::parse(
                line_no,
                format!("duplicate vector for ({sent_id}, {index})"),
            ));
        }
        vectors.insert(key, values);
    }
    let dim = dim.ok_or_else(|| Error::data("contextual vector file is empty"))?;
    if dim == 0 {
        return Err(Error::data("contextual vectors have dimension 0"));
    }
    for sentence in corpus {
        for position in 1..=sentence.len() {
            if !vectors.contains_key(&(sentence.sent_id.clone(), position)) {
                return Err(Error::data(format!(
                    "missing contextual vector for ({}, {position})",
                    sentence.sent_id
                )));
            }
        }
    }
    Ok(ContextualStore { dim, vectors })
}

/// Where the word half of each observation comes from.
#[derive(Debug, Clone, Copy)]
pub enum WordVectors<'a> {
    Table(&'a EmbeddingTable),
    Contextual(&'a ContextualStore),
}

impl WordVectors<'_> {
    pub fn dim(&self) -> usize {
        match self {
            WordVectors::Table(t) => t.dim(),
            WordVectors::Contextual(c) => c.dim(),
        }
    }
}

/// One sentence as the model sees it.
///
/// Row `i` of `x` starts with the frozen word vector (`word_dim` columns);
/// for parsing it is followed by the embedding of the token's gold tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSequence {
    pub x: Array2<f64>,
    pub word_dim: usize,
    pub upos: Vec<usize>,
    pub gold_heads: Option<Vec<usize>>,
}

impl ObservedSequence {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

pub fn build_observations(
    sentence: &Sentence,
    vectors: WordVectors<'_>,
    tag_embeddings: Option<ArrayView2<f64>>,
) -> Result<ObservedSequence> {
    let l = sentence.len();
    if l == 0 {
        return Err(Error::data("cannot build observations for an empty sentence"));
    }
    let word_dim = vectors.dim();
    let tag_dim = tag_embeddings.map_or(0, |t| t.ncols());
    let mut x = Array2::zeros((l, word_dim + tag_dim));
    for (i, token) in sentence.tokens.iter().enumerate() {
        let word = match vectors {
            WordVectors::Table(table) => table.lookup(token),
            WordVectors::Contextual(store) => {
                store.get(&sentence.sent_id, i + 1).ok_or_else(|| {
                    Error::data(format!(
                        "missing contextual vector for ({}, {})",
                        sentence.sent_id,
                        i + 1
                    ))
                })?
            }
        };
        let mut row = x.row_mut(i);
        for (dst, src) in row.iter_mut().zip(word) {
            *dst = *src;
        }
        if let Some(tags) = tag_embeddings {
            let tag = sentence.upos[i];
            if tag >= tags.nrows() {
                return Err(Error::data(format!("tag id {tag} has no tag embedding")));
            }
            for (d, v) in tags.row(tag).iter().enumerate() {
                row[word_dim + d] = *v;
            }
        }
    }
    Ok(ObservedSequence {
        x,
        word_dim,
        upos: sentence.upos.clone(),
        gold_heads: sentence.heads.clone(),
    })
}
