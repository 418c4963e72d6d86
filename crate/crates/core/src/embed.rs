//! Word-level representation providers and the entity vector store.
//!
//! Two providers produce per-token vectors: a trainable embedding table
//! built over the training vocabulary, and a precomputed store that reads
//! per-document token vectors exported by an external encoder. Entity
//! vectors live in a separate word2vec-text-format store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entity;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Document;

pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Token-to-id mapping. Id 0 is reserved for unknown tokens; the rest are
/// assigned in sorted token order so a given corpus always yields the same
/// mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(vocab: Vocab) -> Vec<String> {
        vocab.tokens
    }
}

impl Vocab {
    pub fn build(docs: &[Document]) -> Vocab {
        Vocab::from_tokens(docs.iter().flat_map(|d| d.tokens.iter()).map(|t| t.text.as_str()))
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vocab {
        let distinct: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != UNK_TOKEN).collect();
        let mut all = Vec::with_capacity(distinct.len() + 1);
        all.push(UNK_TOKEN.to_string());
        all.extend(distinct.into_iter().map(str::to_string));
        Vocab::from(all)
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-token vectors for one document plus a single document-level vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WordRepOutput {
    /// One row per document token.
    pub token_vectors: Tensor,
    /// 1 x d_w row summarizing the whole document.
    pub global_vector: Tensor,
}

/// Embedding table trained jointly with the rest of the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainableEmbedding {
    pub vocab: Vocab,
    /// vocab.len() x d_w; row 0 belongs to the unknown token.
    pub table: Tensor,
    /// 1 x d_w fallback used as the global vector of an empty document.
    pub empty_doc: Tensor,
}

impl TrainableEmbedding {
    pub fn new(vocab: Vocab, d_w: usize, rng: &mut impl Rng) -> TrainableEmbedding {
        let table = Tensor::glorot(vocab.len(), d_w, rng);
        TrainableEmbedding {
            vocab,
            table,
            empty_doc: Tensor::zeros(1, d_w),
        }
    }

    pub fn d_w(&self) -> usize {
        self.table.cols()
    }

    pub fn token_ids(&self, doc: &Document) -> Vec<usize> {
        doc.tokens
            .iter()
            .map(|t| self.vocab.id(&t.text))
            .collect()
    }

    pub fn represent(&self, doc: &Document) -> WordRepOutput {
        let d_w = self.d_w();
        if doc.tokens.is_empty() {
            return WordRepOutput {
                token_vectors: Tensor::zeros(0, d_w),
                global_vector: self.empty_doc.clone(),
            };
        }
        let ids = self.token_ids(doc);
        let mut data = Vec::with_capacity(ids.len() * d_w);
        for &id in &ids {
            data.extend_from_slice(self.table.row_slice(id));
        }
        let token_vectors = Tensor::from_vec(ids.len(), d_w, data).expect("table rows are finite");
        let mut mean = vec![0.0; d_w];
        for r in 0..token_vectors.rows() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += token_vectors.get(r, c);
            }
        }
        let n = token_vectors.rows() as f64;
        for m in &mut mean {
            *m /= n;
        }
        WordRepOutput {
            token_vectors,
            global_vector: Tensor::row(&mean).expect("finite mean"),
        }
    }
}

/// Per-document token vectors exported by an external encoder, one JSON
/// record per line: {"id": string, "vectors": [[...], ...]}.
#[derive(Debug, Clone)]
pub struct PrecomputedStore {
    dim: usize,
    vectors: HashMap<String, Tensor>,
}

#[derive(Deserialize)]
struct PrecomputedRecord {
    id: String,
    vectors: Vec<Vec<f64>>,
}

impl PrecomputedStore {
    pub fn load(path: impl AsRef<Path>) -> Result<PrecomputedStore> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        PrecomputedStore::load_from(std::io::BufReader::new(file))
    }

    pub fn load_from(reader: impl BufRead) -> Result<PrecomputedStore> {
        let mut dim: Option<usize> = None;
        let mut vectors = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::line(line_no, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: PrecomputedRecord = serde_json::from_str(&line)
                .map_err(|e| Error::line(line_no, format!("malformed record: {e}")))?;
            for row in &record.vectors {
                match dim {
                    None => dim = Some(row.len()),
                    Some(d) if d != row.len() => {
                        return Err(Error::line(
                            line_no,
                            format!("vector of length {} in a store of dimension {d}", row.len()),
                        ));
                    }
                    Some(_) => {}
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::line(line_no, "non-finite vector value".to_string()));
                }
            }
            if vectors.contains_key(&record.id) {
                return Err(Error::line(
                    line_no,
                    format!("duplicate vectors for document {}", record.id),
                ));
            }
            let d = dim.unwrap_or(0);
            let flat: Vec<f64> = record.vectors.iter().flatten().copied().collect();
            let tensor = Tensor::from_vec(record.vectors.len(), d, flat)?;
            vectors.insert(record.id, tensor);
        }
        Ok(PrecomputedStore {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn d_w(&self) -> usize {
        self.dim
    }

    pub fn represent(&self, doc: &Document) -> Result<WordRepOutput> {
        let token_vectors = self
            .vectors
            .get(&doc.id)
            .ok_or_else(|| Error::document(&doc.id, "no precomputed vectors for this document"))?;
        if token_vectors.rows() != doc.tokens.len() {
            return Err(Error::document(
                &doc.id,
                format!(
                    "precomputed vectors have {} rows but the document has {} tokens",
                    token_vectors.rows(),
                    doc.tokens.len()
                ),
            ));
        }
        let global_vector = if token_vectors.rows() == 0 {
            Tensor::zeros(1, self.dim)
        } else {
            let mut mean = vec![0.0; self.dim];
            for r in 0..token_vectors.rows() {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += token_vectors.get(r, c);
                }
            }
            let n = token_vectors.rows() as f64;
            for m in &mut mean {
                *m /= n;
            }
            Tensor::row(&mean)?
        };
        Ok(WordRepOutput {
            token_vectors: token_vectors.clone(),
            global_vector,
        })
    }
}

/// Either source of per-token vectors, behind one call.
#[derive(Debug, Clone)]
pub enum Provider {
    Trainable(TrainableEmbedding),
    Precomputed(PrecomputedStore),
}

impl Provider {
    pub fn d_w(&self) -> usize {
        match self {
            Provider::Trainable(t) => t.d_w(),
            Provider::Precomputed(p) => p.d_w(),
        }
    }

    pub fn represent(&self, doc: &Document) -> Result<WordRepOutput> {
        match self {
            Provider::Trainable(t) => Ok(t.represent(doc)),
            Provider::Precomputed(p) => p.represent(doc),
        }
    }
}

/// What an entity-vector lookup returns when the name is not stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissPolicy {
    /// Zero vector of width d_e.
    Zero,
    /// A shared trainable vector owned by the model.
    Unk,
}

impl MissPolicy {
    pub fn parse(s: &str) -> Result<MissPolicy> {
        match s {
            "zero" => Ok(MissPolicy::Zero),
            "unk" => Ok(MissPolicy::Unk),
            other => Err(Error::Config(format!(
                "unknown entity miss policy {other:?} (expected \"zero\" or \"unk\")"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MissPolicy::Zero => "zero",
            MissPolicy::Unk => "unk",
        }
    }
}

/// Fixed name-to-vector map for entity features. Keys are normalized
/// surfaces; underscores in the file are read as spaces.
#[derive(Debug, Clone)]
pub struct EntityVecStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

fn store_key(name: &str) -> String {
    entity::normalize(&name.replace('_', " "))
}

impl EntityVecStore {
    pub fn empty(dim: usize) -> EntityVecStore {
        EntityVecStore {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<EntityVecStore>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut store = EntityVecStore::empty(dim);
        for (name, vector) in entries {
            if vector.len() != dim {
                return Err(Error::invalid(format!(
                    "entity vector for {:?} has length {} but the store dimension is {dim}",
                    name.as_ref(),
                    vector.len()
                )));
            }
            store.vectors.insert(store_key(name.as_ref()), vector);
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact lookup by normalized surface; `None` means the miss policy
    /// decides what the caller substitutes.
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.vectors.get(&store_key(name)).map(Vec::as_slice)
    }

    pub fn lookup_or_zero(&self, name: &str) -> Vec<f64> {
        match self.get(name) {
            Some(v) => v.to_vec(),
            None => vec![0.0; self.dim],
        }
    }
}

/// Reads a word2vec-style text file: a "count dim" header line, then one
/// "name v1 .. v_dim" line per entity. Duplicate names keep the last
/// occurrence and print a warning to stderr.
pub fn load_vectors(path: impl AsRef<Path>) -> Result<EntityVecStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_vectors_from(std::io::BufReader::new(file))
}

pub fn load_vectors_from(reader: impl BufRead) -> Result<EntityVecStore> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::line(1, "empty vectors file, expected a \"count dim\" header"))?;
    let header = header.map_err(|e| Error::line(1, e.to_string()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::line(
            1,
            format!("expected a \"count dim\" header, got {header:?}"),
        ));
    }
    let declared_count: usize = parts[0]
        .parse()
        .map_err(|_| Error::line(1, format!("bad vector count {:?}", parts[0])))?;
    let dim: usize = parts[1]
        .parse()
        .map_err(|_| Error::line(1, format!("bad dimension {:?}", parts[1])))?;
    if dim == 0 {
        return Err(Error::line(1, "dimension must be at least 1"));
    }

    let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::line(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let name = fields.next().expect("non-blank line has a first field");
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::line(line_no, format!("bad vector value {f:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::line(
                line_no,
                format!("{} values for {name:?} but the header declares {dim}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::line(line_no, format!("non-finite value for {name:?}")));
        }
        let key = store_key(name);
        if key.is_empty() {
            return Err(Error::line(
                line_no,
                format!("name {name:?} normalizes to the empty string"),
            ));
        }
        seen += 1;
        if vectors.insert(key, values).is_some() {
            eprintln!("warning: duplicate entity vector for {name:?}, keeping the last");
        }
    }
    if seen != declared_count {
        eprintln!("warning: header declares {declared_count} vectors but the file has {seen}");
    }
    Ok(EntityVecStore { dim, vectors })
}
