//! Vocabularies, trainable lookup tables and GloVe-format initialisation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Ordered, de-duplicated token list. Id 0 is padding and id 1 is the
/// unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    /// A vocabulary holding only the padding and unknown entries.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            items: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD);
        v.insert(UNK);
        v
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.items.push(token.to_string());
        self.index.insert(token.to_string(), self.items.len() - 1);
        self.items.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        Self::PAD_ID
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK_ID
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(items: Vec<String>) -> std::result::Result<Self, String> {
        if items.len() < 2 || items[0] != PAD || items[1] != UNK {
            return Err("vocabulary must start with the padding and unknown tokens".into());
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, t) in items.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Vocabulary { items, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.items
    }
}

/// Tokens occurring at least `min_count` times, in first-occurrence order,
/// after the padding and unknown entries.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::invalid("build_vocab", "min_count must be at least 1"));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("build_vocab", "empty corpus"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.iter().flatten() {
        let tok = tok.as_ref();
        let c = counts.entry(tok).or_insert(0);
        if *c == 0 {
            order.push(tok);
        }
        *c += 1;
    }
    Ok(Vocabulary::from_tokens(
        order.into_iter().filter(|t| counts[t] >= min_count),
    ))
}

/// A lookup table whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub param: ParamId,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        vocab: Vocabulary,
        weights: Tensor,
        trainable: bool,
    ) -> Result<Self> {
        let (rows, dim) = weights.dims2();
        if rows != vocab.len() {
            return Err(Error::invalid(
                "embedding table",
                format!("{rows} rows for a vocabulary of {}", vocab.len()),
            ));
        }
        if !weights.all_finite() {
            return Err(Error::Numeric {
                op: "embedding table",
                msg: format!("{name} has non-finite rows"),
            });
        }
        let param = store.add(name, weights, trainable);
        Ok(EmbeddingTable { vocab, param, dim })
    }

    /// Registers a table with rows uniform in `[-0.1, 0.1]` and a zero
    /// padding row.
    pub fn random<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: Vocabulary,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = uniform_rows(vocab.len(), dim, rng);
        Self::register(store, name, vocab, weights, true)
    }

    pub fn trainable(&self, store: &ParamStore) -> bool {
        store.get(self.param).trainable
    }
}

pub(crate) fn uniform_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(&[rows, dim]);
    for x in t.data_mut() {
        *x = rng.gen_range(-0.1..=0.1);
    }
    for x in &mut t.data_mut()[Vocabulary::PAD_ID * dim..(Vocabulary::PAD_ID + 1) * dim] {
        *x = 0.0;
    }
    t
}

/// Statistics from a GloVe load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GloveStats {
    pub lines: usize,
    pub matched: usize,
}

/// Builds a `|V| × d` weight matrix from a GloVe text file.
///
/// Every row is first drawn uniformly from `[-0.1, 0.1]`; rows of words found
/// in the file are then overwritten and the padding row is zeroed. Each line
/// must be a token followed by exactly `d` floats, single-space separated.
pub fn load_glove<R: Rng>(path: &Path, vocab: &Vocabulary, d: usize, rng: &mut R) -> Result<(Tensor, GloveStats)> {
    let mut weights = uniform_rows(vocab.len(), d, rng);
    let reader = BufReader::new(File::open(path)?);
    let mut stats = GloveStats::default();
    let mut row = Vec::with_capacity(d);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        stats.lines += 1;
        let mut fields = line.split(' ');
        let word = fields.next().unwrap_or_default();
        row.clear();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("invalid float {f:?}")))?;
            row.push(v);
        }
        if row.len() != d {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected {d} values after {word:?}, found {}", row.len()),
            ));
        }
        if let Some(id) = vocab.get(word) {
            if id != Vocabulary::PAD_ID {
                weights.data_mut()[id * d..(id + 1) * d].copy_from_slice(&row);
                stats.matched += 1;
            }
        }
    }
    Ok((weights, stats))
}

/// Row gather from the table; gradients scatter back additively.
pub fn lookup(tape: &mut Tape<'_>, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
    let w = tape.param(table.param);
    tape.gather_rows(w, ids)
}
