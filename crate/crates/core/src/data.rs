//! Corpus readers, sidecar annotations and seeded batching.
//!
//! Formats:
//!
//! * CoNLL columns: whitespace-separated, blank line between sentences,
//!   `-DOCSTART-` lines ignored.
//! * Classification TSV: `label<TAB>text`.
//! * Pair TSV: `label<TAB>sentence_a<TAB>sentence_b`.
//! * Edge sidecar: `example_id head dep relation`, 0-based token indices.
//!   For pair data sentence A of example `i` has id `2i` and sentence B `2i + 1`.
//! * POS sidecar: one line of space-separated tags per sentence, numbered
//!   like the edge sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A dependency arc as read from the sidecar.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawEdge {
    pub head: usize,
    pub dep: usize,
    pub rel: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub pos_tags: Option<Vec<String>>,
    pub edges: Vec<RawEdge>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Self {
        Sentence {
            tokens,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExampleKind {
    Classification,
    Tagging,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(String),
    Tags(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub sentence: Sentence,
    /// Second sentence of a pair example.
    pub sentence_b: Option<Sentence>,
    pub label: Label,
}

impl LabeledExample {
    pub fn classification(label: &str, tokens: Vec<String>) -> Self {
        LabeledExample {
            sentence: Sentence::new(tokens),
            sentence_b: None,
            label: Label::Class(label.to_string()),
        }
    }

    pub fn tagging(tokens: Vec<String>, tags: Vec<String>) -> Self {
        LabeledExample {
            sentence: Sentence::new(tokens),
            sentence_b: None,
            label: Label::Tags(tags),
        }
    }

    pub fn pair(label: &str, a: Vec<String>, b: Vec<String>) -> Self {
        LabeledExample {
            sentence: Sentence::new(a),
            sentence_b: Some(Sentence::new(b)),
            label: Label::Class(label.to_string()),
        }
    }

    pub fn kind(&self) -> ExampleKind {
        match (&self.label, &self.sentence_b) {
            (Label::Tags(_), _) => ExampleKind::Tagging,
            (Label::Class(_), Some(_)) => ExampleKind::Pair,
            (Label::Class(_), None) => ExampleKind::Classification,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.sentence.tokens
    }

    pub fn class(&self) -> Option<&str> {
        match &self.label {
            Label::Class(c) => Some(c),
            Label::Tags(_) => None,
        }
    }

    pub fn tags(&self) -> Option<&[String]> {
        match &self.label {
            Label::Tags(t) => Some(t),
            Label::Class(_) => None,
        }
    }

    /// Total tokens across both sentences.
    pub fn len(&self) -> usize {
        self.sentence.len() + self.sentence_b.as_ref().map_or(0, Sentence::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        std::iter::once(&self.sentence).chain(self.sentence_b.as_ref())
    }

    fn sentences_mut(&mut self) -> impl Iterator<Item = &mut Sentence> {
        std::iter::once(&mut self.sentence).chain(self.sentence_b.as_mut())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences().any(Sentence::is_empty) {
            return Err(Error::invalid("example", "empty sentence"));
        }
        if let Label::Tags(t) = &self.label {
            if t.len() != self.sentence.len() {
                return Err(Error::invalid(
                    "example",
                    format!("{} tags for {} tokens", t.len(), self.sentence.len()),
                ));
            }
        }
        for s in self.sentences() {
            if s.pos_tags.as_ref().is_some_and(|p| p.len() != s.len()) {
                return Err(Error::invalid("example", "POS tag count differs from token count"));
            }
            for e in &s.edges {
                if e.head >= s.len() || e.dep >= s.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "sentence",
                        index: e.head.max(e.dep),
                        size: s.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Column positions of a CoNLL file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConllColumns {
    pub token: usize,
    pub tag: usize,
    pub pos: Option<usize>,
}

impl ConllColumns {
    /// CoNLL-2000 chunking: token, POS, chunk tag.
    pub const CHUNKING: ConllColumns = ConllColumns {
        token: 0,
        tag: 2,
        pos: Some(1),
    };
    /// CoNLL-2003 NER: token, POS, chunk, entity tag.
    pub const NER: ConllColumns = ConllColumns {
        token: 0,
        tag: 3,
        pos: Some(1),
    };

    fn required(&self) -> usize {
        self.token.max(self.tag).max(self.pos.unwrap_or(0)) + 1
    }
}

pub fn parse_conll(path: &Path, token_col: usize, tag_col: usize) -> Result<Vec<LabeledExample>> {
    parse_conll_with(
        path,
        ConllColumns {
            token: token_col,
            tag: tag_col,
            pos: None,
        },
    )
}

/// One tagging example per sentence; also reads POS tags when `cols.pos` is set.
pub fn parse_conll_with(path: &Path, cols: ConllColumns) -> Result<Vec<LabeledExample>> {
    let text = read(path)?;
    let need = cols.required();
    let mut out = Vec::new();
    let mut cur: Option<(Vec<String>, Vec<String>, Vec<String>)> = None;
    let flush = |cur: &mut Option<(Vec<String>, Vec<String>, Vec<String>)>, out: &mut Vec<LabeledExample>| {
        if let Some((tokens, tags, pos)) = cur.take() {
            let mut ex = LabeledExample::tagging(tokens, tags);
            if cols.pos.is_some() {
                ex.sentence.pos_tags = Some(pos);
            }
            out.push(ex);
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut cur, &mut out);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < need {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected at least {need} columns, found {}", fields.len()),
            ));
        }
        let (tokens, tags, pos) = cur.get_or_insert_with(Default::default);
        tokens.push(fields[cols.token].to_string());
        tags.push(fields[cols.tag].to_string());
        if let Some(p) = cols.pos {
            pos.push(fields[p].to_string());
        }
    }
    flush(&mut cur, &mut out);
    Ok(out)
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// `label<TAB>text` lines; blank lines are skipped, empty text is an error.
pub fn parse_classification_tsv(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "missing tab between label and text"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::parse(path, i + 1, "empty label"));
        }
        let tokens = tokenize(body);
        if tokens.is_empty() {
            return Err(Error::parse(path, i + 1, "empty text"));
        }
        out.push(LabeledExample::classification(label, tokens));
    }
    Ok(out)
}

/// `label<TAB>sentence_a<TAB>sentence_b` lines.
pub fn parse_pairs(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label = fields[0].trim();
        let (a, b) = (tokenize(fields[1]), tokenize(fields[2]));
        if label.is_empty() || a.is_empty() || b.is_empty() {
            return Err(Error::parse(path, i + 1, "empty label or sentence"));
        }
        out.push(LabeledExample::pair(label, a, b));
    }
    Ok(out)
}

pub type EdgeMap = BTreeMap<usize, Vec<RawEdge>>;

/// Reads the edge sidecar. A missing file yields an empty map; repeated
/// lines are kept once.
pub fn parse_edges(path: &Path) -> Result<EdgeMap> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(EdgeMap::new()),
        Err(e) => return Err(Error::parse(path, 0, e.to_string())),
    };
    let mut seen = BTreeSet::new();
    let mut map = EdgeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, i + 1, format!("{what} {s:?} is not a non-negative integer")))
        };
        let id = num(fields[0], "example id")?;
        let edge = RawEdge {
            head: num(fields[1], "head index")?,
            dep: num(fields[2], "dependent index")?,
            rel: fields[3].to_string(),
        };
        if seen.insert((id, edge.clone())) {
            map.entry(id).or_default().push(edge);
        }
    }
    Ok(map)
}

/// Sidecar id of sentence `slot` (0 or 1) of example `index`.
fn sidecar_id(pairs: bool, index: usize, slot: usize) -> usize {
    if pairs {
        2 * index + slot
    } else {
        index
    }
}

/// Attaches sidecar edges, checking every index against its sentence.
pub fn attach_edges(examples: &mut [LabeledExample], edges: &EdgeMap) -> Result<()> {
    let pairs = examples.iter().any(|e| e.kind() == ExampleKind::Pair);
    let slots: usize = if pairs { 2 } else { 1 };
    if let Some((&id, _)) = edges.iter().next_back() {
        if id >= examples.len() * slots {
            return Err(Error::IndexOutOfRange {
                what: "edge sidecar example ids",
                index: id,
                size: examples.len() * slots,
            });
        }
    }
    for (i, ex) in examples.iter_mut().enumerate() {
        for (slot, s) in ex.sentences_mut().enumerate() {
            let list = edges.get(&sidecar_id(pairs, i, slot)).cloned().unwrap_or_default();
            for e in &list {
                if e.head >= s.len() || e.dep >= s.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "sentence (edge sidecar)",
                        index: e.head.max(e.dep),
                        size: s.len(),
                    });
                }
            }
            s.edges = list;
        }
    }
    Ok(())
}

/// Reads a POS sidecar: one line of tags per sentence.
pub fn parse_pos_sidecar(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read(path)?.lines().map(tokenize).collect())
}

pub fn attach_pos_tags(examples: &mut [LabeledExample], tags: &[Vec<String>]) -> Result<()> {
    let pairs = examples.iter().any(|e| e.kind() == ExampleKind::Pair);
    for (i, ex) in examples.iter_mut().enumerate() {
        for (slot, s) in ex.sentences_mut().enumerate() {
            let id = sidecar_id(pairs, i, slot);
            let t = tags.get(id).ok_or(Error::IndexOutOfRange {
                what: "POS sidecar lines",
                index: id,
                size: tags.len(),
            })?;
            if t.len() != s.len() {
                return Err(Error::invalid(
                    "attach_pos_tags",
                    format!("sentence {id}: {} tags for {} tokens", t.len(), s.len()),
                ));
            }
            s.pos_tags = Some(t.clone());
        }
    }
    Ok(())
}

/// Rewrites IOB1 chunk tags as BIO: an `I-X` that does not continue an
/// `X` chunk opens one.
pub fn iob1_to_bio(tags: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev_type: Option<&str> = None;
    for t in tags {
        match t.split_once('-') {
            Some(("I", ty)) if prev_type != Some(ty) => {
                out.push(format!("B-{ty}"));
                prev_type = Some(ty);
            }
            Some(("B" | "I", ty)) => {
                out.push(t.clone());
                prev_type = Some(ty);
            }
            _ => {
                out.push(t.clone());
                prev_type = None;
            }
        }
    }
    out
}

/// Canonical two-column CoNLL text (`token tag`), readable with columns 0 and 1.
pub fn write_conll(examples: &[LabeledExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        if let Some(tags) = ex.tags() {
            for (tok, tag) in ex.tokens().iter().zip(tags) {
                let _ = writeln!(s, "{tok} {tag}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_classification_tsv(examples: &[LabeledExample]) -> String {
    examples
        .iter()
        .filter_map(|ex| ex.class().map(|c| format!("{c}\t{}\n", ex.tokens().join(" "))))
        .collect()
}

pub fn write_pairs(examples: &[LabeledExample]) -> String {
    examples
        .iter()
        .filter_map(|ex| {
            let b = ex.sentence_b.as_ref()?;
            Some(format!(
                "{}\t{}\t{}\n",
                ex.class()?,
                ex.tokens().join(" "),
                b.tokens.join(" ")
            ))
        })
        .collect()
}

/// A group of example indices processed together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Seeded shuffle, stable sort by length so batches hold similar lengths,
/// then a seeded shuffle of the batch order.
pub fn make_batches(examples: &[LabeledExample], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let lengths: Vec<usize> = examples.iter().map(LabeledExample::len).collect();
    batches_by_length(&lengths, batch_size, seed)
}

pub fn batches_by_length(lengths: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("make_batches", "batch_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Puts per-batch outputs back in original example order.
pub fn unbatch<T>(batches: &[Batch], outputs: Vec<Vec<T>>) -> Result<Vec<T>> {
    let total: usize = batches.iter().map(|b| b.indices.len()).sum();
    let mut slots: Vec<Option<T>> = (0..total).map(|_| None).collect();
    if outputs.len() != batches.len() {
        return Err(Error::invalid("unbatch", "one output list per batch required"));
    }
    for (b, outs) in batches.iter().zip(outputs) {
        if outs.len() != b.indices.len() {
            return Err(Error::invalid("unbatch", "output count differs from batch size"));
        }
        for (&i, o) in b.indices.iter().zip(outs) {
            let slot = slots.get_mut(i).ok_or(Error::IndexOutOfRange {
                what: "batched examples",
                index: i,
                size: total,
            })?;
            if slot.replace(o).is_some() {
                return Err(Error::invalid("unbatch", format!("index {i} appears twice")));
            }
        }
    }
    slots
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::invalid("unbatch", "indices are not a permutation")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn file(text: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn strings(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn conll_basic() {
        let f = file("He PRP B-NP\nruns VBZ B-VP\n\n");
        let ex = parse_conll(f.path(), 0, 2).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].tokens(), strings("He runs"));
        assert_eq!(ex[0].tags().unwrap(), strings("B-NP B-VP"));
        assert!(ex[0].sentence.pos_tags.is_none());

        let with_pos = parse_conll_with(f.path(), ConllColumns::CHUNKING).unwrap();
        assert_eq!(with_pos[0].sentence.pos_tags.as_deref(), Some(&strings("PRP VBZ")[..]));
    }

    #[test]
    fn conll_edge_cases() {
        assert!(parse_conll(file("").path(), 0, 2).unwrap().is_empty());
        let plain = parse_conll(file("a X B-NP\n\nb Y O").path(), 0, 2).unwrap();
        let padded = parse_conll(file("-DOCSTART- -X- O\n\na X B-NP\n\nb Y O\n\n\n\n").path(), 0, 2).unwrap();
        assert_eq!(plain, padded);
        assert_eq!(plain.len(), 2);

        let err = parse_conll(file("a X B-NP\nb Y\n").path(), 0, 2).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tsv_cases() {
        let ex = parse_classification_tsv(file("1\tgood movie\n0\tbad\n1\tfine film\n").path()).unwrap();
        assert_eq!(ex[0].class(), Some("1"));
        assert_eq!(ex[0].tokens(), strings("good movie"));
        assert_eq!(ex[0].kind(), ExampleKind::Classification);
        let labels: BTreeSet<_> = ex.iter().filter_map(|e| e.class()).collect();
        assert_eq!(labels.len(), 2);

        for bad in ["1 good movie\n", "1\t   \n", "\tgood\n"] {
            let e = parse_classification_tsv(file(bad).path()).unwrap_err();
            assert!(matches!(e, Error::Parse { line: 1, .. }), "{bad:?}: {e}");
        }
    }

    #[test]
    fn pair_cases() {
        let ex = parse_pairs(file("entail\ta man sleeps\ta person rests\n").path()).unwrap();
        assert_eq!(ex[0].kind(), ExampleKind::Pair);
        assert_eq!(ex[0].len(), 6);
        assert_eq!(ex[0].sentence_b.as_ref().unwrap().tokens, strings("a person rests"));
        for bad in ["x\ta b\n", "x\ta\tb\tc\n", "x\t\tb\n"] {
            assert!(matches!(
                parse_pairs(file(bad).path()),
                Err(Error::Parse { line: 1, .. })
            ));
        }
    }

    #[test]
    fn edge_sidecar() {
        let map = parse_edges(file("0 1 0 det\n0 1 0 det\n2 0 1 nsubj\n").path()).unwrap();
        assert_eq!(
            map[&0],
            vec![RawEdge {
                head: 1,
                dep: 0,
                rel: "det".into()
            }]
        );
        assert_eq!(map.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        assert!(parse_edges(&dir.path().join("absent.txt")).unwrap().is_empty());
        assert!(matches!(
            parse_edges(file("0 1 det\n").path()),
            Err(Error::Parse { line: 1, .. })
        ));

        let mut ex = vec![
            LabeledExample::classification("a", strings("the cat")),
            LabeledExample::classification("b", strings("x")),
            LabeledExample::classification("a", strings("cats sleep")),
        ];
        attach_edges(&mut ex, &map).unwrap();
        assert_eq!(ex[0].sentence.edges.len(), 1);
        assert_eq!(ex[2].sentence.edges[0].rel, "nsubj");

        let out_of_range = parse_edges(file("1 0 1 det\n").path()).unwrap();
        assert!(attach_edges(&mut ex, &out_of_range).is_err());
    }

    #[test]
    fn pair_sidecars_use_two_ids_per_example() {
        let mut ex = vec![LabeledExample::pair("y", strings("a b"), strings("c d e"))];
        let map = parse_edges(file("1 2 0 obj\n").path()).unwrap();
        attach_edges(&mut ex, &map).unwrap();
        assert!(ex[0].sentence.edges.is_empty());
        assert_eq!(ex[0].sentence_b.as_ref().unwrap().edges.len(), 1);

        let tags = parse_pos_sidecar(file("DT NN\nDT NN VB\n").path()).unwrap();
        attach_pos_tags(&mut ex, &tags).unwrap();
        assert_eq!(ex[0].sentence_b.as_ref().unwrap().pos_tags.as_ref().unwrap().len(), 3);
        assert!(attach_pos_tags(&mut ex, &tags[..1]).is_err());
    }

    #[test]
    fn iob1_conversion() {
        let t = |s: &str| strings(s);
        assert_eq!(
            iob1_to_bio(&t("I-PER I-PER O I-LOC B-LOC I-LOC I-ORG")),
            t("B-PER I-PER O B-LOC B-LOC I-LOC B-ORG")
        );
        assert_eq!(iob1_to_bio(&t("B-NP I-NP O")), t("B-NP I-NP O"));
    }

    #[test]
    fn batching_cases() {
        let ex: Vec<_> = (0..7)
            .map(|i| LabeledExample::classification("a", vec!["w".into(); 1 + i % 3]))
            .collect();
        let single = make_batches(&ex, 1, 3).unwrap();
        assert_eq!(single.len(), 7);
        let mut order: Vec<usize> = single.iter().map(|b| b.indices[0]).collect();
        order.sort();
        assert_eq!(order, (0..7).collect::<Vec<_>>());

        assert_eq!(make_batches(&ex, 3, 11).unwrap(), make_batches(&ex, 3, 11).unwrap());
        assert!(make_batches(&ex, 0, 1).is_err());

        let batches = make_batches(&ex, 3, 5).unwrap();
        let outputs: Vec<Vec<usize>> = batches.iter().map(|b| b.indices.clone()).collect();
        assert_eq!(unbatch(&batches, outputs).unwrap(), (0..7).collect::<Vec<_>>());
    }
}
