//! Node attributes `v_i` and edge attributes `e_ij` of a sentence graph.
//!
//! Node attribute blocks are concatenated in a fixed order:
//! position, BiLSTM context, characters, POS tag, spelling. Saved models
//! depend on this order.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embedding::{lookup, uniform_rows, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relation name used for word pairs without a dependency arc.
pub const NO_EDGE: &str = "<none>";

/// Number of spelling classes: capitalised, lowercase, other.
pub const SPELL_CLASSES: usize = 3;

/// Spelling class of a token: 0 if its first character is uppercase,
/// 1 if lowercase, 2 otherwise.
pub fn spell_id(token: &str) -> usize {
    match token.chars().next() {
        Some(c) if c.is_uppercase() => 0,
        Some(c) if c.is_lowercase() => 1,
        _ => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAttrConfig {
    pub use_position: bool,
    pub use_lstm_context: bool,
    pub use_char: bool,
    pub use_pos_tag: bool,
    pub use_spell: bool,
    pub lstm_hidden: usize,
    pub char_conv_width: usize,
}

impl Default for NodeAttrConfig {
    fn default() -> Self {
        NodeAttrConfig {
            use_position: false,
            use_lstm_context: true,
            use_char: false,
            use_pos_tag: false,
            use_spell: false,
            lstm_hidden: 100,
            char_conv_width: 3,
        }
    }
}

impl NodeAttrConfig {
    pub fn any_enabled(&self) -> bool {
        self.use_position || self.use_lstm_context || self.use_char || self.use_pos_tag || self.use_spell
    }
}

/// A dependency arc between two tokens, with a relation id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DepEdge {
    pub head: usize,
    pub dep: usize,
    pub rel: usize,
}

/// One sentence ready for the encoder: ids for every attribute stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceGraph {
    pub tokens: Vec<String>,
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub pos_tag_ids: Option<Vec<usize>>,
    pub spell_ids: Vec<usize>,
    pub dep_edges: Vec<DepEdge>,
}

impl SentenceGraph {
    pub fn n(&self) -> usize {
        self.word_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::invalid("sentence graph", "sentence has no tokens"));
        }
        if self.char_ids.len() != n || self.spell_ids.len() != n || self.tokens.len() != n {
            return Err(Error::invalid("sentence graph", "attribute streams differ in length"));
        }
        if self.pos_tag_ids.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::invalid("sentence graph", "POS tag stream differs in length"));
        }
        if self.char_ids.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid("sentence graph", "token without characters"));
        }
        for e in &self.dep_edges {
            if e.head >= n || e.dep >= n {
                return Err(Error::IndexOutOfRange {
                    what: "sentence",
                    index: e.head.max(e.dep),
                    size: n,
                });
            }
        }
        Ok(())
    }
}

/// Learned position table with one row per position up to the length cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionTable {
    pub param: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionTable {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, max_len: usize, dim: usize, rng: &mut R) -> Self {
        let param = store.add_uniform(name, &[max_len, dim], 0.1, rng);
        PositionTable { param, max_len, dim }
    }
}

/// Row `i` is the embedding of position `i`.
pub fn encode_positions(tape: &mut Tape<'_>, n: usize, table: &PositionTable) -> Result<Var> {
    if n > table.max_len {
        return Err(Error::SentenceTooLong {
            len: n,
            max: table.max_len,
        });
    }
    let ids: Vec<usize> = (0..n).collect();
    let w = tape.param(table.param);
    tape.gather_rows(w, &ids)
}

/// Character embeddings, a width-`w` convolution and max-over-time pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharEncoder {
    pub table: EmbeddingTable,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub width: usize,
    pub out_dim: usize,
}

impl CharEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: Vocabulary,
        dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("char encoder", "convolution width must be at least 1"));
        }
        let table = EmbeddingTable::random(store, &format!("{prefix}.emb"), vocab, dim, rng)?;
        let conv_w = store.add_uniform(format!("{prefix}.conv_w"), &[width * dim, dim], 0.1, rng);
        let conv_b = store.add_uniform(format!("{prefix}.conv_b"), &[dim], 0.1, rng);
        Ok(CharEncoder {
            table,
            conv_w,
            conv_b,
            width,
            out_dim: dim,
        })
    }
}

/// One pooled vector per token. Padding characters are dropped before the
/// convolution, so no window is centred on them and they contribute nothing
/// to the max.
pub fn encode_chars(tape: &mut Tape<'_>, char_ids: &[Vec<usize>], enc: &CharEncoder) -> Result<Var> {
    let mut flat = Vec::new();
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(char_ids.len());
    for chars in char_ids {
        let start = flat.len();
        flat.extend(chars.iter().copied().filter(|&c| c != Vocabulary::PAD_ID));
        if flat.len() == start {
            return Err(Error::invalid("encode_chars", "token has only padding characters"));
        }
        segments.push(start..flat.len());
    }
    let emb = lookup(tape, &enc.table, &flat)?;
    let win = tape.windows(emb, &segments, enc.width)?;
    let w = tape.param(enc.conv_w);
    let b = tape.param(enc.conv_b);
    let conv = tape.matmul(win, w)?;
    let conv = tape.add_row(conv, b)?;
    tape.segment_max(conv, &segments)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = store.add_uniform(format!("{prefix}.w_x"), &[d_in, 4 * hidden], 0.1, rng);
        let w_h = store.add_uniform(format!("{prefix}.w_h"), &[hidden, 4 * hidden], 0.1, rng);
        // gate layout is [input, forget, cell, output]; forget bias starts at 1
        let mut b = Tensor::zeros(&[4 * hidden]);
        for (j, x) in b.data_mut().iter_mut().enumerate() {
            *x = if (hidden..2 * hidden).contains(&j) {
                1.0
            } else {
                rng.gen_range(-0.1..=0.1)
            };
        }
        let b = store.add(format!("{prefix}.b"), b, true);
        LstmParams { w_x, w_h, b }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiLstm {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            forward: LstmParams::new(store, &format!("{prefix}.fwd"), d_in, hidden, rng),
            backward: LstmParams::new(store, &format!("{prefix}.bwd"), d_in, hidden, rng),
            hidden,
        }
    }
}

fn lstm_direction(tape: &mut Tape<'_>, x: Var, p: &LstmParams, hidden: usize, reverse: bool) -> Result<Var> {
    let n = tape.value(x).rows();
    let w_x = tape.param(p.w_x);
    let w_h = tape.param(p.w_h);
    let b = tape.param(p.b);
    let xw = tape.matmul(x, w_x)?;
    let xw = tape.add_row(xw, b)?;

    let mut outputs: Vec<Option<Var>> = vec![None; n];
    let mut state: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for t in order {
        let mut gates = tape.slice_rows(xw, t..t + 1)?;
        if let Some((h_prev, _)) = state {
            let rec = tape.matmul(h_prev, w_h)?;
            gates = tape.add(gates, rec)?;
        }
        let i = tape.slice_cols(gates, 0..hidden)?;
        let i = tape.sigmoid(i);
        let g = tape.slice_cols(gates, 2 * hidden..3 * hidden)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * hidden..4 * hidden)?;
        let o = tape.sigmoid(o);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let f = tape.slice_cols(gates, hidden..2 * hidden)?;
            let f = tape.sigmoid(f);
            let keep = tape.mul(f, c_prev)?;
            c = tape.add(c, keep)?;
        }
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        outputs[t] = Some(h);
        state = Some((h, c));
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    tape.concat_rows(&outputs)
}

/// Left-to-right and right-to-left LSTMs with zero initial states; row `t`
/// is `[forward_t, backward_t]`.
pub fn bilstm_context(tape: &mut Tape<'_>, word_vecs: Var, lstm: &BiLstm) -> Result<Var> {
    let f = lstm_direction(tape, word_vecs, &lstm.forward, lstm.hidden, false)?;
    let b = lstm_direction(tape, word_vecs, &lstm.backward, lstm.hidden, true)?;
    tape.concat_cols(&[f, b])
}

/// Parameters of every enabled node-attribute source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeAttrEncoders {
    pub cfg: NodeAttrConfig,
    pub position: Option<PositionTable>,
    pub lstm: Option<BiLstm>,
    pub chars: Option<CharEncoder>,
    pub pos_tags: Option<EmbeddingTable>,
    pub spell: Option<ParamId>,
}

impl NodeAttrEncoders {
    /// Width of `v`, the sum of all enabled attribute widths.
    pub fn width(&self, store: &ParamStore) -> usize {
        let spell = self.spell.map_or(0, |id| store.value(id).cols());
        self.position.as_ref().map_or(0, |p| p.dim)
            + self.lstm.as_ref().map_or(0, |l| 2 * l.hidden)
            + self.chars.as_ref().map_or(0, |c| c.out_dim)
            + self.pos_tags.as_ref().map_or(0, |t| t.dim)
            + spell
    }
}

/// Builds `spell` table parameters: one row per spelling class.
pub fn spell_table<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> ParamId {
    let mut t = uniform_rows(SPELL_CLASSES + 1, dim, rng);
    // uniform_rows zeroes row 0; spelling classes have no padding row
    t = Tensor::from_parts(vec![SPELL_CLASSES, dim], t.data()[dim..].to_vec());
    store.add(name, t, true)
}

/// Word embeddings `h⁰` and the concatenated node attributes `v`
/// (`None` when no attribute is enabled).
pub fn assemble_node_attrs(
    tape: &mut Tape<'_>,
    g: &SentenceGraph,
    words: &EmbeddingTable,
    enc: &NodeAttrEncoders,
) -> Result<(Var, Option<Var>)> {
    g.validate()?;
    let h0 = lookup(tape, words, &g.word_ids)?;
    let mut blocks = Vec::new();
    if let Some(pos) = &enc.position {
        blocks.push(encode_positions(tape, g.n(), pos)?);
    }
    if let Some(lstm) = &enc.lstm {
        blocks.push(bilstm_context(tape, h0, lstm)?);
    }
    if let Some(chars) = &enc.chars {
        blocks.push(encode_chars(tape, &g.char_ids, chars)?);
    }
    if let Some(tags) = &enc.pos_tags {
        let ids = g
            .pos_tag_ids
            .as_ref()
            .ok_or_else(|| Error::invalid("assemble_node_attrs", "POS tags required but missing"))?;
        blocks.push(lookup(tape, tags, ids)?);
    }
    if let Some(spell) = enc.spell {
        let w = tape.param(spell);
        blocks.push(tape.gather_rows(w, &g.spell_ids)?);
    }
    let v = if blocks.is_empty() {
        None
    } else {
        Some(tape.concat_cols(&blocks)?)
    };
    Ok((h0, v))
}

/// Relation id of every ordered pair, row-major: `ids[i·n + k]`.
///
/// Arcs are undirected here: `(i, k)` and `(k, i)` share the arc's relation.
/// Self-pairs and unconnected pairs use the no-edge entry.
pub fn edge_relation_ids(g: &SentenceGraph, no_edge: usize) -> Vec<usize> {
    let n = g.n();
    let mut ids = vec![no_edge; n * n];
    let mut edges = g.dep_edges.clone();
    edges.sort();
    // first arc wins when both directions carry different relations
    for e in edges.iter().rev() {
        if e.head == e.dep {
            continue;
        }
        ids[e.head * n + e.dep] = e.rel;
        ids[e.dep * n + e.head] = e.rel;
    }
    ids
}

/// `n² × d_e` matrix of edge attributes; row `i·n + k` describes pair `(i, k)`.
pub fn assemble_edge_attrs(tape: &mut Tape<'_>, g: &SentenceGraph, relations: &EmbeddingTable) -> Result<Var> {
    let no_edge = relations
        .vocab
        .get(NO_EDGE)
        .ok_or_else(|| Error::invalid("assemble_edge_attrs", "relation vocabulary lacks the no-edge entry"))?;
    let ids = edge_relation_ids(g, no_edge);
    lookup(tape, relations, &ids)
}

/// Relation vocabulary with the no-edge entry at a fixed id.
pub fn relation_vocab<I, S>(relations: I) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut v = Vocabulary::new();
    v.insert(NO_EDGE);
    for r in relations {
        v.insert(r.as_ref());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn graph(n: usize) -> SentenceGraph {
        SentenceGraph {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            word_ids: (0..n).map(|i| 2 + i % 3).collect(),
            char_ids: (0..n).map(|i| vec![2 + i % 4, 3]).collect(),
            pos_tag_ids: Some(vec![2; n]),
            spell_ids: (0..n).map(|i| i % 3).collect(),
            dep_edges: vec![],
        }
    }

    #[test]
    fn spelling_classes() {
        assert_eq!(spell_id("Paris"), 0);
        assert_eq!(spell_id("paris"), 1);
        assert_eq!(spell_id("42"), 2);
        assert_eq!(spell_id("Élan"), 0);
    }

    #[test]
    fn positions_are_table_rows() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let table = PositionTable::new(&mut store, "pos", 8, 4, &mut r);
        let mut tape = Tape::new(&store);
        let one = encode_positions(&mut tape, 1, &table).unwrap();
        assert_eq!(tape.value(one).data(), store.value(table.param).row(0));
        let a = encode_positions(&mut tape, 5, &table).unwrap();
        let b = encode_positions(&mut tape, 5, &table).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_ne!(tape.value(a).row(1), tape.value(a).row(2));
        assert!(matches!(
            encode_positions(&mut tape, 9, &table),
            Err(Error::SentenceTooLong { len: 9, max: 8 })
        ));
    }

    fn char_encoder(store: &mut ParamStore, width: usize) -> CharEncoder {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
        CharEncoder::new(store, "char", vocab, 4, width, &mut rng()).unwrap()
    }

    #[test]
    fn single_char_width_one_is_plain_projection() {
        let mut store = ParamStore::new();
        let enc = char_encoder(&mut store, 1);
        let mut tape = Tape::new(&store);
        let out = encode_chars(&mut tape, &[vec![3]], &enc).unwrap();
        let emb = store.value(enc.table.param).row(3).to_vec();
        let w = store.value(enc.conv_w);
        let b = store.value(enc.conv_b).data();
        for c in 0..4 {
            let expect: f64 = b[c] + (0..4).map(|k| emb[k] * w.get(k, c)).sum::<f64>();
            assert!((tape.value(out).get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn character_order_matters_for_wide_windows() {
        let mut store = ParamStore::new();
        let enc = char_encoder(&mut store, 3);
        let mut tape = Tape::new(&store);
        let ab = encode_chars(&mut tape, &[vec![2, 3]], &enc).unwrap();
        let ba = encode_chars(&mut tape, &[vec![3, 2]], &enc).unwrap();
        assert!(tape.value(ab).max_abs_diff(tape.value(ba)) > 1e-6);
    }

    #[test]
    fn padding_characters_do_not_change_the_pooled_vector() {
        let mut store = ParamStore::new();
        let enc = char_encoder(&mut store, 3);
        let mut tape = Tape::new(&store);
        let plain = encode_chars(&mut tape, &[vec![2, 3, 4]], &enc).unwrap();
        let pad = Vocabulary::PAD_ID;
        let padded = encode_chars(&mut tape, &[vec![2, 3, 4, pad, pad]], &enc).unwrap();
        assert_eq!(tape.value(plain), tape.value(padded));
        assert!(encode_chars(&mut tape, &[vec![pad]], &enc).is_err());
    }

    fn input(tape: &mut Tape<'_>, n: usize, d: usize, seed: u64) -> (Tensor, Var) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::matrix(n, d, (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        (t.clone(), tape.constant(t))
    }

    #[test]
    fn bilstm_single_token_and_zero_weights() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 3, 2, &mut rng());
        let mut tape = Tape::new(&store);
        let (_, x) = input(&mut tape, 1, 3, 1);
        let out = bilstm_context(&mut tape, x, &lstm).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4]);

        let mut zero = store.clone();
        for id in zero.ids().collect::<Vec<_>>() {
            let shape = zero.value(id).shape().to_vec();
            *zero.value_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new(&zero);
        let (_, x) = input(&mut tape, 4, 3, 2);
        let out = bilstm_context(&mut tape, x, &lstm).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_directions_are_causal() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 3, 2, &mut rng());
        let mut tape = Tape::new(&store);
        let (mut t, x) = input(&mut tape, 5, 3, 3);
        let base = bilstm_context(&mut tape, x, &lstm).unwrap();
        let base = tape.value(base).clone();
        // mutate token 3: forward half of rows 0..3 and backward half of rows 4.. fixed
        for c in 0..3 {
            t.data_mut()[3 * 3 + c] += 0.7;
        }
        let x2 = tape.constant(t);
        let moved = bilstm_context(&mut tape, x2, &lstm).unwrap();
        let moved = tape.value(moved);
        for r in 0..5 {
            let (fwd_same, bwd_same) = (
                base.row(r)[..2] == moved.row(r)[..2],
                base.row(r)[2..] == moved.row(r)[2..],
            );
            assert_eq!(fwd_same, r < 3, "forward row {r}");
            assert_eq!(bwd_same, r > 3, "backward row {r}");
        }
    }

    fn encoders(store: &mut ParamStore, cfg: NodeAttrConfig, d_word: usize) -> NodeAttrEncoders {
        let mut r = rng();
        NodeAttrEncoders {
            position: cfg
                .use_position
                .then(|| PositionTable::new(store, "position", 256, 20, &mut r)),
            lstm: cfg
                .use_lstm_context
                .then(|| BiLstm::new(store, "lstm", d_word, cfg.lstm_hidden, &mut r)),
            chars: cfg.use_char.then(|| {
                CharEncoder::new(
                    store,
                    "char",
                    Vocabulary::from_tokens(["a", "b", "c", "d"]),
                    50,
                    3,
                    &mut r,
                )
                .unwrap()
            }),
            pos_tags: cfg
                .use_pos_tag
                .then(|| EmbeddingTable::random(store, "postag", Vocabulary::from_tokens(["NN"]), 20, &mut r).unwrap()),
            spell: cfg.use_spell.then(|| spell_table(store, "spell", 10, &mut r)),
            cfg,
        }
    }

    fn words(store: &mut ParamStore) -> EmbeddingTable {
        EmbeddingTable::random(store, "word", Vocabulary::from_tokens(["x", "y", "z"]), 6, &mut rng()).unwrap()
    }

    #[test]
    fn attribute_widths() {
        let off = NodeAttrConfig {
            use_lstm_context: false,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let w = words(&mut store);
        let enc = encoders(&mut store, off.clone(), 6);
        let mut tape = Tape::new(&store);
        let (h0, v) = assemble_node_attrs(&mut tape, &graph(3), &w, &enc).unwrap();
        assert!(v.is_none());
        assert_eq!(tape.value(h0).shape(), &[3, 6]);

        let mut store = ParamStore::new();
        let w = words(&mut store);
        let enc = encoders(
            &mut store,
            NodeAttrConfig {
                use_position: true,
                ..off.clone()
            },
            6,
        );
        assert_eq!(enc.width(&store), 20);

        let mut store = ParamStore::new();
        let w2 = words(&mut store);
        let enc = encoders(
            &mut store,
            NodeAttrConfig {
                use_lstm_context: true,
                use_char: true,
                lstm_hidden: 100,
                ..off
            },
            6,
        );
        assert_eq!(enc.width(&store), 250);
        let mut tape = Tape::new(&store);
        let (_, v) = assemble_node_attrs(&mut tape, &graph(3), &w2, &enc).unwrap();
        assert_eq!(tape.value(v.unwrap()).shape(), &[3, 250]);
        let _ = w;
    }

    #[test]
    fn all_sources_concatenate_in_documented_order() {
        let cfg = NodeAttrConfig {
            use_position: true,
            use_lstm_context: true,
            use_char: true,
            use_pos_tag: true,
            use_spell: true,
            lstm_hidden: 3,
            char_conv_width: 3,
        };
        let mut store = ParamStore::new();
        let w = words(&mut store);
        let enc = encoders(&mut store, cfg, 6);
        let g = graph(4);
        let mut tape = Tape::new(&store);
        let (_, v) = assemble_node_attrs(&mut tape, &g, &w, &enc).unwrap();
        let v = tape.value(v.unwrap()).clone();
        assert_eq!(v.cols(), 20 + 6 + 50 + 20 + 10);
        let spell = store.value(enc.spell.unwrap());
        let pos = store.value(enc.position.as_ref().unwrap().param);
        for r in 0..4 {
            assert_eq!(&v.row(r)[..20], pos.row(r));
            assert_eq!(&v.row(r)[96..], spell.row(g.spell_ids[r]));
        }

        // determinism
        let mut tape2 = Tape::new(&store);
        let (_, v2) = assemble_node_attrs(&mut tape2, &g, &w, &enc).unwrap();
        assert_eq!(&v, tape2.value(v2.unwrap()));

        let mut missing = g.clone();
        missing.pos_tag_ids = None;
        let mut tape3 = Tape::new(&store);
        assert!(assemble_node_attrs(&mut tape3, &missing, &w, &enc).is_err());
    }

    #[test]
    fn edge_attributes_are_symmetric_with_no_edge_default() {
        let mut store = ParamStore::new();
        let rels = relation_vocab(["det", "nsubj"]);
        let table = EmbeddingTable::random(&mut store, "rel", rels.clone(), 5, &mut rng()).unwrap();
        let mut g = graph(3);
        let mut tape = Tape::new(&store);
        let e = assemble_edge_attrs(&mut tape, &g, &table).unwrap();
        let no_edge = store.value(table.param).row(rels.id(NO_EDGE)).to_vec();
        assert_eq!(tape.value(e).shape(), &[9, 5]);
        for r in 0..9 {
            assert_eq!(tape.value(e).row(r), no_edge.as_slice());
        }

        g.dep_edges = vec![DepEdge {
            head: 1,
            dep: 0,
            rel: rels.id("det"),
        }];
        let e = assemble_edge_attrs(&mut tape, &g, &table).unwrap();
        let det = store.value(table.param).row(rels.id("det"));
        assert_eq!(tape.value(e).row(3), det);
        assert_eq!(tape.value(e).row(1), det);
        for i in 0..3 {
            assert_eq!(tape.value(e).row(i * 3 + i), no_edge.as_slice());
        }
    }

    #[test]
    fn graph_validation() {
        let mut g = graph(2);
        g.dep_edges.push(DepEdge {
            head: 0,
            dep: 5,
            rel: 3,
        });
        assert!(g.validate().is_err());
        let mut g = graph(2);
        g.char_ids[1].clear();
        assert!(g.validate().is_err());
    }

    #[test]
    fn encoders_pass_grad_check() {
        let cfg = NodeAttrConfig {
            use_position: true,
            use_lstm_context: true,
            use_char: true,
            use_pos_tag: true,
            use_spell: true,
            lstm_hidden: 2,
            char_conv_width: 3,
        };
        let mut store = ParamStore::new();
        let w = words(&mut store);
        let mut r = rng();
        let enc = NodeAttrEncoders {
            position: Some(PositionTable::new(&mut store, "position", 8, 2, &mut r)),
            lstm: Some(BiLstm::new(&mut store, "lstm", 6, 2, &mut r)),
            chars: Some(
                CharEncoder::new(
                    &mut store,
                    "char",
                    Vocabulary::from_tokens(["a", "b", "c", "d"]),
                    3,
                    3,
                    &mut r,
                )
                .unwrap(),
            ),
            pos_tags: Some(
                EmbeddingTable::random(&mut store, "postag", Vocabulary::from_tokens(["NN"]), 2, &mut r).unwrap(),
            ),
            spell: Some(spell_table(&mut store, "spell", 2, &mut r)),
            cfg,
        };
        let g = graph(3);
        let weights: Vec<f64> = (0..3 * 13).map(|_| r.gen_range(-1.0..1.0)).collect();
        let report = crate::autodiff::grad_check(&mut store, 1e-5, |tape| {
            let (h0, v) = assemble_node_attrs(tape, &g, &w, &enc)?;
            let v = v.unwrap();
            let wt = tape.constant(Tensor::matrix(3, 13, weights.clone())?);
            let p = tape.mul(v, wt)?;
            let t = tape.tanh(p);
            let a = tape.sum_all(t);
            let sq = tape.mul(h0, h0)?;
            let b = tape.sum_all(sq);
            tape.add(a, b)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
