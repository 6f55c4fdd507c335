//! The full network: featurisation, encoder stack, head, loss and decoding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::crf::CrfParams;
use crate::data::{LabeledExample, Sentence};
use crate::embedding::{build_vocab, load_glove, EmbeddingTable, GloveStats, Vocabulary};
use crate::encoders::{
    assemble_edge_attrs, assemble_node_attrs, relation_vocab, spell_id, spell_table, BiLstm, CharEncoder, DepEdge,
    NodeAttrConfig, NodeAttrEncoders, PositionTable, SentenceGraph,
};
use crate::error::{Error, Result};
use crate::heads::{class_nll, graph_pool_classify, node_crf_head, pair_classify, ClassifierParams, CrfOutput};
use crate::layer::{AlphaTrace, Cn3Stack, LayerDims};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Tag,
    Match,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "tag" => Ok(Task::Tag),
            "match" => Ok(Task::Match),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected classify, tag or match)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Tag => "tag",
            Task::Match => "match",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub attrs: NodeAttrConfig,
    pub use_dep: bool,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub edge_dim: usize,
    pub position_dim: usize,
    pub char_dim: usize,
    pub pos_tag_dim: usize,
    pub spell_dim: usize,
    pub layers: usize,
    pub max_len: usize,
    pub fine_tune_words: bool,
}

impl ModelConfig {
    pub fn new(task: Task) -> Self {
        ModelConfig {
            task,
            attrs: NodeAttrConfig::default(),
            use_dep: false,
            word_dim: 100,
            hidden_dim: 100,
            attn_dim: 100,
            edge_dim: 20,
            position_dim: 20,
            char_dim: 50,
            pos_tag_dim: 20,
            spell_dim: 10,
            layers: 2,
            max_len: 256,
            fine_tune_words: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("max_len", self.max_len),
        ];
        let optional = [
            ("edge_dim", self.edge_dim, self.use_dep),
            ("position_dim", self.position_dim, self.attrs.use_position),
            ("char_dim", self.char_dim, self.attrs.use_char),
            ("pos_tag_dim", self.pos_tag_dim, self.attrs.use_pos_tag),
            ("spell_dim", self.spell_dim, self.attrs.use_spell),
            ("lstm_hidden", self.attrs.lstm_hidden, self.attrs.use_lstm_context),
            ("char_conv_width", self.attrs.char_conv_width, self.attrs.use_char),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v, used) in optional {
            if used && v == 0 {
                return Err(Error::Config(format!("{name} must be positive when enabled")));
            }
        }
        Ok(())
    }
}

/// Every vocabulary the model depends on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub words: Vocabulary,
    pub chars: Vocabulary,
    pub pos_tags: Option<Vocabulary>,
    pub relations: Option<Vocabulary>,
    pub labels: Vec<String>,
}

fn chars_of(token: &str) -> Vec<String> {
    token.chars().map(String::from).collect()
}

impl Vocabs {
    /// Words are lowercased; characters keep their case.
    pub fn build(cfg: &ModelConfig, examples: &[LabeledExample], min_count: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("Vocabs::build", "no training examples"));
        }
        let sentences: Vec<&Sentence> = examples.iter().flat_map(LabeledExample::sentences).collect();
        let lowered: Vec<Vec<String>> = sentences
            .iter()
            .map(|s| s.tokens.iter().map(|t| t.to_lowercase()).collect())
            .collect();
        let words = build_vocab(&lowered, min_count)?;
        let char_corpus: Vec<Vec<String>> = sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| chars_of(t)))
            .collect();
        let chars = build_vocab(&char_corpus, 1)?;
        let pos_tags = if cfg.attrs.use_pos_tag {
            let tags: Vec<Vec<String>> = sentences
                .iter()
                .map(|s| {
                    s.pos_tags
                        .clone()
                        .ok_or_else(|| Error::Config("POS tags enabled but missing from the data".into()))
                })
                .collect::<Result<_>>()?;
            Some(build_vocab(&tags, 1)?)
        } else {
            None
        };
        let relations = cfg
            .use_dep
            .then(|| relation_vocab(sentences.iter().flat_map(|s| s.edges.iter().map(|e| e.rel.as_str()))));
        let mut labels: Vec<String> = Vec::new();
        for ex in examples {
            let found: Vec<&String> = match &ex.label {
                crate::data::Label::Class(c) => vec![c],
                crate::data::Label::Tags(t) => t.iter().collect(),
            };
            for l in found {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        Ok(Vocabs {
            words,
            chars,
            pos_tags,
            relations,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    Classifier(ClassifierParams),
    Crf(CrfParams),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    Tags(Vec<usize>),
}

/// Parameters, vocabularies and structure of one trained or fresh model.
#[derive(Clone, Debug)]
pub struct Cn3Model {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub store: ParamStore,
    pub words: EmbeddingTable,
    pub attrs: NodeAttrEncoders,
    pub relations: Option<EmbeddingTable>,
    pub stack: Cn3Stack,
    pub head: Head,
    pub seed: u64,
}

/// Examples per gradient shard; shards run in parallel and are summed in
/// index order, so results do not depend on the thread count.
const SHARD: usize = 4;

impl Cn3Model {
    /// Fresh model with every parameter drawn from a generator seeded by
    /// `seed`. Word vectors come from `glove` when given.
    pub fn initialise(
        config: ModelConfig,
        vocabs: Vocabs,
        glove: Option<&Path>,
        seed: u64,
    ) -> Result<(Self, Option<GloveStats>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (words, stats) = match glove {
            Some(path) => {
                let (w, stats) = load_glove(path, &vocabs.words, config.word_dim, &mut rng)?;
                let t = EmbeddingTable::register(&mut store, "words", vocabs.words.clone(), w, config.fine_tune_words)?;
                (t, Some(stats))
            }
            None => {
                let mut t =
                    EmbeddingTable::random(&mut store, "words", vocabs.words.clone(), config.word_dim, &mut rng)?;
                store.get_mut(t.param).trainable = config.fine_tune_words;
                t.dim = config.word_dim;
                (t, None)
            }
        };

        let a = &config.attrs;
        let position = a
            .use_position
            .then(|| PositionTable::new(&mut store, "position", config.max_len, config.position_dim, &mut rng));
        let lstm = a
            .use_lstm_context
            .then(|| BiLstm::new(&mut store, "lstm", config.word_dim, a.lstm_hidden, &mut rng));
        let chars = if a.use_char {
            Some(CharEncoder::new(
                &mut store,
                "chars",
                vocabs.chars.clone(),
                config.char_dim,
                a.char_conv_width,
                &mut rng,
            )?)
        } else {
            None
        };
        let pos_tags = match (&vocabs.pos_tags, a.use_pos_tag) {
            (Some(v), true) => Some(EmbeddingTable::random(
                &mut store,
                "pos_tags",
                v.clone(),
                config.pos_tag_dim,
                &mut rng,
            )?),
            (None, true) => return Err(Error::Config("POS tags enabled but no tag vocabulary".into())),
            _ => None,
        };
        let spell = a
            .use_spell
            .then(|| spell_table(&mut store, "spell", config.spell_dim, &mut rng));
        let attrs = NodeAttrEncoders {
            cfg: a.clone(),
            position,
            lstm,
            chars,
            pos_tags,
            spell,
        };
        let relations = match (&vocabs.relations, config.use_dep) {
            (Some(v), true) => Some(EmbeddingTable::random(
                &mut store,
                "relations",
                v.clone(),
                config.edge_dim,
                &mut rng,
            )?),
            (None, true) => {
                return Err(Error::Config(
                    "dependency edges enabled but no relation vocabulary".into(),
                ))
            }
            _ => None,
        };

        let d_v = attrs.width(&store);
        let dims = LayerDims {
            d_h: config.hidden_dim,
            d_v,
            d_e: relations.as_ref().map_or(0, |r| r.dim),
            d_attn: config.attn_dim,
        };
        let stack = Cn3Stack::new(&mut store, "cn3", config.word_dim + d_v, dims, config.layers, &mut rng);
        let n_labels = vocabs.labels.len();
        let head = match config.task {
            Task::Classify => Head::Classifier(ClassifierParams::new(
                &mut store,
                "cls",
                config.hidden_dim,
                n_labels,
                &mut rng,
            )?),
            Task::Match => Head::Classifier(ClassifierParams::new(
                &mut store,
                "cls",
                4 * config.hidden_dim,
                n_labels,
                &mut rng,
            )?),
            Task::Tag => {
                if n_labels == 0 {
                    return Err(Error::invalid("Cn3Model", "empty tag set"));
                }
                Head::Crf(CrfParams::new(&mut store, "crf", config.hidden_dim, n_labels, &mut rng))
            }
        };
        let model = Cn3Model {
            config,
            vocabs,
            store,
            words,
            attrs,
            relations,
            stack,
            head,
            seed,
        };
        Ok((model, stats))
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.vocabs.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.vocabs.labels.get(id).map(String::as_str)
    }

    /// Id streams for one sentence.
    pub fn graph(&self, s: &Sentence) -> Result<SentenceGraph> {
        let n = s.len();
        if n == 0 {
            return Err(Error::invalid("graph", "empty sentence"));
        }
        if n > self.config.max_len {
            return Err(Error::SentenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let v = &self.vocabs;
        let pos_tag_ids = match (&v.pos_tags, self.config.attrs.use_pos_tag) {
            (Some(tags), true) => {
                let t = s
                    .pos_tags
                    .as_ref()
                    .ok_or_else(|| Error::invalid("graph", "model uses POS tags but the sentence has none"))?;
                Some(t.iter().map(|x| tags.id(x)).collect())
            }
            _ => None,
        };
        let dep_edges = match &v.relations {
            Some(rels) => s
                .edges
                .iter()
                .map(|e| DepEdge {
                    head: e.head,
                    dep: e.dep,
                    rel: rels.id(&e.rel),
                })
                .collect(),
            None => Vec::new(),
        };
        let g = SentenceGraph {
            tokens: s.tokens.clone(),
            word_ids: s.tokens.iter().map(|t| v.words.id(&t.to_lowercase())).collect(),
            char_ids: s
                .tokens
                .iter()
                .map(|t| chars_of(t).iter().map(|c| v.chars.id(c)).collect())
                .collect(),
            pos_tag_ids,
            spell_ids: s.tokens.iter().map(|t| spell_id(t)).collect(),
            dep_edges,
        };
        g.validate()?;
        Ok(g)
    }

    /// Final node states and per-layer attention nodes for one sentence.
    pub fn encode(&self, tape: &mut Tape<'_>, g: &SentenceGraph) -> Result<(Var, Vec<Var>)> {
        let (words, v) = assemble_node_attrs(tape, g, &self.words, &self.attrs)?;
        let e = match &self.relations {
            Some(r) => Some(assemble_edge_attrs(tape, g, r)?),
            None => None,
        };
        let h0 = self.stack.initial_states(tape, words, v)?;
        self.stack.run(tape, h0, v, e)
    }

    fn classifier(&self) -> Result<&ClassifierParams> {
        match &self.head {
            Head::Classifier(c) => Ok(c),
            Head::Crf(_) => Err(Error::invalid("model", "tagging model has no classifier")),
        }
    }

    fn crf(&self) -> Result<&CrfParams> {
        match &self.head {
            Head::Crf(c) => Ok(c),
            Head::Classifier(_) => Err(Error::invalid("model", "classification model has no CRF")),
        }
    }

    /// Class log-probabilities (`1 × C`) for classification or pair examples.
    pub fn class_log_probs(&self, tape: &mut Tape<'_>, ex: &LabeledExample) -> Result<Var> {
        let p = self.classifier()?;
        let ga = self.graph(&ex.sentence)?;
        let (ha, _) = self.encode(tape, &ga)?;
        match (self.config.task, &ex.sentence_b) {
            (Task::Classify, None) => graph_pool_classify(tape, ha, p),
            (Task::Match, Some(b)) => {
                let gb = self.graph(b)?;
                let (hb, _) = self.encode(tape, &gb)?;
                pair_classify(tape, ha, hb, p)
            }
            _ => Err(Error::invalid(
                "model",
                format!("example kind does not fit a {} model", self.config.task),
            )),
        }
    }

    /// Scalar training loss of one example.
    pub fn example_loss(&self, tape: &mut Tape<'_>, ex: &LabeledExample) -> Result<Var> {
        match self.config.task {
            Task::Tag => {
                let tags = ex
                    .tags()
                    .ok_or_else(|| Error::invalid("model", "tagging model needs tagged examples"))?;
                let ids = tags
                    .iter()
                    .map(|t| {
                        self.label_id(t)
                            .ok_or_else(|| Error::invalid("model", format!("unknown tag {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let g = self.graph(&ex.sentence)?;
                let (h, _) = self.encode(tape, &g)?;
                match node_crf_head(tape, h, self.crf()?, Some(&ids))? {
                    CrfOutput::Loss(l) => Ok(l),
                    CrfOutput::Decoded { .. } => unreachable!("gold tags were given"),
                }
            }
            Task::Classify | Task::Match => {
                let label = ex
                    .class()
                    .ok_or_else(|| Error::invalid("model", "example has no class label"))?;
                let gold = self
                    .label_id(label)
                    .ok_or_else(|| Error::invalid("model", format!("unknown label {label:?}")))?;
                let lp = self.class_log_probs(tape, ex)?;
                class_nll(tape, lp, gold)
            }
        }
    }

    /// Mean loss over `batch` and its gradient.
    pub fn batch_gradients(&self, batch: &[&LabeledExample]) -> Result<(f64, GradStore)> {
        if batch.is_empty() {
            return Err(Error::invalid("batch_gradients", "empty batch"));
        }
        let shards: Vec<(f64, GradStore)> = batch
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut grads = GradStore::for_params(&self.store);
                let mut total = 0.0;
                for ex in chunk {
                    let mut tape = Tape::new(&self.store);
                    let loss = self.example_loss(&mut tape, ex)?;
                    total += tape.scalar(loss);
                    tape.backward(loss, &mut grads)?;
                }
                Ok((total, grads))
            })
            .collect::<Result<_>>()?;
        let mut iter = shards.into_iter();
        let (mut total, mut grads) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            total += l;
            grads.add_scaled(&g, 1.0)?;
        }
        let scale = 1.0 / batch.len() as f64;
        grads.scale(scale);
        Ok((total * scale, grads))
    }

    pub fn predict(&self, ex: &LabeledExample) -> Result<Prediction> {
        let mut tape = Tape::new(&self.store);
        match self.config.task {
            Task::Tag => {
                let g = self.graph(&ex.sentence)?;
                let (h, _) = self.encode(&mut tape, &g)?;
                match node_crf_head(&mut tape, h, self.crf()?, None)? {
                    CrfOutput::Decoded { tags, .. } => Ok(Prediction::Tags(tags)),
                    CrfOutput::Loss(_) => unreachable!("no gold tags were given"),
                }
            }
            Task::Classify | Task::Match => {
                let lp = self.class_log_probs(&mut tape, ex)?;
                let row = tape.value(lp).data();
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                Ok(Prediction::Class(best))
            }
        }
    }

    /// Raw head outputs: class log-probabilities or CRF emission scores.
    pub fn head_outputs(&self, ex: &LabeledExample) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        match self.config.task {
            Task::Tag => {
                let g = self.graph(&ex.sentence)?;
                let (h, _) = self.encode(&mut tape, &g)?;
                let emit = crate::crf::emission_scores(&mut tape, h, self.crf()?)?;
                Ok(tape.value(emit).clone())
            }
            Task::Classify | Task::Match => {
                let lp = self.class_log_probs(&mut tape, ex)?;
                Ok(tape.value(lp).clone())
            }
        }
    }

    /// Final node states and recorded attention for one sentence.
    pub fn trace(&self, s: &Sentence) -> Result<(Tensor, AlphaTrace)> {
        let g = self.graph(s)?;
        let mut tape = Tape::new(&self.store);
        let (h, alphas) = self.encode(&mut tape, &g)?;
        let trace = AlphaTrace {
            tokens: s.tokens.clone(),
            per_layer: alphas.iter().map(|&a| tape.value(a).clone()).collect(),
        };
        Ok((tape.value(h).clone(), trace))
    }
}
