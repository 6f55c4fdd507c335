//! Run configuration: flat `key = value` lines with `#` comments.
//!
//! Relative paths are resolved against the directory holding the file. The
//! model variant is named as in the results tables (`lstm+char+spell`,
//! `lstm^dep`, ...) or set to `custom`, in which case the attribute flags
//! are given one by one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cn3::data::ConllColumns;
use cn3::metrics::Metric;
use cn3::model::{ModelConfig, Task};
use cn3::train::{check_metric, TrainConfig};
use cn3::{Error, Result};

pub const SEED_ENV: &str = "CN3_SEED";

const KEYS: &[&str] = &[
    "task",
    "metric",
    "variant",
    "position",
    "lstm",
    "char",
    "pos_tag",
    "spell",
    "dep",
    "train",
    "dev",
    "test",
    "glove",
    "train_edges",
    "dev_edges",
    "test_edges",
    "train_pos",
    "dev_pos",
    "test_pos",
    "token_col",
    "tag_col",
    "pos_col",
    "tag_scheme",
    "word_dim",
    "hidden_dim",
    "attn_dim",
    "edge_dim",
    "position_dim",
    "char_dim",
    "pos_tag_dim",
    "spell_dim",
    "lstm_hidden",
    "char_width",
    "max_len",
    "layers",
    "epochs",
    "batch_size",
    "seed",
    "patience",
    "min_count",
    "fine_tune_words",
    "clip",
    "rho",
    "eps",
    "archive",
    "history",
];

const FLAG_KEYS: &[&str] = &["position", "lstm", "char", "pos_tag", "spell", "dep"];

/// Node and edge attributes switched on for a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Variant {
    pub position: bool,
    pub lstm: bool,
    pub char: bool,
    pub pos_tag: bool,
    pub spell: bool,
    pub dep: bool,
}

impl Variant {
    fn named(&self) -> bool {
        let core = Variant {
            position: false,
            ..*self
        };
        let lstm = |f: fn(&mut Variant)| {
            let mut v = Variant {
                lstm: true,
                ..Variant::default()
            };
            f(&mut v);
            v
        };
        let table = [
            lstm(|_| {}),
            lstm(|v| v.pos_tag = true),
            lstm(|v| v.char = true),
            lstm(|v| v.dep = true),
            lstm(|v| {
                v.char = true;
                v.spell = true
            }),
        ];
        table.contains(&core)
            || *self
                == Variant {
                    position: true,
                    ..Variant::default()
                }
    }

    /// Canonical name, e.g. `lstm+char+spell` or `lstm^dep`.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for (on, s) in [
            (self.lstm, "lstm"),
            (self.position, "pos"),
            (self.pos_tag, "POS"),
            (self.char, "char"),
            (self.spell, "spell"),
        ] {
            if on {
                parts.push(s);
            }
        }
        let mut name = parts.join("+");
        if self.dep {
            name.push_str("^dep");
        }
        name
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Components are separated by `+` or `^`. `pos` is the position
    /// attribute and `POS` the part-of-speech tag; other names ignore case.
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        for part in s.split(['+', '^']).map(str::trim) {
            let slot = match part {
                "pos" | "position" => &mut v.position,
                "POS" | "pos_tag" => &mut v.pos_tag,
                p => match p.to_ascii_lowercase().as_str() {
                    "lstm" => &mut v.lstm,
                    "char" => &mut v.char,
                    "spell" => &mut v.spell,
                    "dep" => &mut v.dep,
                    _ => return Err(Error::Config(format!("unknown variant component {part:?} in {s:?}"))),
                },
            };
            if *slot {
                return Err(Error::Config(format!("variant {s:?} names {part:?} twice")));
            }
            *slot = true;
        }
        if !v.named() {
            return Err(Error::Config(format!(
                "variant {s:?} is not a named model variant; use variant = custom with explicit flags"
            )));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagScheme {
    Bio,
    Iob1,
}

/// Paths for one data split and its sidecars.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub data: PathBuf,
    pub edges: Option<PathBuf>,
    pub pos: Option<PathBuf>,
}

impl Split {
    /// Sidecars default to `<data>.edges` and `<data>.pos` when those exist.
    pub fn with_default_sidecars(data: PathBuf) -> Self {
        let side = |ext: &str| {
            let mut p = data.clone().into_os_string();
            p.push(ext);
            let p = PathBuf::from(p);
            p.exists().then_some(p)
        };
        Split {
            edges: side(".edges"),
            pos: side(".pos"),
            data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Every key as written, after seed overrides; stored in archives.
    pub entries: BTreeMap<String, String>,
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_split: Option<Split>,
    pub dev_split: Option<Split>,
    pub test_split: Option<Split>,
    pub glove: Option<PathBuf>,
    pub columns: ConllColumns,
    pub tag_scheme: TagScheme,
    pub min_count: usize,
    pub archive: PathBuf,
    pub history: PathBuf,
}

/// Splits config text into a key map, rejecting unknown or repeated keys.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
        }
    }
    Ok(map)
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Reads and interprets `path`. Does not touch the referenced data files.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_entries(parse_entries(&text)?, base)
    }

    pub fn from_entries(entries: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let get = |k: &str| entries.get(k).map(String::as_str);
        let num = |k: &str, default: usize| -> Result<usize> { get(k).map_or(Ok(default), |v| parse_value(k, v)) };
        let float = |k: &str, default: f64| -> Result<f64> { get(k).map_or(Ok(default), |v| parse_value(k, v)) };
        let path = |k: &str| get(k).map(|v| base.join(v));

        let task: Task = get("task")
            .ok_or_else(|| Error::Config("missing key \"task\"".into()))?
            .parse()?;
        let metric: Metric = match get("metric") {
            Some(m) => m.parse()?,
            None => match task {
                Task::Tag => Metric::TokenAccuracy,
                _ => Metric::Accuracy,
            },
        };
        check_metric(task, metric)?;

        let flags_given: Vec<&str> = FLAG_KEYS.iter().copied().filter(|k| entries.contains_key(*k)).collect();
        let variant = match get("variant").unwrap_or("lstm") {
            "custom" => {
                let flag = |k: &str| get(k).map_or(Ok(false), |v| parse_bool(k, v));
                Variant {
                    position: flag("position")?,
                    lstm: flag("lstm")?,
                    char: flag("char")?,
                    pos_tag: flag("pos_tag")?,
                    spell: flag("spell")?,
                    dep: flag("dep")?,
                }
            }
            name => {
                if !flags_given.is_empty() {
                    return Err(Error::Config(format!(
                        "attribute flags {flags_given:?} need variant = custom"
                    )));
                }
                name.parse()?
            }
        };

        let mut model = ModelConfig::new(task);
        model.use_dep = variant.dep;
        model.attrs.use_position = variant.position;
        model.attrs.use_lstm_context = variant.lstm;
        model.attrs.use_char = variant.char;
        model.attrs.use_pos_tag = variant.pos_tag;
        model.attrs.use_spell = variant.spell;
        model.word_dim = num("word_dim", model.word_dim)?;
        model.hidden_dim = num("hidden_dim", model.hidden_dim)?;
        model.attn_dim = num("attn_dim", model.attn_dim)?;
        model.edge_dim = num("edge_dim", model.edge_dim)?;
        model.position_dim = num("position_dim", model.position_dim)?;
        model.char_dim = num("char_dim", model.char_dim)?;
        model.pos_tag_dim = num("pos_tag_dim", model.pos_tag_dim)?;
        model.spell_dim = num("spell_dim", model.spell_dim)?;
        model.attrs.lstm_hidden = num("lstm_hidden", model.attrs.lstm_hidden)?;
        model.attrs.char_conv_width = num("char_width", model.attrs.char_conv_width)?;
        model.max_len = num("max_len", model.max_len)?;
        model.layers = num("layers", model.layers)?;
        if let Some(v) = get("fine_tune_words") {
            model.fine_tune_words = parse_bool("fine_tune_words", v)?;
        }
        model.validate()?;

        let mut train = TrainConfig::new(metric);
        train.epochs = num("epochs", train.epochs)?;
        train.batch_size = num("batch_size", train.batch_size)?;
        train.seed = get("seed").map_or(Ok(train.seed), |v| parse_value("seed", v))?;
        train.patience = num("patience", train.patience)?;
        train.rho = float("rho", train.rho)?;
        train.eps = float("eps", train.eps)?;
        train.clip = get("clip").map(|v| parse_value("clip", v)).transpose()?;
        train.validate()?;
        if !(0.0..1.0).contains(&train.rho) || train.eps <= 0.0 || train.clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config(
                "rho must lie in [0, 1), eps and clip must be positive".into(),
            ));
        }

        let split = |name: &str| {
            path(name).map(|data| {
                let mut s = Split::with_default_sidecars(data);
                if let Some(e) = path(&format!("{name}_edges")) {
                    s.edges = Some(e);
                }
                if let Some(p) = path(&format!("{name}_pos")) {
                    s.pos = Some(p);
                }
                s
            })
        };
        let columns = ConllColumns {
            token: num("token_col", 0)?,
            tag: num("tag_col", 1)?,
            pos: get("pos_col").map(|v| parse_value("pos_col", v)).transpose()?,
        };
        let tag_scheme = match get("tag_scheme").unwrap_or("bio") {
            "bio" => TagScheme::Bio,
            "iob1" => TagScheme::Iob1,
            other => {
                return Err(Error::Config(format!(
                    "tag_scheme: expected bio or iob1, got {other:?}"
                )))
            }
        };
        Ok(RunConfig {
            variant,
            model,
            train,
            train_split: split("train"),
            dev_split: split("dev"),
            test_split: split("test"),
            glove: path("glove"),
            columns,
            tag_scheme,
            min_count: num("min_count", 1)?,
            archive: path("archive").unwrap_or_else(|| base.join("model.cn3")),
            history: path("history").unwrap_or_else(|| base.join("history.jsonl")),
            entries,
        })
    }

    /// Replaces the seed everywhere, including the stored snapshot.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.entries.insert("seed".into(), seed.to_string());
    }

    /// Applies `--seed`, falling back to the environment variable.
    pub fn apply_seed_override(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(parse_value::<u64>(SEED_ENV, &v)?),
            Err(_) => None,
        };
        if let Some(s) = flag.or(env) {
            self.set_seed(s);
        }
        Ok(())
    }

    /// Fails unless every referenced input file exists.
    pub fn check_paths(&self) -> Result<()> {
        let train = self
            .train_split
            .as_ref()
            .ok_or_else(|| Error::Config("missing key \"train\"".into()))?;
        let mut required: BTreeSet<&Path> = BTreeSet::new();
        for s in [Some(train), self.dev_split.as_ref(), self.test_split.as_ref()]
            .into_iter()
            .flatten()
        {
            required.insert(&s.data);
            required.extend(s.edges.as_deref());
            required.extend(s.pos.as_deref());
        }
        required.extend(self.glove.as_deref());
        for p in required {
            if !p.is_file() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.variant.dep && train.edges.is_none() {
            return Err(Error::Config(
                "dependency edges enabled but the training split has no edge sidecar".into(),
            ));
        }
        Ok(())
    }
}
