//! Command implementations behind the `cn3` binary.
//!
//! Each `cmd_*` function prints its results and returns the process exit
//! code: 0 on success, 1 on failure, 2 on a configuration or usage error and
//! 3 when training diverged.

pub mod archive;
pub mod config;
pub mod export;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cn3::autodiff::{grad_check_with, GradCheckOptions, GradCheckReport};
use cn3::data::{
    attach_edges, attach_pos_tags, iob1_to_bio, parse_classification_tsv, parse_conll_with, parse_edges, parse_pairs,
    parse_pos_sidecar, Label, LabeledExample, Sentence,
};
use cn3::layer::AlphaTrace;
use cn3::metrics::Metric;
use cn3::model::{Cn3Model, Task, Vocabs};
use cn3::synthetic::four_token_examples;
use cn3::train::{check_metric, evaluate, train, EpochRecord, TrainOutcome};
use cn3::{Error, Result};

use crate::config::{RunConfig, Split, TagScheme};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Entries checked per parameter group, evenly strided.
pub const GRADCHECK_MAX_ENTRIES: usize = 256;

fn fail(code: i32, e: impl std::fmt::Display) -> i32 {
    eprintln!("error: {e}");
    code
}

/// Reads one split in the format implied by the task, with the sidecars the
/// model variant needs.
pub fn load_examples(cfg: &RunConfig, split: &Split) -> Result<Vec<LabeledExample>> {
    let mut examples = match cfg.model.task {
        Task::Classify => parse_classification_tsv(&split.data)?,
        Task::Match => parse_pairs(&split.data)?,
        Task::Tag => {
            let mut ex = parse_conll_with(&split.data, cfg.columns)?;
            if cfg.tag_scheme == TagScheme::Iob1 {
                for e in &mut ex {
                    if let Label::Tags(t) = &mut e.label {
                        *t = iob1_to_bio(t);
                    }
                }
            }
            ex
        }
    };
    if cfg.model.attrs.use_pos_tag {
        if let Some(p) = &split.pos {
            attach_pos_tags(&mut examples, &parse_pos_sidecar(p)?)?;
        }
    }
    if cfg.model.use_dep {
        if let Some(e) = &split.edges {
            attach_edges(&mut examples, &parse_edges(e)?)?;
        }
    }
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

/// Everything `cmd_train` needs before the first epoch.
pub struct Prepared {
    pub config: RunConfig,
    pub model: Cn3Model,
    pub train: Vec<LabeledExample>,
    pub dev: Option<Vec<LabeledExample>>,
    pub test: Option<Vec<LabeledExample>>,
}

pub fn prepare(config_path: &Path, seed: Option<u64>) -> Result<Prepared> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply_seed_override(seed)?;
    cfg.check_paths()?;
    let load = |s: &Option<Split>| s.as_ref().map(|s| load_examples(&cfg, s)).transpose();
    let train = load(&cfg.train_split)?.expect("checked by check_paths");
    let dev = load(&cfg.dev_split)?;
    let test = load(&cfg.test_split)?;
    let vocabs = Vocabs::build(&cfg.model, &train, cfg.min_count)?;
    let (model, stats) = Cn3Model::initialise(cfg.model.clone(), vocabs, cfg.glove.as_deref(), cfg.train.seed)?;
    if let Some(s) = stats {
        eprintln!(
            "glove: {} of {} vocabulary words found",
            s.matched,
            model.vocabs.words.len()
        );
    }
    Ok(Prepared {
        config: cfg,
        model,
        train,
        dev,
        test,
    })
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>) -> i32 {
    let p = match prepare(config_path, seed) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let cfg = &p.config;
    println!(
        "variant {} task {} layers {} seed {}",
        cfg.variant.name(),
        cfg.model.task,
        cfg.model.layers,
        cfg.train.seed
    );
    let result = train(p.model, &p.train, p.dev.as_deref(), &cfg.train, |r| {
        match r.dev_metric {
            Some(m) => println!(
                "epoch {} loss {:.6} dev {}={m:.4}",
                r.epoch, r.train_loss, cfg.train.metric
            ),
            None => println!("epoch {} loss {:.6}", r.epoch, r.train_loss),
        }
    });
    match result {
        Ok(TrainOutcome {
            model,
            history,
            best_epoch,
            ..
        }) => {
            if let Err(e) = archive::save(&cfg.archive, &model, &cfg.entries) {
                return fail(EXIT_FAILURE, e);
            }
            if let Err(e) = write_history(&cfg.history, &history) {
                return fail(EXIT_FAILURE, e);
            }
            println!("kept epoch {best_epoch}; archive {}", cfg.archive.display());
            if let Some(test) = &p.test {
                match evaluate(&model, test, cfg.train.metric) {
                    Ok(v) => println!("test {}={v}", cfg.train.metric),
                    Err(e) => return fail(EXIT_FAILURE, e),
                }
            }
            EXIT_OK
        }
        Err(f) => {
            let saved = archive::save(&cfg.archive, &f.checkpoint, &cfg.entries)
                .and_then(|_| write_history(&cfg.history, &f.history));
            if let Err(e) = saved {
                eprintln!("error: could not write checkpoint: {e}");
            }
            match f.error {
                e @ Error::Diverged { .. } => {
                    eprintln!("last good model written to {}", cfg.archive.display());
                    fail(EXIT_DIVERGED, e)
                }
                e @ Error::Config(_) => fail(EXIT_CONFIG, e),
                e => fail(EXIT_FAILURE, e),
            }
        }
    }
}

/// Metric of `archive` on the data at `data_path`.
pub fn eval_archive(archive_path: &Path, data_path: &Path, metric: Option<&str>) -> Result<(Metric, f64)> {
    let arch = archive::load(archive_path)?;
    let cfg = RunConfig::from_entries(arch.config, Path::new("."))?;
    let metric = match metric {
        Some(m) => m.parse()?,
        None => cfg.train.metric,
    };
    check_metric(arch.model.config.task, metric)?;
    let data = load_examples(&cfg, &Split::with_default_sidecars(data_path.to_path_buf()))?;
    Ok((metric, evaluate(&arch.model, &data, metric)?))
}

pub fn cmd_eval(archive_path: &Path, data_path: &Path, metric: Option<&str>) -> i32 {
    match eval_archive(archive_path, data_path, metric) {
        Ok((_, v)) => {
            println!("metric={v}");
            EXIT_OK
        }
        Err(e @ Error::Config(_)) => fail(EXIT_CONFIG, e),
        Err(e) => fail(EXIT_FAILURE, e),
    }
}

/// Whitespace-tokenised sentences, one per non-blank line, with optional
/// `.pos` and `.edges` sidecars next to the file.
pub fn read_sentences(path: &Path, model: &Cn3Model) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path)?;
    let mut wrapped: Vec<LabeledExample> = text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .map(|t| LabeledExample::classification("_", t))
        .collect();
    let split = Split::with_default_sidecars(path.to_path_buf());
    if model.config.attrs.use_pos_tag {
        let p = split
            .pos
            .ok_or_else(|| Error::Config(format!("model uses POS tags; expected {}.pos", path.display())))?;
        attach_pos_tags(&mut wrapped, &parse_pos_sidecar(&p)?)?;
    }
    if model.config.use_dep {
        if let Some(e) = &split.edges {
            attach_edges(&mut wrapped, &parse_edges(e)?)?;
        }
    }
    Ok(wrapped.into_iter().map(|e| e.sentence).collect())
}

pub fn export_traces(archive_path: &Path, sentence_path: &Path) -> Result<Vec<AlphaTrace>> {
    let arch = archive::load(archive_path)?;
    read_sentences(sentence_path, &arch.model)?
        .iter()
        .map(|s| arch.model.trace(s).map(|(_, t)| t))
        .collect()
}

pub fn cmd_export_structure(
    archive_path: &Path,
    sentence_path: &Path,
    out_path: &Path,
    format: &str,
    threshold: f64,
) -> i32 {
    if format != "json" && format != "dot" {
        return fail(EXIT_CONFIG, format!("unknown format {format:?} (expected json or dot)"));
    }
    let traces = match export_traces(archive_path, sentence_path) {
        Ok(t) => t,
        Err(e @ Error::Config(_)) => return fail(EXIT_CONFIG, e),
        Err(e) => return fail(EXIT_FAILURE, e),
    };
    let text = if format == "json" {
        match export::to_json(&traces) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_FAILURE, e),
        }
    } else {
        export::to_dot(&traces, threshold)
    };
    if let Err(e) = fs::write(out_path, text) {
        return fail(EXIT_FAILURE, e);
    }
    println!("{} sentences written to {}", traces.len(), out_path.display());
    EXIT_OK
}

/// Checks every parameter group of the configured variant on a four-token
/// example. Parameters are redrawn uniformly from [-1, 1]: at the training
/// initialisation many gradients are so small that central differences are
/// dominated by rounding.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let (c, t, p) = four_token_examples();
    let ex = match cfg.model.task {
        Task::Classify => c,
        Task::Tag => t,
        Task::Match => p,
    };
    let mut vocabs = Vocabs::build(&cfg.model, std::slice::from_ref(&ex), 1)?;
    vocabs.labels.push("other".into());
    let (mut model, _) = Cn3Model::initialise(cfg.model.clone(), vocabs, None, cfg.train.seed)?;
    let mut store = std::mem::take(&mut model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let opts = GradCheckOptions {
        eps: GRADCHECK_EPS,
        max_entries_per_param: Some(GRADCHECK_MAX_ENTRIES),
    };
    grad_check_with(&mut store, opts, |tape| model.example_loss(tape, &ex))
}

pub fn cmd_gradcheck(config_path: &Path) -> i32 {
    let cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = match gradcheck(&cfg) {
        Ok(r) => r,
        Err(e @ Error::Config(_)) => return fail(EXIT_CONFIG, e),
        Err(e) => return fail(EXIT_FAILURE, e),
    };
    println!(
        "variant {} task {} (relative error floor {:.1e})",
        cfg.variant.name(),
        cfg.model.task,
        report.floor
    );
    for g in &report.groups {
        println!(
            "{:<24} checked {:>4}  max rel error {:.3e}",
            g.name, g.checked, g.max_rel_error
        );
    }
    let failing: Vec<&str> = report.failing(GRADCHECK_TOL).map(|g| g.name.as_str()).collect();
    if failing.is_empty() {
        println!("ok: all groups below {GRADCHECK_TOL:e}");
        EXIT_OK
    } else {
        fail(
            EXIT_FAILURE,
            format!("gradient check failed for {}", failing.join(", ")),
        )
    }
}
