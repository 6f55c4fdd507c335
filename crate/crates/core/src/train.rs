//! Epoch loop with dev-set model selection, evaluation and grid search.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{make_batches, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, chunk_f1, token_accuracy, Metric};
use crate::model::{Cn3Model, Prediction, Task};
use crate::optim::{AdaDelta, DEFAULT_EPS, DEFAULT_RHO};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without dev improvement; 0 never stops early.
    pub patience: usize,
    pub rho: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    pub metric: Metric,
}

impl TrainConfig {
    pub fn new(metric: Metric) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            seed: 1,
            patience: 0,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            clip: None,
            metric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Cn3Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub steps: usize,
}

/// A run that diverged, with the best model seen before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub checkpoint: Box<Cn3Model>,
    pub history: Vec<EpochRecord>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains `model` in place and returns the selected model.
///
/// With a dev set the model with the best dev metric is kept (earliest on
/// ties); without one the final model wins. `on_epoch` sees every record as
/// it is produced.
pub fn train(
    mut model: Cn3Model,
    train: &[LabeledExample],
    dev: Option<&[LabeledExample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error: Error, checkpoint: &Cn3Model, history: &[EpochRecord]| TrainFailure {
        error,
        checkpoint: Box::new(checkpoint.clone()),
        history: history.to_vec(),
    };
    let setup = || -> Result<AdaDelta> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        check_metric(model.config.task, cfg.metric)?;
        AdaDelta::new(&model.store, cfg.rho, cfg.eps, cfg.clip)
    };
    let mut opt = match setup() {
        Ok(o) => o,
        Err(e) => return Err(fail(e, &model, &[])),
    };

    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Cn3Model)> = None;
    let mut stale = 0;
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let batches = match make_batches(train, cfg.batch_size, epoch_seed(cfg.seed, epoch)) {
            Ok(b) => b,
            Err(e) => return Err(fail(e, &model, &history)),
        };
        let mut total = 0.0;
        for batch in &batches {
            let examples: Vec<&LabeledExample> = batch.indices.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = match model.batch_gradients(&examples) {
                Ok(r) => r,
                Err(e) => return Err(fail(e, best.as_ref().map_or(&model, |b| &b.2), &history)),
            };
            if !loss.is_finite() {
                let e = Error::Diverged {
                    epoch,
                    msg: format!("batch loss {loss}"),
                };
                return Err(fail(e, best.as_ref().map_or(&model, |b| &b.2), &history));
            }
            if let Err(e) = opt.step(&mut model.store, &mut grads) {
                let e = Error::Diverged {
                    epoch,
                    msg: e.to_string(),
                };
                return Err(fail(e, best.as_ref().map_or(&model, |b| &b.2), &history));
            }
            steps += 1;
            total += loss * examples.len() as f64;
        }
        let dev_metric = match dev {
            Some(d) => match evaluate(&model, d, cfg.metric) {
                Ok(m) => Some(m),
                Err(e) => return Err(fail(e, &model, &history)),
            },
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            dev_metric,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        if let Some(m) = dev_metric {
            if best.as_ref().is_none_or(|b| m > b.0) {
                best = Some((m, epoch, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (model, best_epoch, best_metric) = match best {
        Some((m, e, b)) => (b, e, Some(m)),
        None => (model, history.len(), None),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_metric,
        steps,
    })
}

/// Checks that `metric` applies to `task`.
pub fn check_metric(task: Task, metric: Metric) -> Result<()> {
    let ok = match task {
        Task::Classify | Task::Match => metric == Metric::Accuracy,
        Task::Tag => matches!(metric, Metric::TokenAccuracy | Metric::ChunkF1),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("metric {metric} does not apply to task {task}")))
    }
}

pub fn evaluate(model: &Cn3Model, data: &[LabeledExample], metric: Metric) -> Result<f64> {
    check_metric(model.config.task, metric)?;
    match metric {
        Metric::Accuracy => evaluate_classification(model, data),
        m => evaluate_tagging(model, data, m),
    }
}

fn predictions(model: &Cn3Model, data: &[LabeledExample]) -> Result<Vec<Prediction>> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "no examples"));
    }
    data.par_iter().map(|ex| model.predict(ex)).collect()
}

/// Fraction of examples whose arg-max class equals the gold label.
pub fn evaluate_classification(model: &Cn3Model, data: &[LabeledExample]) -> Result<f64> {
    let preds = predictions(model, data)?;
    let mut gold = Vec::with_capacity(data.len());
    let mut pred = Vec::with_capacity(data.len());
    for (ex, p) in data.iter().zip(preds) {
        let label = ex
            .class()
            .ok_or_else(|| Error::invalid("evaluate", "example has no class label"))?;
        let Prediction::Class(c) = p else {
            return Err(Error::invalid("evaluate", "model does not classify"));
        };
        // unseen gold labels can never be predicted
        gold.push(model.label_id(label).unwrap_or(usize::MAX));
        pred.push(c);
    }
    accuracy(&gold, &pred)
}

/// Decoded tag sequences, as label strings.
pub fn predict_tags(model: &Cn3Model, data: &[LabeledExample]) -> Result<Vec<Vec<String>>> {
    predictions(model, data)?
        .into_iter()
        .map(|p| match p {
            Prediction::Tags(t) => Ok(t.iter().map(|&i| model.label(i).unwrap_or("O").to_string()).collect()),
            Prediction::Class(_) => Err(Error::invalid("evaluate", "model does not tag")),
        })
        .collect()
}

pub fn evaluate_tagging(model: &Cn3Model, data: &[LabeledExample], metric: Metric) -> Result<f64> {
    let pred = predict_tags(model, data)?;
    let gold: Vec<Vec<String>> = data
        .iter()
        .map(|ex| {
            ex.tags()
                .map(<[String]>::to_vec)
                .ok_or_else(|| Error::invalid("evaluate", "example has no tags"))
        })
        .collect::<Result<_>>()?;
    match metric {
        Metric::TokenAccuracy => token_accuracy(&gold, &pred),
        Metric::ChunkF1 => chunk_f1(&gold, &pred),
        Metric::Accuracy => Err(Error::Config(
            "accuracy applies to classification; use token_accuracy".into(),
        )),
    }
}

/// One visited grid cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub settings: BTreeMap<String, String>,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: BTreeMap<String, String>,
    pub best_metric: f64,
    pub log: Vec<GridCell>,
}

/// Cartesian sweep over `space` in key order (last key varies fastest),
/// visiting at most `budget` cells. `run` trains one cell and returns its
/// dev metric; the first cell with the highest metric wins.
pub fn grid_search<F>(space: &BTreeMap<String, Vec<String>>, budget: usize, mut run: F) -> Result<GridResult>
where
    F: FnMut(&BTreeMap<String, String>) -> Result<f64>,
{
    if budget < 1 {
        return Err(Error::Config("grid search budget must be at least 1".into()));
    }
    if space.is_empty() || space.values().any(Vec::is_empty) {
        return Err(Error::Config("grid search space has no cells".into()));
    }
    let keys: Vec<&String> = space.keys().collect();
    let sizes: Vec<usize> = space.values().map(Vec::len).collect();
    let cells: usize = sizes.iter().product();
    let mut log = Vec::new();
    for cell in 0..cells.min(budget) {
        let mut rem = cell;
        let mut settings = BTreeMap::new();
        for (k, &n) in keys.iter().zip(&sizes).rev() {
            settings.insert((*k).clone(), space[*k][rem % n].clone());
            rem /= n;
        }
        let dev_metric = run(&settings)?;
        log.push(GridCell { settings, dev_metric });
    }
    let best = log
        .iter()
        .fold(None::<&GridCell>, |b, c| match b {
            Some(b) if b.dev_metric >= c.dev_metric => Some(b),
            _ => Some(c),
        })
        .expect("at least one cell");
    Ok(GridResult {
        best: best.settings.clone(),
        best_metric: best.dev_metric,
        log,
    })
}
