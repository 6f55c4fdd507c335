//! Token accuracy and span-level F1.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    TokenAccuracy,
    ChunkF1,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "token_accuracy" => Ok(Metric::TokenAccuracy),
            "chunk_f1" => Ok(Metric::ChunkF1),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (expected accuracy, token_accuracy or chunk_f1)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::TokenAccuracy => "token_accuracy",
            Metric::ChunkF1 => "chunk_f1",
        })
    }
}

fn check_lengths<T: AsRef<[String]>>(gold: &[T], pred: &[T]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(
            "metric",
            format!("{} gold vs {} predicted sentences", gold.len(), pred.len()),
        ));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.as_ref().len() != p.as_ref().len() {
            return Err(Error::invalid("metric", format!("sentence {i}: tag counts differ")));
        }
    }
    Ok(())
}

pub fn token_accuracy<T: AsRef<[String]>>(gold: &[T], pred: &[T]) -> Result<f64> {
    check_lengths(gold, pred)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        total += g.as_ref().len();
        correct += g.as_ref().iter().zip(p.as_ref()).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Err(Error::invalid("token_accuracy", "no tokens"));
    }
    Ok(correct as f64 / total as f64)
}

/// A chunk: half-open token range and type.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue a chunk of
/// type `X` belongs to no span.
pub fn extract_spans(tags: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, t) in tags.iter().enumerate() {
        let cont = match (&mut open, t.split_once('-')) {
            (Some(s), Some(("I", ty))) if s.label == ty => {
                s.end = i + 1;
                true
            }
            _ => false,
        };
        if cont {
            continue;
        }
        spans.extend(open.take());
        if let Some(("B", ty)) = t.split_once('-') {
            open = Some(Span {
                start: i,
                end: i + 1,
                label: ty.to_string(),
            });
        }
    }
    spans.extend(open);
    spans
}

/// Micro-averaged span F1. No spans on either side scores 1.0; otherwise
/// an empty side scores 0.0.
pub fn chunk_f1<T: AsRef<[String]>>(gold: &[T], pred: &[T]) -> Result<f64> {
    check_lengths(gold, pred)?;
    let (mut n_gold, mut n_pred, mut tp) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let gs: HashSet<Span> = extract_spans(g.as_ref()).into_iter().collect();
        let ps = extract_spans(p.as_ref());
        n_gold += gs.len();
        n_pred += ps.len();
        tp += ps.iter().filter(|s| gs.contains(s)).count();
    }
    if n_gold == 0 && n_pred == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / n_pred as f64;
    let recall = tp as f64 / n_gold as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of positions where `gold == pred`.
pub fn accuracy(gold: &[usize], pred: &[usize]) -> Result<f64> {
    if gold.is_empty() || gold.len() != pred.len() {
        return Err(Error::invalid("accuracy", "empty or mismatched predictions"));
    }
    Ok(gold.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn spans() {
        let s = extract_spans(&t("B-NP I-NP O B-VP B-NP I-VP I-NP"));
        let got: Vec<_> = s.iter().map(|s| (s.start, s.end, s.label.as_str())).collect();
        assert_eq!(got, vec![(0, 2, "NP"), (3, 4, "VP"), (4, 5, "NP")]);
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![t("B-NP I-NP O B-VP"), t("O B-PP")];
        assert_eq!(token_accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(chunk_f1(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn boundary_mismatch() {
        let g = vec![t("B-NP I-NP O")];
        let p = vec![t("B-NP O O")];
        assert_eq!(chunk_f1(&g, &p).unwrap(), 0.0);
        assert_eq!(token_accuracy(&g, &p).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn empty_span_conventions() {
        let o = vec![t("O O O")];
        let g = vec![t("B-NP O O")];
        assert_eq!(chunk_f1(&o, &o).unwrap(), 1.0);
        assert_eq!(chunk_f1(&g, &o).unwrap(), 0.0);
        assert_eq!(chunk_f1(&o, &g).unwrap(), 0.0);
    }

    #[test]
    fn partial_credit() {
        // gold: NP(0,2) VP(2,3) NP(3,4); pred: NP(0,2) VP(2,4)
        let g = vec![t("B-NP I-NP B-VP B-NP")];
        let p = vec![t("B-NP I-NP B-VP I-VP")];
        let (prec, rec) = (1.0 / 2.0, 1.0 / 3.0);
        assert!((chunk_f1(&g, &p).unwrap() - 2.0 * prec * rec / (prec + rec)).abs() < 1e-15);
    }

    #[test]
    fn metric_names() {
        assert_eq!("chunk_f1".parse::<Metric>().unwrap(), Metric::ChunkF1);
        assert!("f1".parse::<Metric>().is_err());
        assert_eq!(Metric::TokenAccuracy.to_string(), "token_accuracy");
        assert_eq!(accuracy(&[1], &[0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }
}
