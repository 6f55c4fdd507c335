//! Attention traces as JSON or Graphviz DOT.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use cn3::layer::AlphaTrace;
use cn3::Result;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// One sentence in the JSON export. `layers[l]` holds the `n × n`
/// attention matrix of layer `l + 1` flattened row-major, so entry
/// `i * n + k` is the weight of source `i` in the update of token `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tokens: Vec<String>,
    pub layers: Vec<Vec<f64>>,
}

impl From<&AlphaTrace> for TraceRecord {
    fn from(t: &AlphaTrace) -> Self {
        TraceRecord {
            tokens: t.tokens.clone(),
            layers: t.per_layer.iter().map(|a| a.data().to_vec()).collect(),
        }
    }
}

impl TraceRecord {
    /// Largest deviation of a column sum from one, over all layers.
    pub fn max_column_error(&self) -> f64 {
        let n = self.tokens.len();
        self.layers
            .iter()
            .flat_map(|a| (0..n).map(move |k| ((0..n).map(|i| a[i * n + k]).sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

pub fn to_json(traces: &[AlphaTrace]) -> Result<String> {
    let records: Vec<TraceRecord> = traces.iter().map(TraceRecord::from).collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn from_json(text: &str) -> Result<Vec<TraceRecord>> {
    Ok(serde_json::from_str(text)?)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// One digraph per sentence and layer. An edge `i -> k` carries `α_ik`
/// and is drawn only when `α_ik >= threshold`.
pub fn to_dot(traces: &[AlphaTrace], threshold: f64) -> String {
    let mut out = String::new();
    for (s, t) in traces.iter().enumerate() {
        for (l, a) in t.per_layer.iter().enumerate() {
            let _ = writeln!(out, "digraph s{s}_layer{} {{", l + 1);
            for (i, tok) in t.tokens.iter().enumerate() {
                let _ = writeln!(out, "  n{i} [label={}];", quote(tok));
            }
            let n = t.tokens.len();
            for i in 0..n {
                for k in 0..n {
                    let w = a.get(i, k);
                    if w >= threshold {
                        let _ = writeln!(out, "  n{i} -> n{k} [weight={w}, label=\"{w:.2}\"];");
                    }
                }
            }
            out.push_str("}\n");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use cn3::tensor::Tensor;

    fn trace() -> AlphaTrace {
        AlphaTrace {
            tokens: vec!["a".into(), "\"b\"".into()],
            per_layer: vec![Tensor::from_rows(&[[0.9, 0.3], [0.1, 0.7]]).unwrap()],
        }
    }

    #[test]
    fn dot_threshold() {
        let dot = to_dot(&[trace()], 0.2);
        assert!(dot.starts_with("digraph s0_layer1 {"));
        assert!(dot.contains("n1 [label=\"\\\"b\\\"\"];"));
        assert_eq!(dot.matches("->").count(), 3);
        assert!(!dot.contains("n1 -> n0"));
        assert_eq!(to_dot(&[trace()], 1.1).matches("->").count(), 0);
    }

    #[test]
    fn json_layout_is_row_major() {
        let back = from_json(&to_json(&[trace()]).unwrap()).unwrap();
        assert_eq!(back[0].layers[0], vec![0.9, 0.3, 0.1, 0.7]);
        assert!(back[0].max_column_error() < 1e-15);
    }
}
