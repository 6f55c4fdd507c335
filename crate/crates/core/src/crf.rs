//! First-order linear-chain CRF output layer.
//!
//! The log-potential of a tag sequence `y` over `n` positions is
//!
//! ```text
//! start[y₁] + emit[1][y₁] + Σ_{i=2..n} (emit[i][y_i] + trans[y_{i−1}][y_i])
//! ```
//!
//! where `emit[i] = Wᵀ h_i + b`. There are no stop scores. Inference is exact:
//! the forward algorithm in log space for the partition function and
//! max-product dynamic programming for decoding.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{logsumexp, Tensor};

/// Parameter handles of the CRF layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrfParams {
    pub w_emit: ParamId,
    pub b_emit: ParamId,
    pub trans: ParamId,
    pub start: ParamId,
    pub num_labels: usize,
}

impl CrfParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_h: usize, num_labels: usize, rng: &mut R) -> Self {
        CrfParams {
            w_emit: store.add_uniform(format!("{prefix}.w_emit"), &[d_h, num_labels], 0.1, rng),
            b_emit: store.add_uniform(format!("{prefix}.b_emit"), &[num_labels], 0.1, rng),
            trans: store.add_uniform(format!("{prefix}.trans"), &[num_labels, num_labels], 0.1, rng),
            start: store.add_uniform(format!("{prefix}.start"), &[num_labels], 0.1, rng),
            num_labels,
        }
    }
}

/// Row `i` is `W_emitᵀ · H_i + b_emit`.
pub fn emission_scores(tape: &mut Tape<'_>, h: Var, p: &CrfParams) -> Result<Var> {
    let w = tape.param(p.w_emit);
    let b = tape.param(p.b_emit);
    let z = tape.matmul(h, w)?;
    tape.add_row(z, b)
}

fn check_tags(tags: &[usize], n: usize, l: usize) -> Result<()> {
    if tags.len() != n {
        return Err(Error::invalid(
            "crf",
            format!("tag sequence has length {} but the sentence has {n} tokens", tags.len()),
        ));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= l) {
        return Err(Error::IndexOutOfRange {
            what: "label set",
            index: bad,
            size: l,
        });
    }
    Ok(())
}

/// Differentiable log-potential of `tags`.
pub fn sequence_score(tape: &mut Tape<'_>, emit: Var, tags: &[usize], p: &CrfParams) -> Result<Var> {
    let (n, l) = tape.value(emit).dims2();
    check_tags(tags, n, l)?;
    let emit_idx = tags.iter().enumerate().map(|(i, &y)| i * l + y).collect();
    let trans_idx: Vec<usize> = tags.windows(2).map(|w| w[0] * l + w[1]).collect();
    let e = tape.pick_sum(emit, emit_idx)?;
    let s = tape.param(p.start);
    let s = tape.pick_sum(s, vec![tags[0]])?;
    let total = tape.add(e, s)?;
    if trans_idx.is_empty() {
        return Ok(total);
    }
    let t = tape.param(p.trans);
    let t = tape.pick_sum(t, trans_idx)?;
    tape.add(total, t)
}

pub fn log_partition(tape: &mut Tape<'_>, emit: Var, p: &CrfParams) -> Result<Var> {
    let t = tape.param(p.trans);
    let s = tape.param(p.start);
    tape.crf_log_partition(emit, t, s)
}

/// `log Z − score(gold)`, i.e. `−log p(gold | X)`.
pub fn nll_loss(tape: &mut Tape<'_>, emit: Var, tags: &[usize], p: &CrfParams) -> Result<Var> {
    let gold = sequence_score(tape, emit, tags, p)?;
    let log_z = log_partition(tape, emit, p)?;
    tape.sub(log_z, gold)
}

// ---- value-level inference ---------------------------------------------

/// Log-potential of `tags` computed directly from values.
pub fn score_tags(emit: &Tensor, trans: &Tensor, start: &Tensor, tags: &[usize]) -> Result<f64> {
    let (n, l) = emit.dims2();
    check_tags(tags, n, l)?;
    let mut s = start.data()[tags[0]] + emit.get(0, tags[0]);
    for i in 1..n {
        s += emit.get(i, tags[i]) + trans.data()[tags[i - 1] * l + tags[i]];
    }
    Ok(s)
}

pub(crate) struct Marginals {
    pub log_z: f64,
    /// `n × L` posterior marginals per position.
    pub unary: Vec<f64>,
    /// `L × L` expected transition counts summed over positions.
    pub pairwise: Vec<f64>,
}

pub(crate) fn forward_backward(emit: &[f64], trans: &[f64], start: &[f64], n: usize, l: usize) -> Marginals {
    let mut alpha = vec![0.0; n * l];
    for y in 0..l {
        alpha[y] = start[y] + emit[y];
    }
    let mut buf = vec![0.0; l];
    for i in 1..n {
        for y in 0..l {
            for (yp, b) in buf.iter_mut().enumerate() {
                *b = alpha[(i - 1) * l + yp] + trans[yp * l + y];
            }
            alpha[i * l + y] = emit[i * l + y] + logsumexp(&buf);
        }
    }
    let log_z = logsumexp(&alpha[(n - 1) * l..]);

    let mut beta = vec![0.0; n * l];
    for i in (0..n.saturating_sub(1)).rev() {
        for yp in 0..l {
            for (y, b) in buf.iter_mut().enumerate() {
                *b = trans[yp * l + y] + emit[(i + 1) * l + y] + beta[(i + 1) * l + y];
            }
            beta[i * l + yp] = logsumexp(&buf);
        }
    }

    let unary = (0..n * l).map(|k| (alpha[k] + beta[k] - log_z).exp()).collect();
    let mut pairwise = vec![0.0; l * l];
    for i in 1..n {
        for yp in 0..l {
            for y in 0..l {
                pairwise[yp * l + y] +=
                    (alpha[(i - 1) * l + yp] + trans[yp * l + y] + emit[i * l + y] + beta[i * l + y] - log_z).exp();
            }
        }
    }
    Marginals { log_z, unary, pairwise }
}

/// `log Σ_y exp(score(y))` over all `|L|ⁿ` sequences.
pub fn log_partition_value(emit: &Tensor, trans: &Tensor, start: &Tensor) -> f64 {
    let (n, l) = emit.dims2();
    let mut alpha: Vec<f64> = (0..l).map(|y| start.data()[y] + emit.get(0, y)).collect();
    let mut buf = vec![0.0; l];
    for i in 1..n {
        alpha = (0..l)
            .map(|y| {
                for (yp, b) in buf.iter_mut().enumerate() {
                    *b = alpha[yp] + trans.data()[yp * l + y];
                }
                emit.get(i, y) + logsumexp(&buf)
            })
            .collect();
    }
    logsumexp(&alpha)
}

/// Highest-scoring tag sequence and its score. Ties go to the lower label id.
pub fn viterbi_decode(emit: &Tensor, trans: &Tensor, start: &Tensor) -> (Vec<usize>, f64) {
    let (n, l) = emit.dims2();
    let mut delta: Vec<f64> = (0..l).map(|y| start.data()[y] + emit.get(0, y)).collect();
    let mut back = vec![0usize; n * l];
    for i in 1..n {
        let mut next = vec![0.0; l];
        for y in 0..l {
            let mut best = 0;
            let mut best_score = delta[0] + trans.data()[y];
            for yp in 1..l {
                let s = delta[yp] + trans.data()[yp * l + y];
                if s > best_score {
                    best = yp;
                    best_score = s;
                }
            }
            back[i * l + y] = best;
            next[y] = best_score + emit.get(i, y);
        }
        delta = next;
    }
    let mut last = 0;
    for y in 1..l {
        if delta[y] > delta[last] {
            last = y;
        }
    }
    let score = delta[last];
    let mut tags = vec![last; n];
    for i in (1..n).rev() {
        tags[i - 1] = back[i * l + tags[i]];
    }
    (tags, score)
}
