//! Output heads over final node states.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierParams {
    pub w_cls: ParamId,
    pub b_cls: ParamId,
    pub d_in: usize,
    pub num_classes: usize,
}

impl ClassifierParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(
                "ClassifierParams",
                format!("need at least 2 classes, got {num_classes}"),
            ));
        }
        Ok(ClassifierParams {
            w_cls: store.add_uniform(format!("{prefix}.w_cls"), &[d_in, num_classes], 0.1, rng),
            b_cls: store.add_uniform(format!("{prefix}.b_cls"), &[num_classes], 0.1, rng),
            d_in,
            num_classes,
        })
    }
}

fn classify(tape: &mut Tape<'_>, r: Var, p: &ClassifierParams) -> Result<Var> {
    let w = tape.param(p.w_cls);
    let b = tape.param(p.b_cls);
    let z = tape.matmul(r, w)?;
    let z = tape.add_row(z, b)?;
    tape.log_softmax_rows(z)
}

/// Mean of the node states, `1 × d_h`.
pub fn mean_pool(tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    if tape.value(h).rows() == 0 {
        return Err(Error::invalid("mean_pool", "empty graph"));
    }
    tape.mean_rows(h)
}

/// Log-probabilities `1 × C` from mean-pooled node states.
pub fn graph_pool_classify(tape: &mut Tape<'_>, h: Var, p: &ClassifierParams) -> Result<Var> {
    let r = mean_pool(tape, h)?;
    classify(tape, r, p)
}

/// Log-probabilities `1 × C` for a sentence pair from
/// `[r_a, r_b, |r_a − r_b|, r_a ⊙ r_b]`.
pub fn pair_classify(tape: &mut Tape<'_>, h_a: Var, h_b: Var, p: &ClassifierParams) -> Result<Var> {
    let ra = mean_pool(tape, h_a)?;
    let rb = mean_pool(tape, h_b)?;
    let feats = pair_features(tape, ra, rb)?;
    classify(tape, feats, p)
}

pub fn pair_features(tape: &mut Tape<'_>, ra: Var, rb: Var) -> Result<Var> {
    let diff = tape.sub(ra, rb)?;
    let diff = tape.abs(diff);
    let prod = tape.mul(ra, rb)?;
    tape.concat_cols(&[ra, rb, diff, prod])
}

/// Negative log-likelihood of `gold` under the given log-probabilities.
pub fn class_nll(tape: &mut Tape<'_>, log_probs: Var, gold: usize) -> Result<Var> {
    let c = tape.value(log_probs).cols();
    if gold >= c {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: gold,
            size: c,
        });
    }
    let picked = tape.pick_sum(log_probs, vec![gold])?;
    Ok(tape.affine(picked, -1.0, 0.0))
}

/// Result of the node-level CRF head.
#[derive(Clone, Debug, PartialEq)]
pub enum CrfOutput {
    Loss(Var),
    Decoded { tags: Vec<usize>, score: f64 },
}

/// Training mode (gold given) returns the sequence NLL; inference mode
/// returns the Viterbi path.
pub fn node_crf_head(tape: &mut Tape<'_>, h: Var, p: &CrfParams, gold: Option<&[usize]>) -> Result<CrfOutput> {
    let emit = crf::emission_scores(tape, h, p)?;
    match gold {
        Some(tags) => Ok(CrfOutput::Loss(crf::nll_loss(tape, emit, tags, p)?)),
        None => {
            let store = tape.store();
            let (tags, score) = crf::viterbi_decode(tape.value(emit), store.value(p.trans), store.value(p.start));
            Ok(CrfOutput::Decoded { tags, score })
        }
    }
}
