//! Dynamic graph layers: pairwise edge scoring, attention normalisation,
//! neighbour aggregation and the gated node update, stacked `L` times.
//!
//! For target node `k` and source node `i` at layer `l`:
//!
//! ```text
//! s_ik  = uᵀ tanh(W [h_k, h_i, v_i, v_k, e_ik])
//! α_ik  = exp(s_ik) / Σ_j exp(s_jk)          (normalised over sources)
//! h̃_k   = Σ_i α_ik h_i
//! g     = σ(W_g h_k + b_g)
//! h_k'  = g ⊙ h̃_k + (1 − g) ⊙ h_k
//! ```
//!
//! Every node attends to every node including itself. Scores are computed
//! without materialising the concatenation: `W` is split into row blocks and
//! the per-source and per-target halves are added pairwise, which is the
//! same linear map.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Widths shared by every layer of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub d_h: usize,
    pub d_v: usize,
    pub d_e: usize,
    pub d_attn: usize,
}

impl LayerDims {
    /// Rows of the scoring matrix: `2·d_h + 2·d_v + d_e`.
    pub fn d_cat(&self) -> usize {
        2 * self.d_h + 2 * self.d_v + self.d_e
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub w_score: ParamId,
    pub u: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub dims: LayerDims,
}

impl LayerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: LayerDims, rng: &mut R) -> Self {
        LayerParams {
            w_score: store.add_uniform(format!("{prefix}.w_score"), &[dims.d_cat(), dims.d_attn], 0.1, rng),
            u: store.add_uniform(format!("{prefix}.u"), &[dims.d_attn], 0.1, rng),
            w_gate: store.add_uniform(format!("{prefix}.w_gate"), &[dims.d_h, dims.d_h], 0.1, rng),
            b_gate: store.add_uniform(format!("{prefix}.b_gate"), &[dims.d_h], 0.1, rng),
            dims,
        }
    }
}

fn expect_cols(tape: &Tape<'_>, x: Var, cols: usize, rows: Option<usize>, op: &'static str) -> Result<()> {
    let (r, c) = tape.value(x).dims2();
    if c != cols || rows.is_some_and(|n| n != r) {
        let want = vec![rows.unwrap_or(r), cols];
        return Err(Error::shape(op, tape.shape(x), &want));
    }
    Ok(())
}

/// `n × n` score matrix, entry `(i, k)` scoring source `i` for target `k`.
pub fn edge_scores(tape: &mut Tape<'_>, h: Var, v: Option<Var>, e: Option<Var>, p: &LayerParams) -> Result<Var> {
    let LayerDims { d_h, d_v, d_e, d_attn } = p.dims;
    let n = tape.value(h).rows();
    expect_cols(tape, h, d_h, None, "edge_scores")?;
    let w = tape.param(p.w_score);
    if tape.value(w).dims2() != (p.dims.d_cat(), d_attn) {
        return Err(Error::shape("edge_scores", tape.shape(w), &[p.dims.d_cat(), d_attn]));
    }

    let w_tgt_h = tape.slice_rows(w, 0..d_h)?;
    let w_src_h = tape.slice_rows(w, d_h..2 * d_h)?;
    let mut src = tape.matmul(h, w_src_h)?;
    let mut tgt = tape.matmul(h, w_tgt_h)?;
    match v {
        Some(v) if d_v > 0 => {
            expect_cols(tape, v, d_v, Some(n), "edge_scores")?;
            let w_src_v = tape.slice_rows(w, 2 * d_h..2 * d_h + d_v)?;
            let w_tgt_v = tape.slice_rows(w, 2 * d_h + d_v..2 * d_h + 2 * d_v)?;
            let sv = tape.matmul(v, w_src_v)?;
            let tv = tape.matmul(v, w_tgt_v)?;
            src = tape.add(src, sv)?;
            tgt = tape.add(tgt, tv)?;
        }
        None if d_v == 0 => {}
        _ => return Err(Error::invalid("edge_scores", "node attributes do not match d_v")),
    }
    let mut pre = tape.pair_expand(src, tgt)?;
    match e {
        Some(e) if d_e > 0 => {
            expect_cols(tape, e, d_e, Some(n * n), "edge_scores")?;
            let w_e = tape.slice_rows(w, 2 * d_h + 2 * d_v..p.dims.d_cat())?;
            let ew = tape.matmul(e, w_e)?;
            pre = tape.add(pre, ew)?;
        }
        None if d_e == 0 => {}
        _ => return Err(Error::invalid("edge_scores", "edge attributes do not match d_e")),
    }
    let act = tape.tanh(pre);
    let u = tape.param(p.u);
    let u = tape.reshape(u, &[d_attn, 1])?;
    let s = tape.matmul(act, u)?;
    tape.reshape(s, &[n, n])
}

/// Softmax over sources `i` for every target `k`: columns sum to one.
pub fn normalize_alpha(tape: &mut Tape<'_>, s: Var) -> Result<Var> {
    let (r, c) = tape.value(s).dims2();
    if r != c {
        return Err(Error::shape("normalize_alpha", tape.shape(s), &[r, r]));
    }
    let st = tape.transpose(s);
    let a = tape.row_softmax(st)?;
    Ok(tape.transpose(a))
}

/// Row `k` of the result is `Σ_i α_ik h_i`.
pub fn aggregate(tape: &mut Tape<'_>, alpha: Var, h: Var) -> Result<Var> {
    let at = tape.transpose(alpha);
    tape.matmul(at, h)
}

/// Convex blend of the current state and its aggregate, gated by the
/// current state only: `g = σ(h_k·W_g + b_g)`.
pub fn gated_update(tape: &mut Tape<'_>, h: Var, h_agg: Var, p: &LayerParams) -> Result<Var> {
    if tape.shape(h) != tape.shape(h_agg) {
        return Err(Error::shape("gated_update", tape.shape(h), tape.shape(h_agg)));
    }
    let w = tape.param(p.w_gate);
    let b = tape.param(p.b_gate);
    let z = tape.matmul(h, w)?;
    let z = tape.add_row(z, b)?;
    let g = tape.sigmoid(z);
    let take = tape.mul(g, h_agg)?;
    let keep_gate = tape.affine(g, -1.0, 1.0);
    let keep = tape.mul(keep_gate, h)?;
    tape.add(take, keep)
}

/// One full layer; returns the new states and the attention matrix.
pub fn layer_forward(
    tape: &mut Tape<'_>,
    h: Var,
    v: Option<Var>,
    e: Option<Var>,
    p: &LayerParams,
) -> Result<(Var, Var)> {
    let s = edge_scores(tape, h, v, e, p)?;
    let alpha = normalize_alpha(tape, s)?;
    let agg = aggregate(tape, alpha, h)?;
    let next = gated_update(tape, h, agg, p)?;
    Ok((next, alpha))
}

/// Per-layer attention matrices recorded during one forward pass.
///
/// Entry `(i, k)` of each matrix is `α_ik`; every column sums to one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaTrace {
    pub tokens: Vec<String>,
    pub per_layer: Vec<Tensor>,
}

impl AlphaTrace {
    /// Largest deviation of any column sum from one.
    pub fn max_column_error(&self) -> f64 {
        self.per_layer
            .iter()
            .flat_map(|a| {
                let (n, m) = a.dims2();
                (0..m).map(move |k| ((0..n).map(|i| a.get(i, k)).sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// The layer stack: an optional input projection followed by `L` layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cn3Stack {
    pub input_proj: Option<ParamId>,
    pub layers: Vec<LayerParams>,
    pub dims: LayerDims,
    /// Width of the fused input `[h⁰, v]` before projection.
    pub d_in: usize,
}

impl Cn3Stack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        dims: LayerDims,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let input_proj =
            (d_in != dims.d_h).then(|| store.add_uniform(format!("{prefix}.input_proj"), &[d_in, dims.d_h], 0.1, rng));
        let layers = (0..num_layers)
            .map(|l| LayerParams::new(store, &format!("{prefix}.layer{}", l + 1), dims, rng))
            .collect();
        Cn3Stack {
            input_proj,
            layers,
            dims,
            d_in,
        }
    }

    /// Initial node states: the word embedding fused with its attributes,
    /// projected to `d_h` when the widths differ.
    pub fn initial_states(&self, tape: &mut Tape<'_>, words: Var, v: Option<Var>) -> Result<Var> {
        let fused = match v {
            Some(v) => tape.concat_cols(&[words, v])?,
            None => words,
        };
        expect_cols(tape, fused, self.d_in, None, "initial_states")?;
        match self.input_proj {
            Some(p) => {
                let w = tape.param(p);
                tape.matmul(fused, w)
            }
            None => Ok(fused),
        }
    }

    /// Runs every layer from initial states `h`. Returns `H_L` and the
    /// per-layer attention nodes.
    pub fn run(&self, tape: &mut Tape<'_>, mut h: Var, v: Option<Var>, e: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let mut alphas = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let (next, alpha) = layer_forward(tape, h, v, e, p)?;
            alphas.push(alpha);
            h = next;
        }
        Ok((h, alphas))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(dims: LayerDims, seed: u64) -> (ParamStore, LayerParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = LayerParams::new(&mut store, "l", dims, &mut rng);
        // widen the default init so tanh and softmax are far from linear
        for id in [p.w_score, p.u, p.w_gate, p.b_gate] {
            let (r, c) = store.value(id).dims2();
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = random(&mut rng, r, c).reshaped(&shape).unwrap();
        }
        (store, p, rng)
    }

    const DIMS: LayerDims = LayerDims {
        d_h: 3,
        d_v: 2,
        d_e: 2,
        d_attn: 4,
    };

    #[test]
    fn zero_u_gives_zero_scores() {
        let (mut store, p, mut rng) = setup(DIMS, 0);
        *store.value_mut(p.u) = Tensor::zeros(&[4]);
        let mut tape = Tape::new(&store);
        let h = tape.constant(random(&mut rng, 3, 3));
        let v = tape.constant(random(&mut rng, 3, 2));
        let e = tape.constant(random(&mut rng, 9, 2));
        let s = edge_scores(&mut tape, h, Some(v), Some(e), &p).unwrap();
        assert!(tape.value(s).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_node_has_single_self_score() {
        let (store, p, mut rng) = setup(DIMS, 1);
        let mut tape = Tape::new(&store);
        let h = tape.constant(random(&mut rng, 1, 3));
        let v = tape.constant(random(&mut rng, 1, 2));
        let e = tape.constant(random(&mut rng, 1, 2));
        let s = edge_scores(&mut tape, h, Some(v), Some(e), &p).unwrap();
        assert_eq!(tape.shape(s), &[1, 1]);
    }

    /// Builds every concat vector explicitly and applies `uᵀ tanh(W x)`.
    fn scalar_scores(store: &ParamStore, p: &LayerParams, h: &Tensor, v: &Tensor, e: &Tensor) -> Vec<f64> {
        let n = h.rows();
        let w = store.value(p.w_score);
        let u = store.value(p.u).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let mut x = Vec::new();
                x.extend_from_slice(h.row(k));
                x.extend_from_slice(h.row(i));
                x.extend_from_slice(v.row(i));
                x.extend_from_slice(v.row(k));
                x.extend_from_slice(e.row(i * n + k));
                let mut s = 0.0;
                for a in 0..u.len() {
                    let z: f64 = (0..x.len()).map(|r| x[r] * w.get(r, a)).sum();
                    s += u[a] * z.tanh();
                }
                out[i * n + k] = s;
            }
        }
        out
    }

    #[test]
    fn scores_match_explicit_concatenation() {
        let (store, p, mut rng) = setup(DIMS, 2);
        let (hv, vv, ev) = (random(&mut rng, 2, 3), random(&mut rng, 2, 2), random(&mut rng, 4, 2));
        let expect = scalar_scores(&store, &p, &hv, &vv, &ev);
        let mut tape = Tape::new(&store);
        let (h, v, e) = (tape.constant(hv), tape.constant(vv), tape.constant(ev));
        let s = edge_scores(&mut tape, h, Some(v), Some(e), &p).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_reject_mismatched_attributes() {
        let (store, p, mut rng) = setup(DIMS, 3);
        let mut tape = Tape::new(&store);
        let h = tape.constant(random(&mut rng, 2, 3));
        let v = tape.constant(random(&mut rng, 2, 5));
        assert!(edge_scores(&mut tape, h, Some(v), None, &p).is_err());
        assert!(edge_scores(&mut tape, h, None, None, &p).is_err());
    }

    #[test]
    fn alpha_normalisation() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let a = normalize_alpha(&mut tape, z).unwrap();
        for x in tape.value(a).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sv = random(&mut rng, 4, 4);
        let s = tape.constant(sv.clone());
        let a = normalize_alpha(&mut tape, s).unwrap();
        let av = tape.value(a).clone();
        for k in 0..4 {
            let sum: f64 = (0..4).map(|i| av.get(i, k)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let mut shifted = sv;
        for i in 0..4 {
            shifted.data_mut()[i * 4 + 2] += 3.5;
        }
        let s2 = tape.constant(shifted);
        let a2 = normalize_alpha(&mut tape, s2).unwrap();
        for i in 0..4 {
            assert!((tape.value(a2).get(i, 2) - av.get(i, 2)).abs() < 1e-12);
        }

        let bad = tape.constant(Tensor::from_rows(&[[0.0, f64::NAN], [0.0, 0.0]]).unwrap());
        assert!(normalize_alpha(&mut tape, bad).is_err());
    }

    #[test]
    fn aggregation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let hv = random(&mut rng, 3, 4);
        let h = tape.constant(hv.clone());
        let eye = tape.constant(Tensor::eye(3));
        let out = aggregate(&mut tape, eye, h).unwrap();
        assert_eq!(tape.value(out), &hv);

        let uni = tape.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        let out = aggregate(&mut tape, uni, h).unwrap();
        for k in 0..3 {
            for c in 0..4 {
                let mean = (0..3).map(|i| hv.get(i, c)).sum::<f64>() / 3.0;
                assert!((tape.value(out).get(k, c) - mean).abs() < 1e-12);
            }
        }

        let av = random(&mut rng, 3, 3);
        let a = tape.constant(av.clone());
        let out = aggregate(&mut tape, a, h).unwrap();
        for k in 0..3 {
            for c in 0..4 {
                let naive: f64 = (0..3).map(|i| av.get(i, k) * hv.get(i, c)).sum();
                assert!((tape.value(out).get(k, c) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_cases() {
        let (mut store, p, mut rng) = setup(DIMS, 6);
        let hv = random(&mut rng, 4, 3);
        let av = random(&mut rng, 4, 3);
        {
            let mut tape = Tape::new(&store);
            let h = tape.constant(hv.clone());
            let out = gated_update(&mut tape, h, h, &p).unwrap();
            assert!(tape.value(out).max_abs_diff(&hv) < 1e-15);
        }
        *store.value_mut(p.w_gate) = Tensor::zeros(&[3, 3]);
        *store.value_mut(p.b_gate) = Tensor::zeros(&[3]);
        {
            let mut tape = Tape::new(&store);
            let (h, a) = (tape.constant(hv.clone()), tape.constant(av.clone()));
            let out = gated_update(&mut tape, h, a, &p).unwrap();
            for i in 0..12 {
                let expect = (hv.data()[i] + av.data()[i]) / 2.0;
                assert!((tape.value(out).data()[i] - expect).abs() < 1e-15);
            }
        }
        *store.value_mut(p.b_gate) = Tensor::full(&[3], 30.0);
        let mut tape = Tape::new(&store);
        let (h, a) = (tape.constant(hv), tape.constant(av.clone()));
        let out = gated_update(&mut tape, h, a, &p).unwrap();
        // 1 - σ(30) ≈ 9.4e-14, times |h - h̃| ≤ 2
        assert!(tape.value(out).max_abs_diff(&av) < 1e-9);
    }

    #[test]
    fn two_layers_equal_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let dims = DIMS;
        let stack = Cn3Stack::new(&mut store, "cn3", 3, dims, 2, &mut rng);
        assert!(stack.input_proj.is_none());
        let (hv, vv, ev) = (random(&mut rng, 4, 3), random(&mut rng, 4, 2), random(&mut rng, 16, 2));
        let mut tape = Tape::new(&store);
        let (h, v, e) = (tape.constant(hv), tape.constant(vv), tape.constant(ev));
        let (out, alphas) = stack.run(&mut tape, h, Some(v), Some(e)).unwrap();
        assert_eq!(alphas.len(), 2);

        let mut cur = h;
        for p in &stack.layers {
            let s = edge_scores(&mut tape, cur, Some(v), Some(e), p).unwrap();
            let a = normalize_alpha(&mut tape, s).unwrap();
            let g = aggregate(&mut tape, a, cur).unwrap();
            cur = gated_update(&mut tape, cur, g, p).unwrap();
        }
        assert_eq!(tape.value(out), tape.value(cur));
        for a in alphas {
            assert_eq!(tape.shape(a), &[4, 4]);
        }
    }

    #[test]
    fn single_node_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let dims = LayerDims { d_v: 0, d_e: 0, ..DIMS };
        let stack = Cn3Stack::new(&mut store, "cn3", 5, dims, 1, &mut rng);
        let mut tape = Tape::new(&store);
        let w = tape.constant(random(&mut rng, 1, 5));
        let h0 = stack.initial_states(&mut tape, w, None).unwrap();
        let (h1, alphas) = stack.run(&mut tape, h0, None, None).unwrap();
        assert_eq!(tape.value(alphas[0]).data(), &[1.0]);
        assert!(tape.value(h1).max_abs_diff(tape.value(h0)) < 1e-15);
    }

    #[test]
    fn stack_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let stack = Cn3Stack::new(&mut store, "cn3", 5, DIMS, 2, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let (r, c) = store.value(id).dims2();
            *store.value_mut(id) = random(&mut rng, r, c).reshaped(&shape).unwrap();
        }
        let (wv, vv, ev) = (random(&mut rng, 4, 3), random(&mut rng, 4, 2), random(&mut rng, 16, 2));
        let target = random(&mut rng, 4, 3);
        let report = grad_check(&mut store, 1e-5, |tape| {
            let (w, v, e) = (
                tape.constant(wv.clone()),
                tape.constant(vv.clone()),
                tape.constant(ev.clone()),
            );
            let h0 = stack.initial_states(tape, w, Some(v))?;
            let (h, _) = stack.run(tape, h0, Some(v), Some(e))?;
            let t = tape.constant(target.clone());
            let d = tape.sub(h, t)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
