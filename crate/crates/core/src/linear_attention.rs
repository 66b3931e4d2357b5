//! Fixed-decay linear attention in three provably equivalent forms.
//!
//! The ground truth is the quadratic double sum
//! `o_t = q_t * sum_{s<=t} lambda^{t-s} k_s^T v_s`. The token recurrence
//! (`kv_t = lambda kv_{t-1} + k_t^T v_t`, `o_t = q_t kv_t`) and the chunked
//! prefill decomposition must agree with it to tight tolerances in 64-bit
//! arithmetic; the equivalence suite enforces this.
//!
//! The accumulated `kv` matrix is the entire decode-time state: d x d per
//! head, independent of sequence length.

use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, Matrix, PrecisionMode};

/// Per-head accumulated KV state. Constant-size regardless of how many
/// tokens have been absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttnState {
    kv: Matrix,
    step: usize,
}

impl LinearAttnState {
    /// Fresh all-zeros state (kv_0 = 0).
    pub fn new(d_head: usize) -> Self {
        LinearAttnState {
            kv: Matrix::zeros(d_head, d_head),
            step: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.kv.rows()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn kv(&self) -> &Matrix {
        &self.kv
    }

    /// Live storage in bytes (f64 payload only). Used by the cost model's
    /// empirical cross-check.
    pub fn byte_size(&self) -> usize {
        self.kv.data().len() * std::mem::size_of::<f64>()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda <= 1.0) {
        return Err(Error::RejectedInput(format!(
            "decay lambda {lambda} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_qkv_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.rows() != k.rows()
        || q.rows() != v.rows()
        || q.cols() != k.cols()
        || q.cols() != v.cols()
    {
        return Err(Error::DimensionMismatch(format!(
            "q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(())
}

/// Quadratic-form ground truth: computes the double sum directly.
/// O(n^2 d^2); every other execution form is checked against this.
pub fn attn_quadratic_oracle(q: &Matrix, k: &Matrix, v: &Matrix, lambda: f64) -> Result<Matrix> {
    check_qkv_shapes(q, k, v)?;
    check_lambda(lambda)?;
    let n = q.rows();
    let d = q.cols();
    let mut out = Matrix::zeros(n, d);
    for t in 0..n {
        // kv_t = sum_{s<=t} lambda^{t-s} k_s^T v_s, built fresh per t.
        let mut kv = Matrix::zeros(d, d);
        for s in 0..=t {
            // convention: lambda^0 == 1 even when lambda == 0
            let w = if t == s { 1.0 } else { lambda.powi((t - s) as i32) };
            for a in 0..d {
                for b in 0..d {
                    let cur = kv.get(a, b);
                    kv.set(a, b, cur + w * k.get(s, a) * v.get(s, b));
                }
            }
        }
        for b in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += q.get(t, a) * kv.get(a, b);
            }
            out.set(t, b, acc);
        }
    }
    Ok(out)
}

/// One step of the recurrence: kv' = lambda kv + k^T v, o = q kv'.
/// Returns the output row and the successor state; the input is untouched.
pub fn attn_recurrent_step(
    state: &LinearAttnState,
    q_t: &[f64],
    k_t: &[f64],
    v_t: &[f64],
    lambda: f64,
) -> (Vec<f64>, LinearAttnState) {
    attn_recurrent_step_rounded(state, q_t, k_t, v_t, lambda, &PrecisionMode::Exact64)
        .expect("exact mode cannot fail")
}

/// Recurrent step with a reduced-precision grid applied to the state at
/// write-back. This is the emulation point for the state-accumulation
/// precision experiments.
pub fn attn_recurrent_step_rounded(
    state: &LinearAttnState,
    q_t: &[f64],
    k_t: &[f64],
    v_t: &[f64],
    lambda: f64,
    state_precision: &PrecisionMode,
) -> Result<(Vec<f64>, LinearAttnState)> {
    let d = state.d_head();
    assert_eq!(q_t.len(), d);
    assert_eq!(k_t.len(), d);
    assert_eq!(v_t.len(), d);
    let mut kv = Matrix::from_fn(d, d, |a, b| {
        lambda * state.kv.get(a, b) + k_t[a] * v_t[b]
    });
    kv = state_precision.apply(&kv)?;
    let mut o = vec![0.0; d];
    for b in 0..d {
        let mut acc = 0.0;
        for a in 0..d {
            acc += q_t[a] * kv.get(a, b);
        }
        o[b] = acc;
    }
    Ok((
        o,
        LinearAttnState {
            kv,
            step: state.step + 1,
        },
    ))
}

/// Chunked prefill: per chunk, an intra-chunk pass with the lower-triangular
/// decay matrix D[i][j] = lambda^{i-j} (i >= j) plus an inter-chunk term from
/// the carried state decayed per position. Exactly reproduces the recurrence.
pub fn attn_chunked_prefill(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    lambda: f64,
    chunk: usize,
    state_in: &LinearAttnState,
) -> Result<(Matrix, LinearAttnState)> {
    check_qkv_shapes(q, k, v)?;
    check_lambda(lambda)?;
    if chunk == 0 {
        return Err(Error::RejectedInput("chunk size must be >= 1".into()));
    }
    let n = q.rows();
    let d = q.cols();
    if state_in.d_head() != d {
        return Err(Error::DimensionMismatch(format!(
            "state d_head {} != input d {}",
            state_in.d_head(),
            d
        )));
    }
    let mut out = Matrix::zeros(n, d);
    let mut state = state_in.clone();
    let mut start = 0;
    while start < n {
        let c = chunk.min(n - start);
        for i in 0..c {
            let t = start + i;
            // inter-chunk: carried state is i+1 decay steps behind token t
            let carry = lambda.powi((i + 1) as i32);
            for b in 0..d {
                let mut acc = 0.0;
                for a in 0..d {
                    acc += q.get(t, a) * state.kv.get(a, b);
                }
                out.set(t, b, carry * acc);
            }
            // intra-chunk: masked decay D[i][j] = lambda^{i-j} for j <= i
            for j in 0..=i {
                let s = start + j;
                let w = if i == j {
                    1.0
                } else {
                    lambda.powi((i - j) as i32)
                };
                let mut dot = 0.0;
                for a in 0..d {
                    dot += q.get(t, a) * k.get(s, a);
                }
                for b in 0..d {
                    let cur = out.get(t, b);
                    out.set(t, b, cur + w * dot * v.get(s, b));
                }
            }
        }
        // carry the state across the chunk boundary
        let mut kv = state.kv.scale(lambda.powi(c as i32));
        for j in 0..c {
            let s = start + j;
            let w = if j == c - 1 {
                1.0
            } else {
                lambda.powi((c - 1 - j) as i32)
            };
            for a in 0..d {
                for b in 0..d {
                    let cur = kv.get(a, b);
                    kv.set(a, b, cur + w * k.get(s, a) * v.get(s, b));
                }
            }
        }
        state = LinearAttnState {
            kv,
            step: state.step + c,
        };
        start += c;
    }
    Ok((out, state))
}

// ---------------------------------------------------------------------------
// Decay schedules
// ---------------------------------------------------------------------------

/// How per-head decay rates are spaced across heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// lambda_h = 1 - 2^-(lo + (hi-lo) h/(H-1)); exponents span lo..hi.
    /// This is a stand-in formula: the spacing family is standard for
    /// fixed-decay attention, but the production constants are not public.
    PowerLaw,
    /// Rates affine in head index between the same endpoints.
    Linear,
    /// Constant rate for every head.
    Uniform(f64),
}

/// Default exponent span for PowerLaw/Linear schedules: 1-2^-5 .. 1-2^-8.
pub const DECAY_EXP_LO: f64 = 5.0;
pub const DECAY_EXP_HI: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DecaySchedule {
    rates: Vec<f64>,
    kind: ScheduleKind,
}

impl DecaySchedule {
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn n_heads(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, head: usize) -> f64 {
        self.rates[head]
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
}

/// Build a per-head decay schedule with the default exponent span.
pub fn make_decay_schedule(n_heads: usize, kind: ScheduleKind) -> Result<DecaySchedule> {
    make_decay_schedule_with_span(n_heads, kind, DECAY_EXP_LO, DECAY_EXP_HI)
}

/// Build a schedule with an explicit exponent span (PowerLaw/Linear only).
pub fn make_decay_schedule_with_span(
    n_heads: usize,
    kind: ScheduleKind,
    exp_lo: f64,
    exp_hi: f64,
) -> Result<DecaySchedule> {
    if n_heads == 0 {
        return Err(Error::RejectedInput("n_heads must be >= 1".into()));
    }
    let endpoint = |e: f64| 1.0 - (2.0f64).powf(-e);
    let rates = match kind {
        ScheduleKind::Uniform(lambda) => {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(Error::RejectedInput(format!(
                    "uniform decay {lambda} outside (0, 1]"
                )));
            }
            vec![lambda; n_heads]
        }
        ScheduleKind::PowerLaw => (0..n_heads)
            .map(|h| {
                let frac = if n_heads == 1 {
                    0.0
                } else {
                    h as f64 / (n_heads - 1) as f64
                };
                endpoint(exp_lo + (exp_hi - exp_lo) * frac)
            })
            .collect(),
        ScheduleKind::Linear => {
            let lo = endpoint(exp_lo);
            let hi = endpoint(exp_hi);
            (0..n_heads)
                .map(|h| {
                    let frac = if n_heads == 1 {
                        0.0
                    } else {
                        h as f64 / (n_heads - 1) as f64
                    };
                    lo + (hi - lo) * frac
                })
                .collect()
        }
    };
    Ok(DecaySchedule { rates, kind })
}

// ---------------------------------------------------------------------------
// Tree-mask decode
// ---------------------------------------------------------------------------

/// A speculation tree over candidate tokens. Node i's parent index is < i
/// (topological order); node 0 is the single root.
#[derive(Debug, Clone)]
pub struct TokenTree {
    parents: Vec<Option<usize>>,
}

impl TokenTree {
    /// Build from parent links; `None` marks the root.
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::RejectedInput("empty token tree".into()));
        }
        let mut roots = 0;
        for (i, p) in parents.iter().enumerate() {
            match p {
                None => roots += 1,
                Some(pi) => {
                    if *pi >= i {
                        return Err(Error::RejectedInput(format!(
                            "node {i} has forward/cyclic parent {pi}"
                        )));
                    }
                }
            }
        }
        if roots != 1 {
            return Err(Error::RejectedInput(format!(
                "token tree must have exactly one root, found {roots}"
            )));
        }
        Ok(TokenTree { parents })
    }

    /// Linear chain of `n` nodes.
    pub fn chain(n: usize) -> Result<Self> {
        TokenTree::new((0..n).map(|i| if i == 0 { None } else { Some(i - 1) }).collect())
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    /// Depth of node i (root depth 0); equals its token-position offset.
    pub fn depth(&self, i: usize) -> usize {
        let mut d = 0;
        let mut cur = i;
        while let Some(p) = self.parents[cur] {
            d += 1;
            cur = p;
        }
        d
    }

    /// Root-to-node path, inclusive.
    pub fn path(&self, i: usize) -> Vec<usize> {
        let mut p = vec![i];
        let mut cur = i;
        while let Some(parent) = self.parents[cur] {
            p.push(parent);
            cur = parent;
        }
        p.reverse();
        p
    }
}

/// Speculative decode over a token tree: node i's output equals what the
/// recurrence would produce if its root-to-i path were decoded sequentially
/// from the shared prefix state. The shared state is never mutated; per-path
/// states are cloned eagerly.
pub fn attn_tree_decode(
    state: &LinearAttnState,
    tree: &TokenTree,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    lambda: f64,
) -> Result<Matrix> {
    check_qkv_shapes(q, k, v)?;
    check_lambda(lambda)?;
    if q.rows() != tree.len() {
        return Err(Error::DimensionMismatch(format!(
            "tree has {} nodes but q has {} rows",
            tree.len(),
            q.rows()
        )));
    }
    let d = q.cols();
    if state.d_head() != d {
        return Err(Error::DimensionMismatch(format!(
            "state d_head {} != input d {}",
            state.d_head(),
            d
        )));
    }
    let mut out = Matrix::zeros(tree.len(), d);
    // node_states[i] = state after absorbing node i (parent states are
    // always filled before children thanks to topological order)
    let mut node_states: Vec<LinearAttnState> = Vec::with_capacity(tree.len());
    for i in 0..tree.len() {
        let base = match tree.parent(i) {
            None => state,
            Some(p) => &node_states[p],
        };
        let (o, next) = attn_recurrent_step(base, q.row(i), k.row(i), v.row(i), lambda);
        for b in 0..d {
            out.set(i, b, o[b]);
        }
        node_states.push(next);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Analytic gradients of the quadratic-oracle forward. With
/// a_{t,s} = lambda^{t-s} (q_t . k_s) and o_t = sum_{s<=t} a_{t,s} v_s:
///   grad_q[t] = sum_{s<=t} lambda^{t-s} (go_t . v_s) k_s
///   grad_k[s] = sum_{t>=s} lambda^{t-s} (go_t . v_s) q_t
///   grad_v[s] = sum_{t>=s} lambda^{t-s} (q_t . k_s) go_t
pub fn linear_attn_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    lambda: f64,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    check_qkv_shapes(q, k, v)?;
    check_lambda(lambda)?;
    if grad_out.rows() != q.rows() || grad_out.cols() != q.cols() {
        return Err(Error::DimensionMismatch(format!(
            "grad_out {}x{} vs forward {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let n = q.rows();
    let d = q.cols();
    let mut gq = Matrix::zeros(n, d);
    let mut gk = Matrix::zeros(n, d);
    let mut gv = Matrix::zeros(n, d);
    for t in 0..n {
        for s in 0..=t {
            let w = if t == s { 1.0 } else { lambda.powi((t - s) as i32) };
            let mut go_dot_v = 0.0;
            let mut q_dot_k = 0.0;
            for a in 0..d {
                go_dot_v += grad_out.get(t, a) * v.get(s, a);
                q_dot_k += q.get(t, a) * k.get(s, a);
            }
            for a in 0..d {
                gq.set(t, a, gq.get(t, a) + w * go_dot_v * k.get(s, a));
                gk.set(s, a, gk.get(s, a) + w * go_dot_v * q.get(t, a));
                gv.set(s, a, gv.get(s, a) + w * q_dot_k * grad_out.get(t, a));
            }
        }
    }
    Ok((gq, gk, gv))
}

/// Scalar loss used by the gradient acceptance check: 0.5 ||O||_F^2 of the
/// oracle forward. Its analytic input-gradients are the backward pass above
/// with grad_out = O.
pub fn linear_attn_loss(q: &Matrix, k: &Matrix, v: &Matrix, lambda: f64) -> f64 {
    let o = attn_quadratic_oracle(q, k, v, lambda).expect("shape-checked by caller");
    0.5 * o.data().iter().map(|x| x * x).sum::<f64>()
}

/// Gradient spot check over random instances: analytic backward against
/// central finite differences of the scalar loss, for each of q, k, v.
/// Returns the worst relative error seen (Frobenius norm of the difference
/// over the norm of the finite-difference gradient).
pub fn finite_check_gradients(seed: u64, instances: usize) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let rel = |analytic: &Matrix, numeric: &Matrix| {
        let mut dn = 0.0;
        let mut nn = 0.0;
        for (a, b) in analytic.data().iter().zip(numeric.data()) {
            dn += (a - b) * (a - b);
            nn += b * b;
        }
        dn.sqrt() / nn.sqrt().max(1e-12)
    };
    for _ in 0..instances {
        let n = rng.gen_range(2..=8);
        let d = [2usize, 3, 4][rng.gen_range(0..3)];
        let lambda = rng.gen_range(0.1..1.0);
        let mut mk = || Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let q = mk();
        let k = mk();
        let v = mk();
        let o = attn_quadratic_oracle(&q, &k, &v, lambda)?;
        let (gq, gk, gv) = linear_attn_backward(&q, &k, &v, lambda, &o)?;
        let h = 1e-5;
        let fq = finite_diff_grad(|m| linear_attn_loss(m, &k, &v, lambda), &q, h)?;
        let fk = finite_diff_grad(|m| linear_attn_loss(&q, m, &v, lambda), &k, h)?;
        let fv = finite_diff_grad(|m| linear_attn_loss(&q, &k, m, lambda), &v, h)?;
        worst = worst.max(rel(&gq, &fq)).max(rel(&gk, &fk)).max(rel(&gv, &fv));
    }
    Ok(worst)
}

/// Convenience: run a full sequence through the recurrence, returning all
/// outputs and the final state. Used by oracles and the hybrid model.
pub fn attn_recurrent_sequence(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    lambda: f64,
    state_in: &LinearAttnState,
) -> Result<(Matrix, LinearAttnState)> {
    check_qkv_shapes(q, k, v)?;
    check_lambda(lambda)?;
    let mut state = state_in.clone();
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for t in 0..q.rows() {
        let (o, next) = attn_recurrent_step(&state, q.row(t), k.row(t), v.row(t), lambda);
        for b in 0..q.cols() {
            out.set(t, b, o[b]);
        }
        state = next;
    }
    Ok((out, state))
}
