//! Mixture-of-experts feed-forward with sigmoid routing and stable top-k.
//!
//! Routing selects by (score desc, expert index asc) — a total order, so
//! exact ties always break toward the lower expert index and identical
//! logits always yield identical decisions. Expert outputs are combined in
//! ascending expert-index order; together these make route + forward bitwise
//! reproducible across runs and token permutations.
//!
//! Gate weights are the raw sigmoid scores of the chosen experts, not
//! renormalized to sum to one.

use crate::error::{Error, Result};
use crate::numerics::{matmul, round_bf16_scalar, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterPrecision {
    /// Router logits kept in full precision (the safe default).
    HighPrecision,
    /// Router logits rounded to bf16 before selection; exists to demonstrate
    /// the expert-flip failure mode, not for real use.
    LowPrecisionUnsafe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub n_top_k: usize,
    pub d_model: usize,
    pub d_expert_hidden: usize,
    pub router_precision: RouterPrecision,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_top_k == 0 || self.n_top_k > self.n_experts {
            return Err(Error::InvalidConfig(format!(
                "moe: n_top_k {} outside 1..={}",
                self.n_top_k, self.n_experts
            )));
        }
        if self.d_model == 0 || self.d_expert_hidden == 0 {
            return Err(Error::InvalidConfig("moe: dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-token routing outcome: chosen expert indices (sorted ascending) and
/// their sigmoid gate weights, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub experts: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
}

impl RoutingDecision {
    pub fn n_tokens(&self) -> usize {
        self.experts.len()
    }
}

/// SiLU-gated expert MLP: down( silu(gate_proj(x)) ⊙ up_proj(x) ).
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub gate_proj: Matrix, // d_model x d_hidden
    pub up_proj: Matrix,   // d_model x d_hidden
    pub down_proj: Matrix, // d_hidden x d_model
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ExpertParams {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let g = matmul(x, &self.gate_proj)?.map(silu);
        let u = matmul(x, &self.up_proj)?;
        matmul(&g.hadamard(&u)?, &self.down_proj)
    }
}

fn route_with_logits(scores_per_token: &[Vec<f64>], k: usize) -> RoutingDecision {
    let mut experts = Vec::with_capacity(scores_per_token.len());
    let mut gates = Vec::with_capacity(scores_per_token.len());
    for scores in scores_per_token {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // total order: score descending, then expert index ascending
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("router scores are finite")
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();
        let g = chosen.iter().map(|&e| scores[e]).collect();
        experts.push(chosen);
        gates.push(g);
    }
    RoutingDecision { experts, gates }
}

fn router_scores(
    hidden: &Matrix,
    router_weights: &Matrix,
    cfg: &MoeConfig,
) -> Result<Vec<Vec<f64>>> {
    if router_weights.rows() != cfg.d_model || router_weights.cols() != cfg.n_experts {
        return Err(Error::DimensionMismatch(format!(
            "router weights {}x{}, expected {}x{}",
            router_weights.rows(),
            router_weights.cols(),
            cfg.d_model,
            cfg.n_experts
        )));
    }
    let logits = matmul(hidden, router_weights)?;
    let mut per_token = Vec::with_capacity(hidden.rows());
    for t in 0..hidden.rows() {
        let row: Vec<f64> = logits
            .row(t)
            .iter()
            .map(|&l| match cfg.router_precision {
                RouterPrecision::HighPrecision => sigmoid(l),
                RouterPrecision::LowPrecisionUnsafe => sigmoid(round_bf16_scalar(l)),
            })
            .collect();
        per_token.push(row);
    }
    Ok(per_token)
}

/// Compute sigmoid routing scores and pick top-k deterministically.
pub fn route(
    hidden: &Matrix,
    router_weights: &Matrix,
    cfg: &MoeConfig,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    if hidden.cols() != cfg.d_model {
        return Err(Error::DimensionMismatch(format!(
            "route: hidden width {} != d_model {}",
            hidden.cols(),
            cfg.d_model
        )));
    }
    let scores = router_scores(hidden, router_weights, cfg)?;
    Ok(route_with_logits(&scores, cfg.n_top_k))
}

/// Combine chosen experts per token: sum of gate_weight * expert_mlp(token),
/// accumulated in ascending expert-index order.
pub fn moe_forward(
    hidden: &Matrix,
    decision: &RoutingDecision,
    experts: &[ExpertParams],
    cfg: &MoeConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    if decision.n_tokens() != hidden.rows() {
        return Err(Error::DimensionMismatch(format!(
            "moe_forward: decision for {} tokens, hidden has {}",
            decision.n_tokens(),
            hidden.rows()
        )));
    }
    let mut out = Matrix::zeros(hidden.rows(), cfg.d_model);
    for t in 0..hidden.rows() {
        let x = hidden.row_range(t, t + 1);
        for (idx, &e) in decision.experts[t].iter().enumerate() {
            if e >= experts.len() {
                return Err(Error::RejectedInput(format!(
                    "moe_forward: expert index {e} out of range ({})",
                    experts.len()
                )));
            }
            let y = experts[e].forward(&x)?;
            let g = decision.gates[t][idx];
            for j in 0..cfg.d_model {
                out.set(t, j, out.get(t, j) + g * y.get(0, j));
            }
        }
    }
    Ok(out)
}

/// Per-token count of experts that enter or leave the top-k set when router
/// logits are rounded to bf16 — the module-level training/inference
/// disparity diagnostic. Returns one symmetric-difference count per token.
pub fn route_precision_delta(
    hidden: &Matrix,
    router_weights: &Matrix,
    cfg: &MoeConfig,
) -> Result<Vec<usize>> {
    let hi = MoeConfig {
        router_precision: RouterPrecision::HighPrecision,
        ..*cfg
    };
    let lo = MoeConfig {
        router_precision: RouterPrecision::LowPrecisionUnsafe,
        ..*cfg
    };
    let a = route(hidden, router_weights, &hi)?;
    let b = route(hidden, router_weights, &lo)?;
    let mut deltas = Vec::with_capacity(a.n_tokens());
    for t in 0..a.n_tokens() {
        let sa: std::collections::BTreeSet<usize> = a.experts[t].iter().copied().collect();
        let sb: std::collections::BTreeSet<usize> = b.experts[t].iter().copied().collect();
        deltas.push(sa.symmetric_difference(&sb).count());
    }
    Ok(deltas)
}

/// Number of tokens whose expert set changed under bf16 router logits.
pub fn changed_token_count(deltas: &[usize]) -> usize {
    deltas.iter().filter(|&&d| d > 0).count()
}
