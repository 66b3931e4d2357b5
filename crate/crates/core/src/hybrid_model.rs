//! Hybrid layer-group model assembly.
//!
//! The model is N layer groups; each group is M linear attention blocks
//! followed by one softmax GQA block (M = layer_group_size - 1; M = 0
//! degenerates to a pure softmax stack). Linear blocks use the gated output
//! path: grouped RMSNorm of the attention output, elementwise sigmoid gate
//! from the block input, then the output projection and residual add.
//!
//! The residual stream is always kept in full f64 precision, and the final
//! logit projection always computes in f64 regardless of the emulated
//! precision policy. Reduced precision is injected at GEMM inputs
//! (activations) and at linear-state write-back (state), matching where the
//! training/inference disparity experiments need it.

use crate::error::{Error, Result};
use crate::linear_attention::{
    attn_chunked_prefill, attn_recurrent_step_rounded, make_decay_schedule, DecaySchedule,
    LinearAttnState, ScheduleKind,
};
use crate::moe::{route, ExpertParams, MoeConfig, RouterPrecision};
use crate::numerics::{matmul, Matrix, PrecisionMode};
use crate::softmax_attention::{
    apply_partial_rope, gqa_decode, gqa_prefill, qk_norm, GqaConfig, KvCache,
};
use crate::trace::{ActivationTrace, ModuleTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Where reduced precision gets injected during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionPolicy {
    /// Rounding applied to activation inputs of attention/gate/output GEMMs.
    pub activations: PrecisionMode,
    /// Rounding applied to the linear-attention kv state at write-back.
    pub state: PrecisionMode,
}

impl PrecisionPolicy {
    pub fn exact() -> Self {
        PrecisionPolicy {
            activations: PrecisionMode::Exact64,
            state: PrecisionMode::Exact64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Softmax,
}

/// Full model shape. `layer_group_size` is M+1.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub layer_group_size: usize,
    pub d_model: usize,
    pub gqa: GqaConfig,
    pub moe: MoeConfig,
    pub decay: DecaySchedule,
    pub norm_groups: usize,
    pub first_block_dense: bool,
    /// Width of the final logit projection (stand-in for a vocabulary).
    pub vocab: usize,
    pub seed: u64,
    /// Chunk size for linear-attention prefill.
    pub chunk: usize,
}

impl ModelConfig {
    /// Desk-scale default: shape-faithful to the small production model
    /// (20 layers at ratio 1:4) at a fraction of the width.
    pub fn desk_default() -> Self {
        let gqa = GqaConfig {
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            rope_fraction: 0.5,
            rope_base: 10_000.0,
            qk_norm_eps: 1e-6,
        };
        ModelConfig {
            n_layers: 10,
            layer_group_size: 5,
            d_model: 64,
            gqa,
            moe: MoeConfig {
                n_experts: 8,
                n_top_k: 2,
                d_model: 64,
                d_expert_hidden: 32,
                router_precision: RouterPrecision::HighPrecision,
            },
            decay: make_decay_schedule(4, ScheduleKind::PowerLaw).expect("4 heads"),
            norm_groups: 2,
            first_block_dense: true,
            vocab: 32,
            seed: 0,
            chunk: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.layer_group_size == 0 {
            return Err(Error::InvalidConfig("layer counts must be >= 1".into()));
        }
        if self.n_layers % self.layer_group_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_layers {} not divisible by layer_group_size {}",
                self.n_layers, self.layer_group_size
            )));
        }
        self.gqa.validate()?;
        self.moe.validate()?;
        if self.moe.d_model != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "moe d_model {} != model d_model {}",
                self.moe.d_model, self.d_model
            )));
        }
        if self.decay.n_heads() != self.gqa.n_heads {
            return Err(Error::InvalidConfig(format!(
                "decay schedule has {} heads, attention has {}",
                self.decay.n_heads(),
                self.gqa.n_heads
            )));
        }
        let attn_width = self.gqa.n_heads * self.gqa.d_head;
        if self.norm_groups == 0 || attn_width % self.norm_groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention width {attn_width} not divisible by norm_groups {}",
                self.norm_groups
            )));
        }
        if self.chunk == 0 {
            return Err(Error::InvalidConfig("chunk must be >= 1".into()));
        }
        if self.vocab == 0 || self.d_model == 0 {
            return Err(Error::InvalidConfig("dims must be >= 1".into()));
        }
        Ok(())
    }

    /// M: linear layers per group.
    pub fn m(&self) -> usize {
        self.layer_group_size - 1
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if layer % self.layer_group_size == self.layer_group_size - 1 {
            LayerKind::Softmax
        } else {
            LayerKind::Linear
        }
    }

    pub fn n_softmax_layers(&self) -> usize {
        self.n_layers / self.layer_group_size
    }

    /// Parse a plain-text key=value config. Unknown keys are rejected;
    /// missing keys fall back to the desk-scale defaults. Lines starting
    /// with '#' and blank lines are ignored.
    ///
    /// Keys: n_layers, layer_group_size, d_model, n_heads, n_kv_heads,
    /// d_head, rope_fraction, rope_base, qk_norm_eps, norm_groups,
    /// n_experts, n_top_k, d_expert_hidden, decay (powerlaw | linear |
    /// uniform:<rate>), first_block_dense, vocab, seed, chunk.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk_default();
        let mut decay_kind = ScheduleKind::PowerLaw;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            let val = val.trim();
            let parse_err = |msg: String| Error::Parse {
                line: lineno + 1,
                msg,
            };
            let as_usize =
                |v: &str| v.parse::<usize>().map_err(|e| parse_err(e.to_string()));
            let as_f64 = |v: &str| v.parse::<f64>().map_err(|e| parse_err(e.to_string()));
            match key {
                "n_layers" => cfg.n_layers = as_usize(val)?,
                "layer_group_size" => cfg.layer_group_size = as_usize(val)?,
                "d_model" => {
                    cfg.d_model = as_usize(val)?;
                    cfg.moe.d_model = cfg.d_model;
                }
                "n_heads" => cfg.gqa.n_heads = as_usize(val)?,
                "n_kv_heads" => cfg.gqa.n_kv_heads = as_usize(val)?,
                "d_head" => cfg.gqa.d_head = as_usize(val)?,
                "rope_fraction" => cfg.gqa.rope_fraction = as_f64(val)?,
                "rope_base" => cfg.gqa.rope_base = as_f64(val)?,
                "qk_norm_eps" => cfg.gqa.qk_norm_eps = as_f64(val)?,
                "norm_groups" => cfg.norm_groups = as_usize(val)?,
                "n_experts" => cfg.moe.n_experts = as_usize(val)?,
                "n_top_k" => cfg.moe.n_top_k = as_usize(val)?,
                "d_expert_hidden" => cfg.moe.d_expert_hidden = as_usize(val)?,
                "first_block_dense" => {
                    cfg.first_block_dense = val
                        .parse::<bool>()
                        .map_err(|e| parse_err(e.to_string()))?
                }
                "vocab" => cfg.vocab = as_usize(val)?,
                "seed" => {
                    cfg.seed = val.parse::<u64>().map_err(|e| parse_err(e.to_string()))?
                }
                "chunk" => cfg.chunk = as_usize(val)?,
                "decay" => {
                    decay_kind = match val {
                        "powerlaw" => ScheduleKind::PowerLaw,
                        "linear" => ScheduleKind::Linear,
                        other => match other.strip_prefix("uniform:") {
                            Some(rate) => ScheduleKind::Uniform(as_f64(rate)?),
                            None => {
                                return Err(parse_err(format!("unknown decay kind {other:?}")))
                            }
                        },
                    };
                }
                other => {
                    return Err(parse_err(format!("unknown config key {other:?}")));
                }
            }
        }
        cfg.decay = make_decay_schedule(cfg.gqa.n_heads, decay_kind)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum MlpParams {
    Dense(ExpertParams),
    Moe {
        router: Matrix,
        experts: Vec<ExpertParams>,
    },
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// Sigmoid gate projection; linear layers only.
    pub w_gate: Option<Matrix>,
    pub w_out: Matrix,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub lm_head: Matrix,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

impl ModelParams {
    /// Deterministic initialization from the config seed: a single ChaCha8
    /// stream, parameters drawn in fixed layer order.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let attn_w = cfg.gqa.n_heads * cfg.gqa.d_head;
        let kv_w = cfg.gqa.n_kv_heads * cfg.gqa.d_head;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let kind = cfg.layer_kind(layer);
            let (k_cols, v_cols) = match kind {
                LayerKind::Linear => (attn_w, attn_w),
                LayerKind::Softmax => (kv_w, kv_w),
            };
            let wq = init_matrix(&mut rng, d, attn_w);
            let wk = init_matrix(&mut rng, d, k_cols);
            let wv = init_matrix(&mut rng, d, v_cols);
            let w_gate = match kind {
                LayerKind::Linear => Some(init_matrix(&mut rng, d, attn_w)),
                LayerKind::Softmax => None,
            };
            let w_out = init_matrix(&mut rng, attn_w, d);
            let dense_hidden = cfg.moe.d_expert_hidden * cfg.moe.n_top_k;
            let mlp = if layer == 0 && cfg.first_block_dense {
                MlpParams::Dense(ExpertParams {
                    gate_proj: init_matrix(&mut rng, d, dense_hidden),
                    up_proj: init_matrix(&mut rng, d, dense_hidden),
                    down_proj: init_matrix(&mut rng, dense_hidden, d),
                })
            } else {
                MlpParams::Moe {
                    router: init_matrix(&mut rng, d, cfg.moe.n_experts),
                    experts: (0..cfg.moe.n_experts)
                        .map(|_| ExpertParams {
                            gate_proj: init_matrix(&mut rng, d, cfg.moe.d_expert_hidden),
                            up_proj: init_matrix(&mut rng, d, cfg.moe.d_expert_hidden),
                            down_proj: init_matrix(&mut rng, cfg.moe.d_expert_hidden, d),
                        })
                        .collect(),
                }
            };
            layers.push(LayerParams {
                kind,
                wq,
                wk,
                wv,
                w_gate,
                w_out,
                mlp,
            });
        }
        let lm_head = init_matrix(&mut rng, d, cfg.vocab);
        Ok(ModelParams { layers, lm_head })
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum LayerState {
    /// One constant-size kv state per attention head.
    Linear(Vec<LinearAttnState>),
    /// Growing per-token cache.
    Softmax(KvCache),
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub layers: Vec<LayerState>,
    pub pos: usize,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|l| match cfg.layer_kind(l) {
                LayerKind::Linear => LayerState::Linear(
                    (0..cfg.gqa.n_heads)
                        .map(|_| LinearAttnState::new(cfg.gqa.d_head))
                        .collect(),
                ),
                LayerKind::Softmax => {
                    LayerState::Softmax(KvCache::empty(cfg.gqa.n_kv_heads, cfg.gqa.d_head))
                }
            })
            .collect();
        ModelState { layers, pos: 0 }
    }

    /// Total bytes held by linear-attention states (constant in position).
    pub fn linear_state_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Linear(heads) => heads.iter().map(|h| h.byte_size()).sum(),
                LayerState::Softmax(_) => 0,
            })
            .sum()
    }

    /// Total bytes held by softmax kv caches (linear in position).
    pub fn softmax_cache_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Linear(_) => 0,
                LayerState::Softmax(cache) => cache.byte_size(),
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// RMS-normalize each contiguous d/groups slice of every row independently.
pub fn grouped_rmsnorm(x: &Matrix, groups: usize, eps: f64) -> Result<Matrix> {
    if groups == 0 || x.cols() % groups != 0 {
        return Err(Error::RejectedInput(format!(
            "grouped_rmsnorm: width {} not divisible by {} groups",
            x.cols(),
            groups
        )));
    }
    let gw = x.cols() / groups;
    let mut out = x.clone();
    for i in 0..x.rows() {
        for g in 0..groups {
            let mut ss = 0.0;
            for j in g * gw..(g + 1) * gw {
                ss += x.get(i, j) * x.get(i, j);
            }
            let inv = 1.0 / (ss / gw as f64 + eps).sqrt();
            for j in g * gw..(g + 1) * gw {
                out.set(i, j, x.get(i, j) * inv);
            }
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GEMM with the activation-precision grid applied to the input.
fn pmm(x: &Matrix, w: &Matrix, policy: &PrecisionPolicy) -> Result<Matrix> {
    matmul(&policy.activations.apply(x)?, w)
}

fn record(trace: &mut Option<&mut ActivationTrace>, layer: usize, tag: ModuleTag, m: &Matrix) {
    if let Some(t) = trace.as_deref_mut() {
        t.record(layer, tag, m);
    }
}

/// Split an n x (heads*d_head) matrix, apply qk_norm + partial rope per
/// head slice, and reassemble. Shared by linear and softmax tap paths.
fn norm_rope_heads(
    x: &Matrix,
    heads: usize,
    positions: &[usize],
    cfg: &GqaConfig,
) -> Result<(Matrix, Matrix)> {
    let d = cfg.d_head;
    let mut normed = Matrix::zeros(x.rows(), x.cols());
    let mut roped = Matrix::zeros(x.rows(), x.cols());
    for h in 0..heads {
        let slice = x.columns(h * d, (h + 1) * d);
        let n = qk_norm(&slice, cfg.qk_norm_eps);
        let r = apply_partial_rope(&n, positions, cfg)?;
        normed.set_columns(h * d, &n);
        roped.set_columns(h * d, &r);
    }
    Ok((normed, roped))
}

fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    out.set_columns(0, a);
    out.set_columns(a.cols(), b);
    out
}

fn mlp_forward(x: &Matrix, mlp: &MlpParams, cfg: &ModelConfig) -> Result<Matrix> {
    match mlp {
        MlpParams::Dense(expert) => expert.forward(x),
        MlpParams::Moe { router, experts } => {
            let decision = route(x, router, &cfg.moe)?;
            crate::moe::moe_forward(x, &decision, experts, &cfg.moe)
        }
    }
}

/// One linear attention block over a whole sequence starting at the
/// position recorded in `states` (prefill path). Uses the chunked core in
/// exact mode and the rounded recurrence when state precision is reduced.
#[allow(clippy::too_many_arguments)]
pub fn linear_block_prefill(
    x: &Matrix,
    layer: &LayerParams,
    states: &mut [LinearAttnState],
    cfg: &ModelConfig,
    policy: &PrecisionPolicy,
    pos0: usize,
    layer_idx: usize,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<Matrix> {
    if layer.kind != LayerKind::Linear {
        return Err(Error::RejectedInput(
            "linear_block_prefill on a softmax layer".into(),
        ));
    }
    let n = x.rows();
    let d = cfg.gqa.d_head;
    let heads = cfg.gqa.n_heads;
    let positions: Vec<usize> = (pos0..pos0 + n).collect();
    let q = pmm(x, &layer.wq, policy)?;
    let k = pmm(x, &layer.wk, policy)?;
    let v = pmm(x, &layer.wv, policy)?;
    let (qn, qr) = norm_rope_heads(&q, heads, &positions, &cfg.gqa)?;
    let (kn, kr) = norm_rope_heads(&k, heads, &positions, &cfg.gqa)?;
    record(&mut trace, layer_idx, ModuleTag::QkNorm, &hcat(&qn, &kn));
    record(&mut trace, layer_idx, ModuleTag::Rope, &hcat(&qr, &kr));
    let mut attn = Matrix::zeros(n, heads * d);
    for h in 0..heads {
        let qh = qr.columns(h * d, (h + 1) * d);
        let kh = kr.columns(h * d, (h + 1) * d);
        let vh = v.columns(h * d, (h + 1) * d);
        let lambda = cfg.decay.rate(h);
        let (oh, new_state) = if policy.state == PrecisionMode::Exact64 {
            attn_chunked_prefill(&qh, &kh, &vh, lambda, cfg.chunk, &states[h])?
        } else {
            // reduced state precision requires the token recurrence so the
            // rounding lands at every write-back
            let mut st = states[h].clone();
            let mut out = Matrix::zeros(n, d);
            for t in 0..n {
                let (o, next) = attn_recurrent_step_rounded(
                    &st,
                    qh.row(t),
                    kh.row(t),
                    vh.row(t),
                    lambda,
                    &policy.state,
                )?;
                for b in 0..d {
                    out.set(t, b, o[b]);
                }
                st = next;
            }
            (out, st)
        };
        attn.set_columns(h * d, &oh);
        states[h] = new_state;
    }
    record(&mut trace, layer_idx, ModuleTag::AttnCore, &attn);
    let g = grouped_rmsnorm(&attn, cfg.norm_groups, cfg.gqa.qk_norm_eps)?;
    record(&mut trace, layer_idx, ModuleTag::GroupNorm, &g);
    let w_gate = layer
        .w_gate
        .as_ref()
        .ok_or_else(|| Error::RejectedInput("linear layer missing gate weights".into()))?;
    let gate = pmm(x, w_gate, policy)?.map(sigmoid);
    record(&mut trace, layer_idx, ModuleTag::Gate, &gate);
    let y = x.add(&pmm(&g.hadamard(&gate)?, &layer.w_out, policy)?)?;
    let m = mlp_forward(&y, &layer.mlp, cfg)?;
    record(&mut trace, layer_idx, ModuleTag::MlpMoe, &m);
    let out = y.add(&m)?;
    record(&mut trace, layer_idx, ModuleTag::Residual, &out);
    Ok(out)
}

/// One softmax GQA block over a whole sequence (prefill path).
#[allow(clippy::too_many_arguments)]
pub fn softmax_block_prefill(
    x: &Matrix,
    layer: &LayerParams,
    cache: &mut KvCache,
    cfg: &ModelConfig,
    policy: &PrecisionPolicy,
    pos0: usize,
    layer_idx: usize,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<Matrix> {
    if layer.kind != LayerKind::Softmax {
        return Err(Error::RejectedInput(
            "softmax_block_prefill on a linear layer".into(),
        ));
    }
    let n = x.rows();
    let positions: Vec<usize> = (pos0..pos0 + n).collect();
    let q = pmm(x, &layer.wq, policy)?;
    let k = pmm(x, &layer.wk, policy)?;
    let v = pmm(x, &layer.wv, policy)?;
    let (qn, qr) = norm_rope_heads(&q, cfg.gqa.n_heads, &positions, &cfg.gqa)?;
    let (kn, kr) = norm_rope_heads(&k, cfg.gqa.n_kv_heads, &positions, &cfg.gqa)?;
    record(&mut trace, layer_idx, ModuleTag::QkNorm, &hcat(&qn, &kn));
    record(&mut trace, layer_idx, ModuleTag::Rope, &hcat(&qr, &kr));
    if cache.len() != pos0 {
        return Err(Error::RejectedInput(format!(
            "softmax cache length {} inconsistent with position {}",
            cache.len(),
            pos0
        )));
    }
    let attn = if pos0 == 0 {
        let (attn, new_cache) = gqa_prefill(&q, &k, &v, 0, &cfg.gqa)?;
        *cache = new_cache;
        attn
    } else {
        // continuation prefill: absorb tokens into the existing cache
        let mut attn = Matrix::zeros(n, cfg.gqa.n_heads * cfg.gqa.d_head);
        for t in 0..n {
            let o = gqa_decode(q.row(t), k.row(t), v.row(t), pos0 + t, cache, &cfg.gqa)?;
            for (j, val) in o.iter().enumerate() {
                attn.set(t, j, *val);
            }
        }
        attn
    };
    record(&mut trace, layer_idx, ModuleTag::AttnCore, &attn);
    let y = x.add(&pmm(&attn, &layer.w_out, policy)?)?;
    let m = mlp_forward(&y, &layer.mlp, cfg)?;
    record(&mut trace, layer_idx, ModuleTag::MlpMoe, &m);
    let out = y.add(&m)?;
    record(&mut trace, layer_idx, ModuleTag::Residual, &out);
    Ok(out)
}

/// Run all layers over an embedded sequence; returns the final hidden states
/// and the complete decode-ready model state.
pub fn model_prefill(
    x: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
    policy: &PrecisionPolicy,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<(Matrix, ModelState)> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::RejectedInput("model_prefill: empty input".into()));
    }
    if x.cols() != cfg.d_model {
        return Err(Error::DimensionMismatch(format!(
            "model_prefill: input width {} != d_model {}",
            x.cols(),
            cfg.d_model
        )));
    }
    let mut state = ModelState::new(cfg);
    let mut hidden = x.clone();
    for (layer_idx, layer) in params.layers.iter().enumerate() {
        hidden = match &mut state.layers[layer_idx] {
            LayerState::Linear(head_states) => linear_block_prefill(
                &hidden,
                layer,
                head_states,
                cfg,
                policy,
                0,
                layer_idx,
                trace.as_deref_mut(),
            )?,
            LayerState::Softmax(cache) => softmax_block_prefill(
                &hidden,
                layer,
                cache,
                cfg,
                policy,
                0,
                layer_idx,
                trace.as_deref_mut(),
            )?,
        };
    }
    state.pos = x.rows();
    Ok((hidden, state))
}

/// Advance one token through all layers using the recurrent linear cores
/// and the cached softmax attention.
pub fn model_decode_step(
    x_row: &[f64],
    cfg: &ModelConfig,
    params: &ModelParams,
    state: &mut ModelState,
    policy: &PrecisionPolicy,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<Vec<f64>> {
    if x_row.len() != cfg.d_model {
        return Err(Error::DimensionMismatch(format!(
            "decode: input width {} != d_model {}",
            x_row.len(),
            cfg.d_model
        )));
    }
    if state.layers.len() != cfg.n_layers {
        return Err(Error::RejectedInput(
            "decode: state does not match config".into(),
        ));
    }
    let pos = state.pos;
    let d = cfg.gqa.d_head;
    let heads = cfg.gqa.n_heads;
    let positions = [pos];
    let mut hidden = Matrix::from_vec(1, cfg.d_model, x_row.to_vec())?;
    for (layer_idx, layer) in params.layers.iter().enumerate() {
        let q = pmm(&hidden, &layer.wq, policy)?;
        let k = pmm(&hidden, &layer.wk, policy)?;
        let v = pmm(&hidden, &layer.wv, policy)?;
        match &mut state.layers[layer_idx] {
            LayerState::Linear(head_states) => {
                let (qn, qr) = norm_rope_heads(&q, heads, &positions, &cfg.gqa)?;
                let (kn, kr) = norm_rope_heads(&k, heads, &positions, &cfg.gqa)?;
                record(&mut trace, layer_idx, ModuleTag::QkNorm, &hcat(&qn, &kn));
                record(&mut trace, layer_idx, ModuleTag::Rope, &hcat(&qr, &kr));
                let mut attn = Matrix::zeros(1, heads * d);
                for h in 0..heads {
                    let (o, next) = attn_recurrent_step_rounded(
                        &head_states[h],
                        &qr.row(0)[h * d..(h + 1) * d],
                        &kr.row(0)[h * d..(h + 1) * d],
                        &v.row(0)[h * d..(h + 1) * d],
                        cfg.decay.rate(h),
                        &policy.state,
                    )?;
                    for b in 0..d {
                        attn.set(0, h * d + b, o[b]);
                    }
                    head_states[h] = next;
                }
                record(&mut trace, layer_idx, ModuleTag::AttnCore, &attn);
                let g = grouped_rmsnorm(&attn, cfg.norm_groups, cfg.gqa.qk_norm_eps)?;
                record(&mut trace, layer_idx, ModuleTag::GroupNorm, &g);
                let w_gate = layer.w_gate.as_ref().ok_or_else(|| {
                    Error::RejectedInput("linear layer missing gate weights".into())
                })?;
                let gate = pmm(&hidden, w_gate, policy)?.map(sigmoid);
                record(&mut trace, layer_idx, ModuleTag::Gate, &gate);
                let y = hidden.add(&pmm(&g.hadamard(&gate)?, &layer.w_out, policy)?)?;
                let m = mlp_forward(&y, &layer.mlp, cfg)?;
                record(&mut trace, layer_idx, ModuleTag::MlpMoe, &m);
                hidden = y.add(&m)?;
                record(&mut trace, layer_idx, ModuleTag::Residual, &hidden);
            }
            LayerState::Softmax(cache) => {
                if cache.len() != pos {
                    return Err(Error::RejectedInput(format!(
                        "decode: cache length {} != position {}",
                        cache.len(),
                        pos
                    )));
                }
                let (qn, qr) =
                    norm_rope_heads(&q, cfg.gqa.n_heads, &positions, &cfg.gqa)?;
                let (kn, kr) =
                    norm_rope_heads(&k, cfg.gqa.n_kv_heads, &positions, &cfg.gqa)?;
                record(&mut trace, layer_idx, ModuleTag::QkNorm, &hcat(&qn, &kn));
                record(&mut trace, layer_idx, ModuleTag::Rope, &hcat(&qr, &kr));
                let o = gqa_decode(q.row(0), k.row(0), v.row(0), pos, cache, &cfg.gqa)?;
                let attn = Matrix::from_vec(1, o.len(), o)?;
                record(&mut trace, layer_idx, ModuleTag::AttnCore, &attn);
                let y = hidden.add(&pmm(&attn, &layer.w_out, policy)?)?;
                let m = mlp_forward(&y, &layer.mlp, cfg)?;
                record(&mut trace, layer_idx, ModuleTag::MlpMoe, &m);
                hidden = y.add(&m)?;
                record(&mut trace, layer_idx, ModuleTag::Residual, &hidden);
            }
        }
    }
    state.pos += 1;
    Ok(hidden.row(0).to_vec())
}

/// Final logit projection. Always computed in full f64 precision regardless
/// of the emulated policy: the softmax downstream is too sensitive to
/// rounding for anything less.
pub fn lm_logits(hidden: &Matrix, params: &ModelParams) -> Result<Matrix> {
    matmul(hidden, &params.lm_head)
}

/// Deterministic random embeddings for a token sequence; the verification
/// drivers use this in place of a real tokenizer/embedding table.
pub fn random_embeddings(n: usize, d_model: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    Matrix::from_fn(n, d_model, |_, _| rng.gen_range(-1.0..1.0))
}
