//! Training/inference alignment harness.
//!
//! Runs the same model along two execution paths (chunked prefill as the
//! training stand-in, token-by-token decode as inference), optionally with
//! different emulated precision, and diffs the activations module by module
//! plus the output distributions token by token. This localizes where a
//! numerical disparity enters and how much probability mass it moves.

use crate::error::{Error, Result};
use crate::hybrid_model::{
    lm_logits, model_decode_step, model_prefill, ModelConfig, ModelParams, ModelState,
    PrecisionPolicy,
};
use crate::numerics::{Matrix, PrecisionMode};
use crate::softmax_attention::softmax_row;
use crate::trace::{ActivationTrace, ModuleTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Prefill,
    Decode,
}

/// One way of running the model: execution style plus precision injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    pub execution: Execution,
    pub activations: PrecisionMode,
    pub state: PrecisionMode,
}

impl PathSpec {
    pub fn exact(execution: Execution) -> Self {
        PathSpec {
            execution,
            activations: PrecisionMode::Exact64,
            state: PrecisionMode::Exact64,
        }
    }

    fn policy(&self) -> PrecisionPolicy {
        PrecisionPolicy {
            activations: self.activations,
            state: self.state,
        }
    }

    pub fn describe(&self) -> String {
        let exec = match self.execution {
            Execution::Prefill => "prefill",
            Execution::Decode => "decode",
        };
        format!(
            "{exec}/act={}/state={}",
            self.activations.label(),
            self.state.label()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffStat {
    pub max_abs: f64,
    pub mean_abs: f64,
}

impl DiffStat {
    fn between(a: &Matrix, b: &Matrix) -> DiffStat {
        DiffStat {
            max_abs: a.max_abs_diff(b),
            mean_abs: a.mean_abs_diff(b),
        }
    }
}

/// Per-token absolute probability difference on the realized (path-a
/// argmax) token.
#[derive(Debug, Clone)]
pub struct DisparityStats {
    /// |p_a(realized) - p_b(realized)| per position.
    pub diffs: Vec<f64>,
    pub max_diff: f64,
    /// Fraction of positions whose difference exceeds the threshold.
    pub frac_exceed: f64,
    pub threshold: f64,
    /// Counts of diffs in ten equal bins over [0, 1].
    pub histogram: [usize; 10],
}

/// Full two-path comparison.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub path_a: String,
    pub path_b: String,
    /// Ordered (layer, module) activation diffs.
    pub module_diffs: Vec<(usize, ModuleTag, DiffStat)>,
    /// Diff of the full logit matrices.
    pub logit_diff: DiffStat,
    pub disparity: DisparityStats,
}

impl AlignmentReport {
    /// Largest activation diff anywhere in the stack.
    pub fn worst_module_diff(&self) -> f64 {
        self.module_diffs
            .iter()
            .map(|(_, _, d)| d.max_abs)
            .fold(0.0, f64::max)
    }

    /// CSV of the per-module diffs, ordered by (layer, module).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,module,max_abs_diff,mean_abs_diff\n");
        for (layer, tag, d) in &self.module_diffs {
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e}\n",
                layer,
                tag.name(),
                d.max_abs,
                d.mean_abs
            ));
        }
        out
    }
}

/// Run one path end to end; returns final hidden states and the trace.
pub fn run_path(
    x: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
    path: &PathSpec,
) -> Result<(Matrix, ActivationTrace)> {
    let mut trace = ActivationTrace::new();
    let policy = path.policy();
    let hidden = match path.execution {
        Execution::Prefill => model_prefill(x, cfg, params, &policy, Some(&mut trace))?.0,
        Execution::Decode => {
            let mut state = ModelState::new(cfg);
            let mut hidden = Matrix::zeros(0, cfg.d_model);
            for t in 0..x.rows() {
                let row = model_decode_step(
                    x.row(t),
                    cfg,
                    params,
                    &mut state,
                    &policy,
                    Some(&mut trace),
                )?;
                hidden.push_row(&row);
            }
            hidden
        }
    };
    Ok((hidden, trace))
}

/// Per-position absolute probability difference on the token path a would
/// realize (its argmax). Softmax is always taken in f64 regardless of the
/// emulated precision of the paths that produced the logits.
pub fn probability_disparity(
    logits_a: &Matrix,
    logits_b: &Matrix,
    threshold: f64,
) -> Result<DisparityStats> {
    if logits_a.rows() != logits_b.rows() || logits_a.cols() != logits_b.cols() {
        return Err(Error::DimensionMismatch(
            "probability_disparity: logit shapes differ".into(),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::RejectedInput(format!(
            "probability_disparity: threshold {threshold} outside (0, 1)"
        )));
    }
    let mut diffs = Vec::with_capacity(logits_a.rows());
    let mut histogram = [0usize; 10];
    for t in 0..logits_a.rows() {
        let pa = softmax_row(logits_a.row(t));
        let pb = softmax_row(logits_b.row(t));
        let mut realized = 0;
        for (j, p) in pa.iter().enumerate() {
            if *p > pa[realized] {
                realized = j;
            }
        }
        let d = (pa[realized] - pb[realized]).abs();
        histogram[((d * 10.0) as usize).min(9)] += 1;
        diffs.push(d);
    }
    let max_diff = diffs.iter().copied().fold(0.0, f64::max);
    let exceed = diffs.iter().filter(|d| **d > threshold).count();
    Ok(DisparityStats {
        frac_exceed: exceed as f64 / diffs.len().max(1) as f64,
        max_diff,
        diffs,
        threshold,
        histogram,
    })
}

/// Run both paths on the same inputs and diff every recorded activation
/// plus the output distributions.
pub fn run_paths_and_diff(
    x: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
    path_a: &PathSpec,
    path_b: &PathSpec,
    threshold: f64,
) -> Result<AlignmentReport> {
    let (hidden_a, trace_a) = run_path(x, cfg, params, path_a)?;
    let (hidden_b, trace_b) = run_path(x, cfg, params, path_b)?;
    let mut module_diffs = Vec::new();
    for ((layer, tag), m_a) in trace_a.iter() {
        let m_b = trace_b.get(*layer, *tag).ok_or_else(|| {
            Error::RejectedInput(format!(
                "trace entry ({layer}, {}) missing in path b",
                tag.name()
            ))
        })?;
        module_diffs.push((*layer, *tag, DiffStat::between(m_a, m_b)));
    }
    let logits_a = lm_logits(&hidden_a, params)?;
    let logits_b = lm_logits(&hidden_b, params)?;
    Ok(AlignmentReport {
        path_a: path_a.describe(),
        path_b: path_b.describe(),
        module_diffs,
        logit_diff: DiffStat::between(&logits_a, &logits_b),
        disparity: probability_disparity(&logits_a, &logits_b, threshold)?,
    })
}

/// The standard sweep: exact prefill against decode at each precision stage.
pub fn precision_sweep(
    x: &Matrix,
    cfg: &ModelConfig,
    params: &ModelParams,
    threshold: f64,
) -> Result<Vec<AlignmentReport>> {
    let baseline = PathSpec::exact(Execution::Prefill);
    let stages = [
        PathSpec::exact(Execution::Decode),
        PathSpec {
            execution: Execution::Decode,
            activations: PrecisionMode::Exact64,
            state: PrecisionMode::Bf16Emulated,
        },
        PathSpec {
            execution: Execution::Decode,
            activations: PrecisionMode::Bf16Emulated,
            state: PrecisionMode::Exact64,
        },
        PathSpec {
            execution: Execution::Decode,
            activations: PrecisionMode::Exact64,
            state: PrecisionMode::fp8_default(),
        },
    ];
    stages
        .iter()
        .map(|stage| run_paths_and_diff(x, cfg, params, &baseline, stage, threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid_model::random_embeddings;

    fn micro() -> (ModelConfig, ModelParams, Matrix) {
        let mut cfg = ModelConfig::desk_default();
        cfg.d_model = 16;
        cfg.moe.d_model = 16;
        cfg.gqa.n_heads = 2;
        cfg.gqa.n_kv_heads = 2;
        cfg.gqa.d_head = 8;
        cfg.decay = crate::linear_attention::make_decay_schedule(
            2,
            crate::linear_attention::ScheduleKind::PowerLaw,
        )
        .unwrap();
        cfg.moe.d_expert_hidden = 8;
        cfg.n_layers = 4;
        cfg.layer_group_size = 2;
        cfg.norm_groups = 2;
        cfg.vocab = 8;
        cfg.chunk = 3;
        let params = ModelParams::init(&cfg).unwrap();
        let x = random_embeddings(6, cfg.d_model, 21);
        (cfg, params, x)
    }

    #[test]
    fn exact_paths_agree_everywhere() {
        let (cfg, params, x) = micro();
        let report = run_paths_and_diff(
            &x,
            &cfg,
            &params,
            &PathSpec::exact(Execution::Prefill),
            &PathSpec::exact(Execution::Decode),
            0.8,
        )
        .unwrap();
        assert!(report.worst_module_diff() < 1e-10, "{}", report.to_csv());
        assert!(report.logit_diff.max_abs < 1e-10);
        assert_eq!(report.disparity.frac_exceed, 0.0);
        assert!(report.disparity.max_diff < 1e-10);
    }

    #[test]
    fn bf16_state_shows_up_in_attn_core_first() {
        let (cfg, params, x) = micro();
        let report = run_paths_and_diff(
            &x,
            &cfg,
            &params,
            &PathSpec::exact(Execution::Decode),
            &PathSpec {
                execution: Execution::Decode,
                activations: PrecisionMode::Exact64,
                state: PrecisionMode::Bf16Emulated,
            },
            0.8,
        )
        .unwrap();
        // layer 0 is linear; its pre-attention taps are untouched by state
        // rounding, the attention core and everything after are not
        let qk = report
            .module_diffs
            .iter()
            .find(|(l, t, _)| *l == 0 && *t == ModuleTag::QkNorm)
            .unwrap();
        assert_eq!(qk.2.max_abs, 0.0);
        let core = report
            .module_diffs
            .iter()
            .find(|(l, t, _)| *l == 0 && *t == ModuleTag::AttnCore)
            .unwrap();
        assert!(core.2.max_abs > 0.0);
    }

    #[test]
    fn disparity_identical_logits_is_zero() {
        let logits = Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.1);
        let d = probability_disparity(&logits, &logits, 0.8).unwrap();
        assert_eq!(d.frac_exceed, 0.0);
        assert_eq!(d.max_diff, 0.0);
        assert_eq!(d.histogram[0], 3);
    }

    #[test]
    fn disparity_flags_mass_moved_off_realized_token() {
        // path a puts ~1 on token 0; path b puts ~0 there: the extreme case
        // of a training/inference probability flip
        let a = Matrix::from_vec(1, 2, vec![10.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.0, 10.0]).unwrap();
        let d = probability_disparity(&a, &b, 0.8).unwrap();
        assert_eq!(d.frac_exceed, 1.0);
        assert!(d.max_diff > 0.99);
        assert_eq!(d.histogram[9], 1);
    }

    #[test]
    fn disparity_small_perturbation_never_exceeds() {
        // logit noise of 1e-3 cannot move 0.8 of probability mass
        let a = Matrix::from_fn(8, 16, |i, j| ((i * 16 + j) % 7) as f64 * 0.3);
        let b = a.map(|x| x + 1e-3 * (x * 37.0).sin());
        let d = probability_disparity(&a, &b, 0.8).unwrap();
        assert_eq!(d.frac_exceed, 0.0);
        assert!(d.max_diff < 1e-3);
    }

    #[test]
    fn disparity_rejects_bad_threshold_and_shape() {
        let a = Matrix::zeros(1, 2);
        assert!(probability_disparity(&a, &a, 1.5).is_err());
        assert!(probability_disparity(&a, &a, 0.0).is_err());
        let b = Matrix::zeros(1, 3);
        assert!(probability_disparity(&a, &b, 0.8).is_err());
    }

    #[test]
    fn csv_has_header_and_is_deterministic() {
        let (cfg, params, x) = micro();
        let mk = || {
            run_paths_and_diff(
                &x,
                &cfg,
                &params,
                &PathSpec::exact(Execution::Prefill),
                &PathSpec::exact(Execution::Decode),
                0.8,
            )
            .unwrap()
            .to_csv()
        };
        let a = mk();
        assert_eq!(a, mk());
        assert!(a.starts_with("layer,module,max_abs_diff,mean_abs_diff\n"));
    }

    #[test]
    fn sweep_stage_order_is_monotone_in_principle() {
        let (cfg, params, x) = micro();
        let reports = precision_sweep(&x, &cfg, &params, 0.8).unwrap();
        assert_eq!(reports.len(), 4);
        // stage 0 (both exact) must be the tightest
        assert!(reports[0].logit_diff.max_abs <= reports[1].logit_diff.max_abs);
    }
}
