//! Clipped policy-gradient surrogate objectives.
//!
//! Two estimators for the same batch differ only in the log-probability used
//! in the importance ratio denominator: the rollout-time value (what the
//! inference engine scored during generation) or a recomputation under the
//! training stack. When inference and training are numerically aligned the
//! two are identical; any gap between them measures the objective-level
//! damage of a train/infer disparity, including ratios flipping in and out
//! of the clip region.

use crate::error::{Error, Result};

/// One token's log-probabilities and advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlToken {
    pub token_id: u64,
    /// Log-prob recorded by the inference engine at rollout time.
    pub lp_rollout: f64,
    /// Log-prob of the same token recomputed by the training stack, before
    /// any update.
    pub lp_train_old: f64,
    /// Log-prob under the current training policy.
    pub lp_train_new: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct RlBatch {
    pub tokens: Vec<RlToken>,
    pub clip_epsilon: f64,
}

impl RlBatch {
    pub fn new(tokens: Vec<RlToken>, clip_epsilon: f64) -> Result<Self> {
        if !(clip_epsilon > 0.0 && clip_epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_epsilon {clip_epsilon} outside (0, 1)"
            )));
        }
        if tokens.is_empty() {
            return Err(Error::RejectedInput("empty rl batch".into()));
        }
        for (i, t) in tokens.iter().enumerate() {
            for (name, lp) in [
                ("lp_rollout", t.lp_rollout),
                ("lp_train_old", t.lp_train_old),
                ("lp_train_new", t.lp_train_new),
            ] {
                if lp > 0.0 || lp.is_nan() {
                    return Err(Error::RejectedInput(format!(
                        "token {i}: {name} = {lp} is not a log-probability"
                    )));
                }
            }
            if !t.advantage.is_finite() {
                return Err(Error::RejectedInput(format!(
                    "token {i}: non-finite advantage"
                )));
            }
        }
        Ok(RlBatch {
            tokens,
            clip_epsilon,
        })
    }
}

/// Result of evaluating one surrogate over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    /// Per-token clipped surrogate values, in batch order. Skipped tokens
    /// hold NaN placeholders so indices stay aligned with the batch.
    pub surrogates: Vec<f64>,
    /// Whether the clip branch was the active (smaller) one per token.
    pub clip_active: Vec<bool>,
    /// Token-mean over the non-skipped surrogates.
    pub mean: f64,
    /// Count of tokens excluded because the importance ratio was non-finite.
    pub skipped: usize,
}

fn clipped_objective(batch: &RlBatch, denom: impl Fn(&RlToken) -> f64) -> EstimatorOutput {
    let eps = batch.clip_epsilon;
    let mut surrogates = Vec::with_capacity(batch.tokens.len());
    let mut clip_active = Vec::with_capacity(batch.tokens.len());
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for t in &batch.tokens {
        let ratio = (t.lp_train_new - denom(t)).exp();
        if !ratio.is_finite() {
            surrogates.push(f64::NAN);
            clip_active.push(false);
            skipped += 1;
            continue;
        }
        let unclipped = ratio * t.advantage;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * t.advantage;
        let value = unclipped.min(clipped);
        surrogates.push(value);
        clip_active.push(clipped < unclipped);
        sum += value;
        counted += 1;
    }
    EstimatorOutput {
        surrogates,
        clip_active,
        mean: if counted > 0 {
            sum / counted as f64
        } else {
            f64::NAN
        },
        skipped,
    }
}

/// Importance ratio against the rollout-time log-probs:
/// r = exp(lp_train_new - lp_rollout).
pub fn ppo_rollout_objective(batch: &RlBatch) -> EstimatorOutput {
    clipped_objective(batch, |t| t.lp_rollout)
}

/// Importance ratio against the recomputed pre-update training log-probs:
/// r = exp(lp_train_new - lp_train_old).
pub fn ppo_recompute_objective(batch: &RlBatch) -> EstimatorOutput {
    clipped_objective(batch, |t| t.lp_train_old)
}

/// Per-token and aggregate gap between the two estimators.
#[derive(Debug, Clone)]
pub struct EstimatorGap {
    /// |surrogate_rollout - surrogate_recompute| per token (NaN where
    /// either side skipped).
    pub per_token: Vec<f64>,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Fraction of tokens where clip activity disagrees between estimators.
    pub clip_flip_fraction: f64,
    pub mean_gap: f64,
}

pub fn estimator_gap(batch: &RlBatch) -> Result<EstimatorGap> {
    let a = ppo_rollout_objective(batch);
    let b = ppo_recompute_objective(batch);
    let mut per_token = Vec::with_capacity(batch.tokens.len());
    let mut max_abs = 0.0f64;
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut flips = 0usize;
    for i in 0..batch.tokens.len() {
        let d = (a.surrogates[i] - b.surrogates[i]).abs();
        per_token.push(d);
        if d.is_finite() {
            max_abs = max_abs.max(d);
            sum += d;
            counted += 1;
        }
        if a.clip_active[i] != b.clip_active[i] {
            flips += 1;
        }
    }
    if counted == 0 {
        return Err(Error::RejectedInput(
            "estimator_gap: no finite tokens".into(),
        ));
    }
    Ok(EstimatorGap {
        per_token,
        max_abs,
        mean_abs: sum / counted as f64,
        clip_flip_fraction: flips as f64 / batch.tokens.len() as f64,
        mean_gap: a.mean - b.mean,
    })
}

/// Fraction of tokens whose absolute train/infer probability difference
/// |exp(lp_train_old) - exp(lp_rollout)| exceeds the threshold. This is the
/// batch-level alarm for a train/infer numerical disparity.
pub fn disparity_fraction(batch: &RlBatch, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::RejectedInput(format!(
            "disparity_fraction: threshold {threshold} outside (0, 1)"
        )));
    }
    let exceed = batch
        .tokens
        .iter()
        .filter(|t| (t.lp_train_old.exp() - t.lp_rollout.exp()).abs() > threshold)
        .count();
    Ok(exceed as f64 / batch.tokens.len() as f64)
}

/// Parse a batch from CSV with header
/// `token_id,lp_rollout,lp_train_old,lp_train_new,advantage`.
/// Errors carry 1-based line numbers.
pub fn parse_batch_csv(text: &str, clip_epsilon: f64) -> Result<RlBatch> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty input".into(),
        })?;
    if header.trim() != "token_id,lp_rollout,lp_train_old,lp_train_new,advantage" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut tokens = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let token_id = fields[0].parse::<u64>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("token_id: {e}"),
        })?;
        let mut nums = [0.0f64; 4];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("{field:?}: {e}"),
            })?;
        }
        tokens.push(RlToken {
            token_id,
            lp_rollout: nums[0],
            lp_train_old: nums[1],
            lp_train_new: nums[2],
            advantage: nums[3],
        });
    }
    RlBatch::new(tokens, clip_epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(lp_r: f64, lp_old: f64, lp_new: f64, adv: f64) -> RlToken {
        RlToken {
            token_id: 0,
            lp_rollout: lp_r,
            lp_train_old: lp_old,
            lp_train_new: lp_new,
            advantage: adv,
        }
    }

    #[test]
    fn identical_logprobs_give_identical_estimators() {
        let tokens = vec![
            tok(-1.0, -1.0, -0.5, 2.0),
            tok(-2.5, -2.5, -3.0, -1.0),
            tok(-0.1, -0.1, -0.1, 0.5),
        ];
        let batch = RlBatch::new(tokens, 0.2).unwrap();
        let a = ppo_rollout_objective(&batch);
        let b = ppo_recompute_objective(&batch);
        assert_eq!(a, b);
        let gap = estimator_gap(&batch).unwrap();
        assert_eq!(gap.max_abs, 0.0);
        assert_eq!(gap.clip_flip_fraction, 0.0);
        assert_eq!(gap.mean_gap, 0.0);
    }

    #[test]
    fn ratio_one_positive_advantage_is_unclipped() {
        let batch = RlBatch::new(vec![tok(-1.0, -1.0, -1.0, 3.0)], 0.2).unwrap();
        let out = ppo_rollout_objective(&batch);
        assert!((out.surrogates[0] - 3.0).abs() < 1e-15);
        assert!(!out.clip_active[0]);
    }

    #[test]
    fn positive_advantage_large_ratio_clips_high() {
        // ratio = e^1 ~ 2.718, clip at 1.2 with eps 0.2
        let batch = RlBatch::new(vec![tok(-2.0, -2.0, -1.0, 1.0)], 0.2).unwrap();
        let out = ppo_rollout_objective(&batch);
        assert!((out.surrogates[0] - 1.2).abs() < 1e-15);
        assert!(out.clip_active[0]);
    }

    #[test]
    fn negative_advantage_small_ratio_clips_low() {
        // ratio = e^-1 ~ 0.368 < 0.8; with adv < 0 the clipped branch
        // (0.8 * adv) is smaller, so it is the active one
        let batch = RlBatch::new(vec![tok(-1.0, -1.0, -2.0, -1.0)], 0.2).unwrap();
        let out = ppo_rollout_objective(&batch);
        assert!((out.surrogates[0] - (-0.8)).abs() < 1e-15);
        assert!(out.clip_active[0]);
    }

    #[test]
    fn estimators_use_their_own_denominator() {
        // rollout and recompute denominators differ by 0.5 nats
        let batch = RlBatch::new(vec![tok(-1.5, -1.0, -1.0, 1.0)], 0.5).unwrap();
        let a = ppo_rollout_objective(&batch);
        let b = ppo_recompute_objective(&batch);
        assert!((a.surrogates[0] - 0.5f64.exp().min(1.5)).abs() < 1e-15);
        assert!((b.surrogates[0] - 1.0).abs() < 1e-15);
        let gap = estimator_gap(&batch).unwrap();
        assert!(gap.max_abs > 0.0);
    }

    #[test]
    fn clip_flip_is_detected() {
        // ratio vs rollout = e^0.5 ~ 1.65 (clips at eps 0.2);
        // ratio vs recompute = 1.0 (does not clip)
        let batch = RlBatch::new(vec![tok(-1.5, -1.0, -1.0, 1.0)], 0.2).unwrap();
        let gap = estimator_gap(&batch).unwrap();
        assert_eq!(gap.clip_flip_fraction, 1.0);
    }

    #[test]
    fn nonfinite_ratio_is_skipped_and_counted() {
        // lp_new - lp_rollout = 1000 overflows exp to inf
        let tokens = vec![tok(-1001.0, -1.0, -1.0, 1.0), tok(-1.0, -1.0, -1.0, 2.0)];
        let batch = RlBatch::new(tokens, 0.2).unwrap();
        let out = ppo_rollout_objective(&batch);
        assert_eq!(out.skipped, 1);
        assert!(out.surrogates[0].is_nan());
        assert!((out.mean - 2.0).abs() < 1e-15);
    }

    #[test]
    fn batch_validation_rejects_bad_inputs() {
        assert!(RlBatch::new(vec![tok(-1.0, -1.0, -1.0, 1.0)], 0.0).is_err());
        assert!(RlBatch::new(vec![tok(-1.0, -1.0, -1.0, 1.0)], 1.0).is_err());
        assert!(RlBatch::new(vec![], 0.2).is_err());
        assert!(RlBatch::new(vec![tok(0.5, -1.0, -1.0, 1.0)], 0.2).is_err());
        assert!(RlBatch::new(vec![tok(-1.0, -1.0, -1.0, f64::NAN)], 0.2).is_err());
    }

    #[test]
    fn csv_round_trip_and_line_numbers() {
        let text = "token_id,lp_rollout,lp_train_old,lp_train_new,advantage\n\
                    7,-1.5,-1.0,-0.9,2.0\n\
                    8,-0.3,-0.3,-0.4,-1.0\n";
        let batch = parse_batch_csv(text, 0.2).unwrap();
        assert_eq!(batch.tokens.len(), 2);
        assert_eq!(batch.tokens[0].token_id, 7);
        assert_eq!(batch.tokens[1].advantage, -1.0);

        let bad = "token_id,lp_rollout,lp_train_old,lp_train_new,advantage\n\
                   7,-1.5,-1.0,-0.9,2.0\n\
                   8,oops,-0.3,-0.4,-1.0\n";
        match parse_batch_csv(bad, 0.2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_batch_csv("wrong,header\n", 0.2).is_err());
    }
}
