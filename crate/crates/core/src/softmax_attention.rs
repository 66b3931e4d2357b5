//! Grouped-query softmax attention with QK-Norm and partial RoPE.
//!
//! This is the softmax layer inside each hybrid layer group and the
//! counterpart the alignment harness diffs against. Softmax always uses
//! max-subtraction; there is deliberately a single implementation shared by
//! the prefill and decode paths so the two cannot drift apart.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Shape and numerics of one grouped-query attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GqaConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    /// Fraction of head dims that get rotary embedding; default 0.5.
    pub rope_fraction: f64,
    pub rope_base: f64,
    pub qk_norm_eps: f64,
}

impl GqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.d_head == 0 {
            return Err(Error::InvalidConfig("gqa: counts must be >= 1".into()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "gqa: n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !(self.rope_fraction > 0.0 && self.rope_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gqa: rope_fraction {} outside (0, 1]",
                self.rope_fraction
            )));
        }
        let d_rot = self.rope_dims();
        let exact = (self.rope_fraction * self.d_head as f64 - d_rot as f64).abs() < 1e-12;
        if !exact || d_rot % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "gqa: rope_fraction * d_head must be an even integer, got {}",
                self.rope_fraction * self.d_head as f64
            )));
        }
        if self.qk_norm_eps <= 0.0 {
            return Err(Error::InvalidConfig("gqa: qk_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Number of rotated dimensions per head.
    pub fn rope_dims(&self) -> usize {
        (self.rope_fraction * self.d_head as f64).round() as usize
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Rotate the first `rope_fraction * d_head` dims of each row pairwise with
/// angles `pos * base^(-2i/d_rot)`; remaining dims pass through untouched.
pub fn apply_partial_rope(x: &Matrix, positions: &[usize], cfg: &GqaConfig) -> Result<Matrix> {
    cfg.validate()?;
    if positions.len() != x.rows() {
        return Err(Error::RejectedInput(format!(
            "rope: {} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    if x.cols() != cfg.d_head {
        return Err(Error::DimensionMismatch(format!(
            "rope: row width {} != d_head {}",
            x.cols(),
            cfg.d_head
        )));
    }
    let d_rot = cfg.rope_dims();
    let mut out = x.clone();
    for (i, &pos) in positions.iter().enumerate() {
        for pair in 0..d_rot / 2 {
            let theta = pos as f64 * cfg.rope_base.powf(-(2.0 * pair as f64) / d_rot as f64);
            let (sin, cos) = theta.sin_cos();
            let a = x.get(i, 2 * pair);
            let b = x.get(i, 2 * pair + 1);
            out.set(i, 2 * pair, a * cos - b * sin);
            out.set(i, 2 * pair + 1, a * sin + b * cos);
        }
    }
    Ok(out)
}

/// Per-row RMS normalization: x / sqrt(mean(x^2) + eps). Gain is fixed to 1.
pub fn qk_norm(x: &Matrix, eps: f64) -> Matrix {
    assert!(eps > 0.0, "qk_norm eps must be > 0");
    let mut out = x.clone();
    for i in 0..x.rows() {
        let mut ss = 0.0;
        for j in 0..x.cols() {
            ss += x.get(i, j) * x.get(i, j);
        }
        let inv = 1.0 / (ss / x.cols() as f64 + eps).sqrt();
        for j in 0..x.cols() {
            out.set(i, j, x.get(i, j) * inv);
        }
    }
    out
}

/// Numerically stable softmax over a slice (max-subtraction, fixed order).
pub fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Per-stream KV cache for one GQA block: post-norm/RoPE keys and raw values,
/// one row per absorbed token, laid out as n_kv_heads * d_head columns.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub k: Matrix,
    pub v: Matrix,
}

impl KvCache {
    pub fn empty(n_kv_heads: usize, d_head: usize) -> Self {
        KvCache {
            k: Matrix::zeros(0, n_kv_heads * d_head),
            v: Matrix::zeros(0, n_kv_heads * d_head),
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }

    /// Live payload bytes; grows linearly: 2 * n_kv_heads * d_head * 8 per token.
    pub fn byte_size(&self) -> usize {
        (self.k.data().len() + self.v.data().len()) * std::mem::size_of::<f64>()
    }
}

fn check_proj_shapes(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &GqaConfig) -> Result<()> {
    if q.cols() != cfg.n_heads * cfg.d_head {
        return Err(Error::DimensionMismatch(format!(
            "gqa: q width {} != n_heads*d_head {}",
            q.cols(),
            cfg.n_heads * cfg.d_head
        )));
    }
    if k.cols() != cfg.n_kv_heads * cfg.d_head || v.cols() != cfg.n_kv_heads * cfg.d_head {
        return Err(Error::DimensionMismatch(format!(
            "gqa: k/v width {}/{} != n_kv_heads*d_head {}",
            k.cols(),
            v.cols(),
            cfg.n_kv_heads * cfg.d_head
        )));
    }
    if q.rows() != k.rows() || q.rows() != v.rows() {
        return Err(Error::DimensionMismatch("gqa: row count mismatch".into()));
    }
    Ok(())
}

/// Preprocess one kv-head slice of q or k: QK-Norm then partial RoPE.
/// Norm first, RoPE second (the rotation sees unit-RMS vectors).
pub fn preprocess_qk(x_head: &Matrix, positions: &[usize], cfg: &GqaConfig) -> Result<Matrix> {
    let normed = qk_norm(x_head, cfg.qk_norm_eps);
    apply_partial_rope(&normed, positions, cfg)
}

/// Causal GQA over a whole sequence starting at position `pos0`; returns
/// outputs (n x n_heads*d_head) and the cache ready for decode.
pub fn gqa_prefill(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    pos0: usize,
    cfg: &GqaConfig,
) -> Result<(Matrix, KvCache)> {
    cfg.validate()?;
    check_proj_shapes(q, k, v, cfg)?;
    let mut cache = KvCache::empty(cfg.n_kv_heads, cfg.d_head);
    let mut out = Matrix::zeros(q.rows(), cfg.n_heads * cfg.d_head);
    for t in 0..q.rows() {
        let o = gqa_decode(q.row(t), k.row(t), v.row(t), pos0 + t, &mut cache, cfg)?;
        for j in 0..o.len() {
            out.set(t, j, o[j]);
        }
    }
    Ok((out, cache))
}

/// One decode step: absorb a single token's k/v into the cache and attend
/// over the full prefix. Prefill is literally a loop over this function, so
/// prefill/decode equivalence holds bit-for-bit by construction.
pub fn gqa_decode(
    q_row: &[f64],
    k_row: &[f64],
    v_row: &[f64],
    pos: usize,
    cache: &mut KvCache,
    cfg: &GqaConfig,
) -> Result<Vec<f64>> {
    if q_row.len() != cfg.n_heads * cfg.d_head
        || k_row.len() != cfg.n_kv_heads * cfg.d_head
        || v_row.len() != cfg.n_kv_heads * cfg.d_head
    {
        return Err(Error::DimensionMismatch("gqa decode: row widths".into()));
    }
    if pos != cache.len() {
        return Err(Error::RejectedInput(format!(
            "gqa decode: position {} does not match cache length {}",
            pos,
            cache.len()
        )));
    }
    let d = cfg.d_head;
    let positions = [pos];
    // preprocess and append this token's k/v per kv head
    let mut k_proc = vec![0.0; k_row.len()];
    for h in 0..cfg.n_kv_heads {
        let seg = Matrix::from_vec(1, d, k_row[h * d..(h + 1) * d].to_vec())?;
        let p = preprocess_qk(&seg, &positions, cfg)?;
        k_proc[h * d..(h + 1) * d].copy_from_slice(p.row(0));
    }
    cache.k.push_row(&k_proc);
    cache.v.push_row(v_row);

    let scale = 1.0 / (d as f64).sqrt();
    let t_len = cache.len();
    let mut out = vec![0.0; cfg.n_heads * d];
    for h in 0..cfg.n_heads {
        let kv_h = h / cfg.group_size();
        let seg = Matrix::from_vec(1, d, q_row[h * d..(h + 1) * d].to_vec())?;
        let q_proc = preprocess_qk(&seg, &positions, cfg)?;
        let qh = q_proc.row(0);
        let mut scores = Vec::with_capacity(t_len);
        for s in 0..t_len {
            let mut dot = 0.0;
            for a in 0..d {
                dot += qh[a] * cache.k.get(s, kv_h * d + a);
            }
            scores.push(dot * scale);
        }
        let probs = softmax_row(&scores);
        for b in 0..d {
            let mut acc = 0.0;
            for s in 0..t_len {
                acc += probs[s] * cache.v.get(s, kv_h * d + b);
            }
            out[h * d + b] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GqaConfig {
        GqaConfig {
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            rope_fraction: 0.5,
            rope_base: 10_000.0,
            qk_norm_eps: 1e-6,
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let c = cfg();
        let x = rand_mat(&mut rng, 3, c.d_head);
        let y = apply_partial_rope(&x, &[0, 0, 0], &c).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_passes_through_unrotated_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = cfg();
        let x = rand_mat(&mut rng, 2, c.d_head);
        let y = apply_partial_rope(&x, &[5, 9], &c).unwrap();
        let d_rot = c.rope_dims();
        for i in 0..2 {
            for j in d_rot..c.d_head {
                assert_eq!(x.get(i, j), y.get(i, j));
            }
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let c = cfg();
        let x = rand_mat(&mut rng, 4, c.d_head);
        let y = apply_partial_rope(&x, &[1, 7, 100, 4096], &c).unwrap();
        for i in 0..4 {
            for pair in 0..c.rope_dims() / 2 {
                let nx = x.get(i, 2 * pair).hypot(x.get(i, 2 * pair + 1));
                let ny = y.get(i, 2 * pair).hypot(y.get(i, 2 * pair + 1));
                assert!((nx - ny).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_rejects_odd_rotation_width() {
        let mut c = cfg();
        c.rope_fraction = 0.375; // 3 of 8 dims
        let x = Matrix::zeros(1, c.d_head);
        assert!(apply_partial_rope(&x, &[0], &c).is_err());
    }

    #[test]
    fn qk_norm_ones_row() {
        let x = Matrix::from_vec(1, 4, vec![1.0; 4]).unwrap();
        let y = qk_norm(&x, 1e-12);
        for j in 0..4 {
            assert!((y.get(0, j) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn qk_norm_zero_row_stays_zero() {
        let x = Matrix::zeros(1, 4);
        let y = qk_norm(&x, 1e-6);
        assert_eq!(y, x);
    }

    #[test]
    fn qk_norm_output_rms_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_mat(&mut rng, 1, 16);
        let y = qk_norm(&x, 1e-12);
        let rms = (y.row(0).iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gqa_single_token_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let c = cfg();
        let q = rand_mat(&mut rng, 1, c.n_heads * c.d_head);
        let k = rand_mat(&mut rng, 1, c.n_kv_heads * c.d_head);
        let v = rand_mat(&mut rng, 1, c.n_kv_heads * c.d_head);
        let (o, _) = gqa_prefill(&q, &k, &v, 0, &c).unwrap();
        // softmax over one score is 1; each head outputs its kv head's v
        for h in 0..c.n_heads {
            let kv_h = h / c.group_size();
            for b in 0..c.d_head {
                assert_eq!(o.get(0, h * c.d_head + b), v.get(0, kv_h * c.d_head + b));
            }
        }
    }

    /// Naive full-MHA oracle (n_kv_heads == n_heads), written independently.
    fn naive_mha(q: &Matrix, k: &Matrix, v: &Matrix, c: &GqaConfig) -> Matrix {
        let n = q.rows();
        let d = c.d_head;
        let positions: Vec<usize> = (0..n).collect();
        let mut out = Matrix::zeros(n, c.n_heads * d);
        for h in 0..c.n_heads {
            let qh = preprocess_qk(&q.columns(h * d, (h + 1) * d), &positions, c).unwrap();
            let kh = preprocess_qk(&k.columns(h * d, (h + 1) * d), &positions, c).unwrap();
            let vh = v.columns(h * d, (h + 1) * d);
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..d).map(|a| qh.get(t, a) * kh.get(s, a)).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let probs = softmax_row(&scores);
                for b in 0..d {
                    let acc: f64 = (0..=t).map(|s| probs[s] * vh.get(s, b)).sum();
                    out.set(t, h * d + b, acc);
                }
            }
        }
        out
    }

    #[test]
    fn gqa_with_equal_heads_matches_naive_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let c = GqaConfig {
            n_heads: 3,
            n_kv_heads: 3,
            ..cfg()
        };
        let q = rand_mat(&mut rng, 6, c.n_heads * c.d_head);
        let k = rand_mat(&mut rng, 6, c.n_heads * c.d_head);
        let v = rand_mat(&mut rng, 6, c.n_heads * c.d_head);
        let (got, _) = gqa_prefill(&q, &k, &v, 0, &c).unwrap();
        let expect = naive_mha(&q, &k, &v, &c);
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gqa_prefill_equals_decode_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let c = cfg();
        let n = 16;
        let q = rand_mat(&mut rng, n, c.n_heads * c.d_head);
        let k = rand_mat(&mut rng, n, c.n_kv_heads * c.d_head);
        let v = rand_mat(&mut rng, n, c.n_kv_heads * c.d_head);
        let (pre, _) = gqa_prefill(&q, &k, &v, 0, &c).unwrap();
        let mut cache = KvCache::empty(c.n_kv_heads, c.d_head);
        for t in 0..n {
            let o = gqa_decode(q.row(t), k.row(t), v.row(t), t, &mut cache, &c).unwrap();
            for j in 0..o.len() {
                assert!((pre.get(t, j) - o[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gqa_causality_future_kv_never_affects_past() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let c = cfg();
        let n = 8;
        let q = rand_mat(&mut rng, n, c.n_heads * c.d_head);
        let k = rand_mat(&mut rng, n, c.n_kv_heads * c.d_head);
        let v = rand_mat(&mut rng, n, c.n_kv_heads * c.d_head);
        let (base, _) = gqa_prefill(&q, &k, &v, 0, &c).unwrap();
        // zero the last token's k/v; earlier rows must be bitwise identical
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..k.cols() {
            k2.set(n - 1, j, 0.0);
            v2.set(n - 1, j, 0.0);
        }
        let (alt, _) = gqa_prefill(&q, &k2, &v2, 0, &c).unwrap();
        for t in 0..n - 1 {
            assert_eq!(base.row(t), alt.row(t));
        }
    }

    #[test]
    fn gqa_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let scores: Vec<f64> = (0..17).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let probs = softmax_row(&scores);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kv_cache_growth_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let c = cfg();
        let mut cache = KvCache::empty(c.n_kv_heads, c.d_head);
        assert_eq!(cache.byte_size(), 0);
        let per_token = 2 * c.n_kv_heads * c.d_head * std::mem::size_of::<f64>();
        for t in 0..10 {
            let q = rand_mat(&mut rng, 1, c.n_heads * c.d_head);
            let k = rand_mat(&mut rng, 1, c.n_kv_heads * c.d_head);
            let v = rand_mat(&mut rng, 1, c.n_kv_heads * c.d_head);
            gqa_decode(q.row(0), k.row(0), v.row(0), t, &mut cache, &c).unwrap();
            assert_eq!(cache.byte_size(), (t + 1) * per_token);
        }
    }

    #[test]
    fn gqa_rejects_position_cache_mismatch() {
        let c = cfg();
        let mut cache = KvCache::empty(c.n_kv_heads, c.d_head);
        let q = vec![0.0; c.n_heads * c.d_head];
        let k = vec![0.0; c.n_kv_heads * c.d_head];
        let v = vec![0.0; c.n_kv_heads * c.d_head];
        assert!(gqa_decode(&q, &k, &v, 3, &mut cache, &c).is_err());
    }
}
