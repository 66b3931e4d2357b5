//! Dense f64 matrices plus reduced-precision emulation.
//!
//! All compute in this crate happens in 64-bit floats. BF16 and FP8 are
//! *emulated* by rounding f64 values onto the target format's grid at
//! explicit injection points (state accumulation, GEMM inputs). This keeps
//! every code path deterministic and lets tests pin exact expected values.
//!
//! Summation order is fixed (ascending inner index) everywhere, so repeated
//! runs produce bit-identical results regardless of thread count.

use crate::error::{Error, Result};

/// Dense 2-D matrix of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Stack the rows of `other` below `self`.
    pub fn append_rows(&mut self, other: &Matrix) {
        assert_eq!(other.cols, self.cols, "append_rows width mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Max elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        sum / self.data.len() as f64
    }

    /// Column slice [c0, c1) as a new matrix.
    pub fn columns(&self, c0: usize, c1: usize) -> Matrix {
        assert!(c0 <= c1 && c1 <= self.cols);
        Matrix::from_fn(self.rows, c1 - c0, |i, j| self.get(i, c0 + j))
    }

    /// Row slice [r0, r1) as a new matrix.
    pub fn row_range(&self, r0: usize, r1: usize) -> Matrix {
        assert!(r0 <= r1 && r1 <= self.rows);
        Matrix {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Write `src` into columns [c0, c0+src.cols).
    pub fn set_columns(&mut self, c0: usize, src: &Matrix) {
        assert_eq!(src.rows, self.rows);
        assert!(c0 + src.cols <= self.cols);
        for i in 0..self.rows {
            for j in 0..src.cols {
                self.set(i, c0 + j, src.get(i, j));
            }
        }
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Standard matrix product with a fixed ascending-index inner summation,
/// so results are bit-reproducible across runs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Which reduced-precision grid (if any) to round onto at injection points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    /// No rounding; plain f64.
    Exact64,
    /// Round onto the bfloat16 grid (8 exponent / 7 mantissa bits).
    Bf16Emulated,
    /// Blockwise e4m3 quantize-dequantize round trip.
    Fp8BlockwiseEmulated {
        block_rows: usize,
        block_cols: usize,
    },
}

impl PrecisionMode {
    /// Compact name safe for CSV fields and log lines.
    pub fn label(&self) -> String {
        match self {
            PrecisionMode::Exact64 => "exact64".into(),
            PrecisionMode::Bf16Emulated => "bf16".into(),
            PrecisionMode::Fp8BlockwiseEmulated {
                block_rows,
                block_cols,
            } => format!("fp8_{block_rows}x{block_cols}"),
        }
    }

    /// Default FP8 block geometry (the conventional blockwise granularity).
    pub fn fp8_default() -> Self {
        PrecisionMode::Fp8BlockwiseEmulated {
            block_rows: 128,
            block_cols: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PrecisionMode::Fp8BlockwiseEmulated {
            block_rows,
            block_cols,
        } = self
        {
            if *block_rows == 0 || *block_cols == 0 {
                return Err(Error::InvalidConfig(
                    "fp8 block dimensions must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Round a matrix onto this mode's representable grid.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            PrecisionMode::Exact64 => Ok(x.clone()),
            PrecisionMode::Bf16Emulated => Ok(round_bf16(x)),
            PrecisionMode::Fp8BlockwiseEmulated {
                block_rows,
                block_cols,
            } => {
                let q = quantize_fp8_blockwise(x, *block_rows, *block_cols)?;
                Ok(dequantize(&q))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// bfloat16 emulation
// ---------------------------------------------------------------------------

/// Round one f64 value to the nearest bfloat16-representable value,
/// ties-to-even. Overflow saturates to infinity; bf16 subnormals are honored.
pub fn round_bf16_scalar(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let a = x.abs();
    // bf16 min normal is 2^-126; below it the grid is multiples of 2^-133.
    if a < f64::from_bits(0x3810_0000_0000_0000) {
        let q = f64::from_bits(0x37A0_0000_0000_0000); // 2^-133
        return (x / q).round_ties_even() * q;
    }
    // Normal range: round the 52-bit mantissa to 7 bits. Adding
    // (half - 1 + lsb) and masking implements round-to-nearest-even with
    // carry propagating into the exponent.
    let bits = x.to_bits();
    let lsb = (bits >> 45) & 1;
    let rounded = (bits + ((1u64 << 44) - 1) + lsb) & !((1u64 << 45) - 1);
    let r = f64::from_bits(rounded);
    // bf16 max finite is (2 - 2^-7) * 2^127.
    const BF16_MAX: f64 = 3.3895313892515355e38;
    if r.abs() > BF16_MAX {
        return if x > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
    }
    r
}

/// Elementwise bf16 rounding; idempotent and monotone.
pub fn round_bf16(x: &Matrix) -> Matrix {
    x.map(round_bf16_scalar)
}

// ---------------------------------------------------------------------------
// FP8 (e4m3) blockwise emulation
// ---------------------------------------------------------------------------

/// Largest finite e4m3 magnitude.
pub const E4M3_MAX: f64 = 448.0;

/// Decode an e4m3 code (1 sign / 4 exponent / 3 mantissa bits, bias 7,
/// no infinities) to f64. Code 0x7F/0xFF would be NaN; the encoder never
/// produces it.
pub fn e4m3_decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0xF) as i32;
    let man = (code & 0x7) as f64;
    if exp == 15 && man == 7.0 {
        return f64::NAN;
    }
    if exp == 0 {
        // subnormal: man * 2^-3 * 2^-6
        sign * man * (2.0f64).powi(-9)
    } else {
        sign * (1.0 + man / 8.0) * (2.0f64).powi(exp - 7)
    }
}

/// Encode an f64 to the nearest e4m3 code, ties-to-even, saturating at ±448.
pub fn e4m3_encode(x: f64) -> u8 {
    let sign_bit = if x.is_sign_negative() { 0x80u8 } else { 0 };
    let a = x.abs();
    if a == 0.0 {
        return sign_bit;
    }
    // Values at or above the midpoint toward the (nonexistent) next binade
    // saturate to the max finite value.
    if a >= E4M3_MAX {
        return sign_bit | 0x7E; // exp 15, man 6 => 448
    }
    let min_normal = (2.0f64).powi(-6);
    if a < min_normal {
        // subnormal grid: multiples of 2^-9
        let n = (a * 512.0).round_ties_even() as u8;
        if n >= 8 {
            return sign_bit | 0x08; // rounded up into min normal
        }
        return sign_bit | n;
    }
    // Normal: round the f64 mantissa to 3 bits with carry into the exponent.
    let bits = a.to_bits();
    let lsb = (bits >> 49) & 1;
    let rounded = (bits + ((1u64 << 48) - 1) + lsb) & !((1u64 << 49) - 1);
    let r = f64::from_bits(rounded);
    if r > E4M3_MAX {
        return sign_bit | 0x7E;
    }
    let exp = ((rounded >> 52) & 0x7FF) as i32 - 1023; // in [-6, 8]
    let man = ((rounded >> 49) & 0x7) as u8;
    sign_bit | (((exp + 7) as u8) << 3) | man
}

/// A blockwise-quantized matrix: one e4m3 code per element plus one f64
/// absolute-max scale per block. Ragged edge blocks are scaled independently.
#[derive(Debug, Clone)]
pub struct QuantizedBlockMatrix {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    /// e4m3 code per element, row-major.
    pub codes: Vec<u8>,
    /// One scale per block, blocks in row-major grid order; always > 0.
    pub scales: Vec<f64>,
}

impl QuantizedBlockMatrix {
    fn block_grid(&self) -> (usize, usize) {
        (
            self.rows.div_ceil(self.block_rows),
            self.cols.div_ceil(self.block_cols),
        )
    }
}

/// Quantize with per-block absolute-max scaling: scale = max|x| / 448 within
/// each block (1 for an all-zero block), codes = nearest-even e4m3 of x/scale.
pub fn quantize_fp8_blockwise(
    x: &Matrix,
    block_rows: usize,
    block_cols: usize,
) -> Result<QuantizedBlockMatrix> {
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::RejectedInput("fp8 block dims must be >= 1".into()));
    }
    if !x.is_finite() {
        return Err(Error::RejectedInput(
            "quantize_fp8_blockwise: non-finite input".into(),
        ));
    }
    let grid_r = x.rows().div_ceil(block_rows);
    let grid_c = x.cols().div_ceil(block_cols);
    let mut scales = vec![1.0; grid_r * grid_c];
    for br in 0..grid_r {
        for bc in 0..grid_c {
            let mut amax = 0.0f64;
            for i in (br * block_rows)..((br + 1) * block_rows).min(x.rows()) {
                for j in (bc * block_cols)..((bc + 1) * block_cols).min(x.cols()) {
                    amax = amax.max(x.get(i, j).abs());
                }
            }
            if amax > 0.0 {
                scales[br * grid_c + bc] = amax / E4M3_MAX;
            }
        }
    }
    let mut codes = vec![0u8; x.rows() * x.cols()];
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let scale = scales[(i / block_rows) * grid_c + (j / block_cols)];
            codes[i * x.cols() + j] = e4m3_encode(x.get(i, j) / scale);
        }
    }
    Ok(QuantizedBlockMatrix {
        rows: x.rows(),
        cols: x.cols(),
        block_rows,
        block_cols,
        codes,
        scales,
    })
}

/// Reconstruct each element as code value times its block scale.
pub fn dequantize(q: &QuantizedBlockMatrix) -> Matrix {
    let (_, grid_c) = q.block_grid();
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        let scale = q.scales[(i / q.block_rows) * grid_c + (j / q.block_cols)];
        e4m3_decode(q.codes[i * q.cols + j]) * scale
    })
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function of a matrix:
/// (f(x + h e_ij) - f(x - h e_ij)) / 2h per element.
pub fn finite_diff_grad(
    f: impl Fn(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if h <= 0.0 {
        return Err(Error::RejectedInput("finite_diff_grad: h must be > 0".into()));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = x.get(i, j);
            probe.set(i, j, orig + h);
            let fp = f(&probe);
            probe.set(i, j, orig - h);
            let fm = f(&probe);
            probe.set(i, j, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite_diff_grad: f non-finite at ({i},{j})"
                )));
            }
            grad.set(i, j, (fp - fm) / (2.0 * h));
        }
    }
    Ok(grad)
}
