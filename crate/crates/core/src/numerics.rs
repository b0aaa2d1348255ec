//! Numerically stable scalar and tensor primitives shared by the recurrence,
//! oracle, gradient, and training code.
//!
//! Everything here is 64-bit: the verification tolerances downstream (1e-8
//! against enumeration, 1e-10 between the two smoothing recursions) leave no
//! headroom for single precision.

use crate::error::{Result, UbruError};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` after every
/// sigmoid and every probability-producing recursion step, so the divisions
/// by `p` and `1 - p` in the smoothing recursions are always safe.
pub const PROB_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Prob
// ---------------------------------------------------------------------------

/// A probability clamped into `[PROB_EPS, 1 - PROB_EPS]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prob(f64);

impl Prob {
    /// Validate and clamp a raw value. Values outside `[0, 1]` (or NaN) are a
    /// domain error; values inside are clamped away from the exact endpoints.
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(UbruError::Domain(format!(
                "probability {value} outside [0, 1]"
            )));
        }
        Ok(Self::clamped(value))
    }

    /// Clamp without validation. Used inside recursions where the value is a
    /// probability up to rounding error.
    #[inline]
    pub fn clamped(value: f64) -> Self {
        Prob(value.clamp(PROB_EPS, 1.0 - PROB_EPS))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 - p`.
    #[inline]
    pub fn complement(self) -> f64 {
        1.0 - self.0
    }
}

impl From<Prob> for f64 {
    fn from(p: Prob) -> f64 {
        p.0
    }
}

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

/// Stable sigmoid `1 / (1 + exp(-x))`, clamped into `[PROB_EPS, 1 - PROB_EPS]`.
///
/// A single `exp(-|x|)` keeps the intermediate in `(0, 1]`, so there is no
/// overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> Prob {
    let e = (-x.abs()).exp();
    let recip = 1.0 / (1.0 + e);
    let value = if x >= 0.0 { recip } else { e * recip };
    Prob::clamped(value)
}

/// Inverse of the sigmoid: `log(p / (1 - p))`.
#[inline]
pub fn logit(p: Prob) -> f64 {
    let v = p.value();
    (v / (1.0 - v)).ln()
}

// ---------------------------------------------------------------------------
// Tensor2
// ---------------------------------------------------------------------------

/// Dense matrix of f64. Row-major, contiguous, explicitly strided by `cols`,
/// so serialized buffers are portable byte-for-byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(UbruError::Dimension(format!(
                "buffer length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(UbruError::NonFinite(format!("tensor entry {v}")));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(UbruError::Dimension(format!(
                    "ragged rows: {} vs {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Reverse the row order (time reversal for `T x H` buffers).
    pub fn reversed_rows(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(self.row(self.rows - 1 - r));
        }
        out
    }

    /// Reverse the column order (time reversal for `F x T` buffers).
    pub fn reversed_cols(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, self.get(r, self.cols - 1 - c));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-timestep affine scores `out[t][i] = sum_f W[f][i] * X[f][t] + b[i]`.
///
/// `w` is `F x H`, `x` is `F x T`, the result is `T x H`. This is the only
/// dense kernel the recursions need.
pub fn affine_scores(w: &Tensor2, b: &[f64], x: &Tensor2) -> Result<Tensor2> {
    let (f_dim, h_dim) = (w.rows(), w.cols());
    if b.len() != h_dim {
        return Err(UbruError::Dimension(format!(
            "bias length {} != hidden dim {h_dim}",
            b.len()
        )));
    }
    if x.rows() != f_dim {
        return Err(UbruError::Dimension(format!(
            "input has {} feature rows, weights expect {f_dim}",
            x.rows()
        )));
    }
    let t_len = x.cols();
    let mut out = Tensor2::zeros(t_len, h_dim);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row.copy_from_slice(b);
        for f in 0..f_dim {
            let xv = x.get(f, t);
            let w_row = w.row(f);
            for i in 0..h_dim {
                row[i] += w_row[i] * xv;
            }
        }
    }
    Ok(out)
}
