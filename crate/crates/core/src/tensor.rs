//! Dense numeric kernels in 64-bit floating point.
//!
//! Everything here is a pure function over borrowed slices. The transformer
//! in [`crate::model`] is built on the strided [`gemm`] wrapper; the KL
//! objectives in [`crate::divergence`] are built on the softmax family.

use crate::divergence::ProbDist;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A finite real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("vector must be non-empty"));
        }
        ensure_finite(&values, "vector")?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for RealVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!(
            "{what} has non-finite entry {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// `log(sum(exp(z)))` with max subtraction.
pub fn logsumexp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable log-probabilities.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("logits must be non-empty"));
    }
    ensure_finite(logits, "logits")?;
    Ok(log_softmax_unchecked(logits))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

/// `softmax(z / tau)` computed with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<ProbDist> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("logits must be non-empty"));
    }
    ensure_finite(logits, "logits")?;
    let probs = softmax_unchecked(logits, tau);
    Ok(ProbDist::from_raw(probs))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-12)`.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid(format!("step h={h} outside [1e-7, 1e-4]")));
    }
    if x.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "point has {} coordinates but analytic gradient has {}",
            x.len(),
            analytic.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "function is non-finite near coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic[i] - numeric).abs() / denom;
        if i == 0 || rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}

/// Borrowed strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Plain row-major `rows x cols` block.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows: cols, cols: rows, rs: 1, cs: cols }
    }

    /// Column slab `[col0, col0 + width)` of a row-major matrix with `stride` columns.
    pub fn cols_of(data: &'a [f64], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Self { data: &data[col0..], rows, cols: width, rs: stride, cs: 1 }
    }

    pub fn transpose(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = a * b + beta * c` where `c` is row-major with row stride `c_rs`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], c_rs: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_rs + n <= c.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            c[i * c_rs..i * c_rs + n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: every operand was bounds-checked above for the given strides,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// `x (m x k) * w^T` for a weight `w` stored as `n x k`.
pub(crate) fn linear(x: &[f64], m: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(View::new(x, m, k), View::t(w, n, k), 0.0, &mut out, n);
    out
}

/// `dw (n x k) += dy^T (n x m) * x (m x k)`.
pub(crate) fn accumulate_weight_grad(dw: &mut [f64], dy: &[f64], x: &[f64], m: usize, n: usize, k: usize) {
    gemm(View::t(dy, m, n), View::new(x, m, k), 1.0, dw, k);
}

/// `dx (m x k) = dy (m x n) * w (n x k)`.
pub(crate) fn linear_input_grad(dy: &[f64], m: usize, n: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm(View::new(dy, m, n), View::new(w, n, k), 0.0, &mut out, k);
    out
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Adds each column sum of the `m x n` matrix `y` into `db`.
pub(crate) fn accumulate_col_sums(db: &mut [f64], y: &[f64], n: usize) {
    for row in y.chunks_exact(n) {
        add_assign(db, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_logits_give_uniform_softmax() {
        let p = softmax_with_temperature(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &v in p.as_slice() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn ln2_logit_gives_two_thirds() {
        // direct summation: e^{ln 2} / (e^{ln 2} + e^0) = 2 / 3
        let p = softmax_with_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(p.as_slice()[0], 2.0 / 3.0, 1e-15));
        assert!(close(p.as_slice()[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = softmax_with_temperature(&[3.0, -7.0, 0.5, 12.0], 1e9).unwrap();
        let max = p.as_slice().iter().copied().fold(f64::MIN, f64::max);
        let min = p.as_slice().iter().copied().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0], -2.0).is_err());
        assert!(softmax_with_temperature(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax_with_temperature(&[f64::INFINITY], 1.0).is_err());
        assert!(log_softmax(&[0.0, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let out = log_softmax(&[0.0, 0.0]).unwrap();
        assert!(close(out[0], -2f64.ln(), 1e-15) && close(out[1], -2f64.ln(), 1e-15));

        let out = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0].abs() < 1e-9);

        // exact arithmetic: ln1, ln3 -> probabilities 1/4, 3/4
        let out = log_softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(out[0], 0.25f64.ln(), 1e-15));
        assert!(close(out[1], 0.75f64.ln(), 1e-15));
    }

    #[test]
    fn gradcheck_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let r = check_gradient(f, &[1.0, 2.0], &[2.0, 4.0], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn gradcheck_constant() {
        let r = check_gradient(|_| 3.5, &[0.3, -1.0, 2.0], &[0.0; 3], DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_error < 1e-8);
        let bad = check_gradient(|_| 3.5, &[0.3], &[1.0], DEFAULT_FD_STEP).unwrap();
        assert!(bad.max_rel_error > 0.5);
    }

    #[test]
    fn gradcheck_reports_worst_coordinate() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let r = check_gradient(f, &[1.0, 1.0], &[2.0, 2.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!(close(r.numeric, 3.0, 1e-8));
        assert_eq!(r.analytic, 2.0);
    }

    #[test]
    fn gradcheck_errors() {
        assert!(check_gradient(|_| 0.0, &[1.0], &[0.0], 1.0).is_err());
        assert!(check_gradient(|_| f64::NAN, &[1.0], &[0.0], 1e-5).is_err());
        assert!(check_gradient(|_| 0.0, &[1.0, 2.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn gemm_strided_matches_naive() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let w: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 2x4
        let y = linear(&a, 3, 4, &w, 2);
        for i in 0..3 {
            for j in 0..2 {
                let expect: f64 = (0..4).map(|k| a[i * 4 + k] * w[j * 4 + k]).sum();
                assert!(close(y[i * 2 + j], expect, 1e-12));
            }
        }
        let dx = linear_input_grad(&y, 3, 2, &w, 4);
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = (0..2).map(|j| y[i * 2 + j] * w[j * 4 + k]).sum();
                assert!(close(dx[i * 4 + k], expect, 1e-12));
            }
        }
        let mut dw = vec![1.0; 8];
        accumulate_weight_grad(&mut dw, &y, &a, 3, 2, 4);
        for j in 0..2 {
            for k in 0..4 {
                let expect: f64 = 1.0 + (0..3).map(|i| y[i * 2 + j] * a[i * 4 + k]).sum::<f64>();
                assert!(close(dw[j * 4 + k], expect, 1e-12));
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..32), c in -50.0f64..50.0) {
            let a = softmax_with_temperature(&z, 1.0).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax_with_temperature(&shifted, 1.0).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn temperature_equals_prescaled(z in prop::collection::vec(-30.0f64..30.0, 1..32), tau in 0.05f64..20.0) {
            let a = softmax_with_temperature(&z, tau).unwrap();
            let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
            let b = softmax_with_temperature(&scaled, 1.0).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn log_softmax_normalizes(z in prop::collection::vec(-100.0f64..100.0, 1..4096)) {
            let lp = log_softmax(&z).unwrap();
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
