//! Dense real-matrix primitives shared by every other module.
//!
//! All arithmetic is double precision; the gradient checks in [`crate::model`]
//! need the headroom.

use crate::{Error, Result};

/// Additive epsilon inside every `log` in cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Fails if the length does not
    /// match `rows * cols` or any entry is non-finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries for {}x{}, got {}",
                rows * cols,
                rows,
                cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArg("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }
}

/// Subtracts the per-column mean from every entry.
///
/// Output column means are zero to within 1e-12.
pub fn mean_center(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = x.rows as f64;
    let mut means = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (c, m) in means.iter_mut().enumerate() {
            *m += x.get(r, c);
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for c in 0..x.cols {
            out.set(r, c, x.get(r, c) - means[c]);
        }
    }
    Ok(out)
}

/// Sample covariance `Xc^T Xc / max(rows - 1, 1)` with `Xc` mean-centered.
///
/// The divisor floor of 1 makes single-row inputs yield the zero matrix
/// instead of a division error. The result is symmetric and PSD.
pub fn covariance(x: &Matrix) -> Result<Matrix> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let xc = mean_center(x)?;
    let d = x.cols;
    let denom = (x.rows.saturating_sub(1)).max(1) as f64;
    let mut cov = Matrix::zeros(d, d);
    for r in 0..x.rows {
        let row = xc.row(r);
        for i in 0..d {
            // Fill the upper triangle, mirror below.
            for j in i..d {
                let v = cov.get(i, j) + row[i] * row[j];
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// Sum of squared entries.
pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    a.data().iter().map(|v| v * v).sum()
}

/// Row-wise softmax, stabilized by per-row max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..a.cols {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..a.cols {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Mean over rows of `-sum_c P[r,c] * ln(Q[r,c] + eps)` with `eps = 1e-12`.
///
/// `P` rows are targets (one-hot allowed), `Q` rows are predicted
/// distributions. Non-negative up to the epsilon inside the log.
pub fn cross_entropy_rows(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(Error::ShapeMismatch(format!(
            "P is {}x{}, Q is {}x{}",
            p.rows(),
            p.cols(),
            q.rows(),
            q.cols()
        )));
    }
    if p.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for r in 0..p.rows() {
        for c in 0..p.cols() {
            total -= p.get(r, c) * (q.get(r, c) + LOG_EPS).ln();
        }
    }
    Ok(total / p.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    /// Test-only symmetric eigensolver (cyclic Jacobi). Independent route for
    /// the PSD check on covariance outputs.
    fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += m[i][j] * m[i][j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[p][q].abs() < 1e-18 {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[k][p];
                        let mkq = m[k][q];
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p][k];
                        let mqk = m[q][k];
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        (0..n).map(|i| m[i][i]).collect()
    }

    #[test]
    fn mean_center_constant_columns() {
        let out = mean_center(&mat(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_center_symmetric_about_mean() {
        let out = mean_center(&mat(2, 2, &[0.0, 2.0, 2.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn mean_center_single_row_is_zero() {
        let out = mean_center(&mat(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_center_empty_errors() {
        let empty = Matrix::zeros(0, 3);
        assert!(mean_center(&empty).is_err());
    }

    #[test]
    fn covariance_single_row_is_zero() {
        let out = covariance(&mat(1, 3, &[5.0, -1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[0.0; 9]);
    }

    #[test]
    fn covariance_identity_pair() {
        let out = covariance(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let expect = [0.5, -0.5, -0.5, 0.5];
        for (got, want) in out.data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn covariance_identical_rows_is_zero() {
        let out = covariance(&mat(3, 2, &[4.0, 7.0, 4.0, 7.0, 4.0, 7.0])).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm_sq(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm_sq(&mat(1, 2, &[3.0, 4.0])), 25.0);
        assert_eq!(frobenius_norm_sq(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0])), 2.0);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let out = softmax_rows(&mat(1, 2, &[0.0, 0.0]));
        assert!((out.get(0, 0) - 0.5).abs() < 1e-15);
        let big = softmax_rows(&mat(1, 2, &[1000.0, 1000.0]));
        assert!((big.get(0, 0) - 0.5).abs() < 1e-15);
        assert!(big.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_ln3() {
        let out = softmax_rows(&mat(1, 2, &[0.0, 3.0_f64.ln()]));
        assert!((out.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((out.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_near_zero() {
        let p = mat(1, 2, &[1.0, 0.0]);
        let ce = cross_entropy_rows(&p, &p).unwrap();
        assert!(ce.abs() <= 1e-11, "got {ce}");
    }

    #[test]
    fn cross_entropy_onehot_vs_uniform_is_ln2() {
        let p = mat(1, 2, &[1.0, 0.0]);
        let q = mat(1, 2, &[0.5, 0.5]);
        let ce = cross_entropy_rows(&p, &q).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_uniform_self_is_ln2() {
        let u = mat(1, 2, &[0.5, 0.5]);
        let ce = cross_entropy_rows(&u, &u).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_shape_mismatch_errors() {
        let p = mat(1, 2, &[1.0, 0.0]);
        let q = mat(1, 3, &[0.5, 0.25, 0.25]);
        assert!(cross_entropy_rows(&p, &q).is_err());
    }

    proptest! {
        #[test]
        fn covariance_symmetric_and_psd(
            rows in 1usize..64,
            cols in 1usize..12,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let x = Matrix::from_vec(rows, cols, data).unwrap();
            let cov = covariance(&x).unwrap();
            for i in 0..cols {
                for j in 0..cols {
                    prop_assert!((cov.get(i, j) - cov.get(j, i)).abs() < 1e-10);
                }
            }
            let eigs = jacobi_eigenvalues(&cov);
            for e in eigs {
                prop_assert!(e > -1e-8, "eigenvalue {e} below -1e-8");
            }
        }

        #[test]
        fn covariance_translation_invariant(
            rows in 1usize..16,
            cols in 1usize..8,
            seed in 0u64..1000,
            shift in -10.0f64..10.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let x = Matrix::from_vec(rows, cols, data.clone()).unwrap();
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let y = Matrix::from_vec(rows, cols, shifted).unwrap();
            let ca = covariance(&x).unwrap();
            let cb = covariance(&y).unwrap();
            for (a, b) in ca.data().iter().zip(cb.data().iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn softmax_shift_invariant(
            cols in 1usize..8,
            seed in 0u64..1000,
            shift in -50.0f64..50.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let a = Matrix::from_vec(1, cols, data.clone()).unwrap();
            let b = Matrix::from_vec(1, cols, data.iter().map(|v| v + shift).collect()).unwrap();
            let sa = softmax_rows(&a);
            let sb = softmax_rows(&b);
            let mut sum = 0.0;
            for c in 0..cols {
                prop_assert!((sa.get(0, c) - sb.get(0, c)).abs() < 1e-12);
                prop_assert!(sa.get(0, c) >= 0.0);
                sum += sa.get(0, c);
            }
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_minimized_at_q_equals_p() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let draw_dist = |rng: &mut rand_chacha::ChaCha8Rng| {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let p = Matrix::from_vec(1, 3, draw_dist(&mut rng)).unwrap();
        let base = cross_entropy_rows(&p, &p).unwrap();
        for _ in 0..10_000 {
            let q = Matrix::from_vec(1, 3, draw_dist(&mut rng)).unwrap();
            let ce = cross_entropy_rows(&p, &q).unwrap();
            assert!(ce >= base - 1e-10, "CE {ce} below CE(P,P) {base}");
        }
    }
}
