//! CORAL distances, the pairwise correlation matrix against anchors, and the
//! cross-branch consistency loss.
//!
//! CORAL measures the squared Frobenius distance between covariance matrices
//! of two feature sets, scaled by `1/(4 c'^2)`. Between single embeddings the
//! sample covariance is degenerate, so the per-vector form treats each vector
//! as a rank-1 centered outer product with divisor `c' - 1`.

use crate::numerics::{
    covariance, cross_entropy_rows, frobenius_norm_sq, softmax_rows, Matrix,
};
use crate::{Error, Result};

/// A set of embeddings, one per row; `dim` is the projection width `c'`.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    values: Matrix,
}

impl FeatureMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::ShapeMismatch("ragged embedding rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(Matrix::from_vec(rows.len(), dim, data)?)
    }

    pub fn count(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Pairwise CORAL distances between unlabeled embeddings (rows) and anchors
/// (columns). All entries are non-negative.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    values: Matrix,
}

impl CorrelationMatrix {
    /// Unlabeled-feature count (rows).
    pub fn m(&self) -> usize {
        self.values.rows()
    }

    /// Anchor count (columns).
    pub fn n(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// CORAL distance between two feature sets: `1/(4 c'^2) * ||cov(Zp) - cov(Zm)||_F^2`.
pub fn coral_distance(zp: &FeatureMatrix, zm: &FeatureMatrix) -> Result<f64> {
    if zp.dim() != zm.dim() {
        return Err(Error::DimMismatch(format!(
            "feature dims {} vs {}",
            zp.dim(),
            zm.dim()
        )));
    }
    let c = zp.dim() as f64;
    let cp = covariance(zp.values())?;
    let cm = covariance(zm.values())?;
    let mut diff = Matrix::zeros(cp.rows(), cp.cols());
    for i in 0..cp.rows() {
        for j in 0..cp.cols() {
            diff.set(i, j, cp.get(i, j) - cm.get(i, j));
        }
    }
    Ok(frobenius_norm_sq(&diff) / (4.0 * c * c))
}

/// Centers a vector and returns it with its rank-1 covariance divisor baked
/// into the caller's formula. Helper for [`vector_coral`].
fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Per-vector CORAL: each vector `v` stands in for the rank-1 covariance
/// `C(v) = (v - mean(v))(v - mean(v))^T / (c' - 1)`; the result is
/// `1/(4 c'^2) * ||C(vp) - C(vm)||_F^2`. Symmetric in its arguments.
pub fn vector_coral(vp: &[f64], vm: &[f64]) -> Result<f64> {
    if vp.len() != vm.len() {
        return Err(Error::DimMismatch(format!(
            "vector dims {} vs {}",
            vp.len(),
            vm.len()
        )));
    }
    let c = vp.len();
    if c < 2 {
        return Err(Error::DegenerateVector(c));
    }
    let up = centered(vp);
    let um = centered(vm);
    let denom = (c - 1) as f64;
    let mut frob = 0.0;
    for i in 0..c {
        for j in 0..c {
            let d = (up[i] * up[j] - um[i] * um[j]) / denom;
            frob += d * d;
        }
    }
    let cf = c as f64;
    Ok(frob / (4.0 * cf * cf))
}

/// Builds the (m x n) matrix with entry `[r][k] = vector_coral(anchors.row(k),
/// unlabeled.row(r))` for every pair.
pub fn correlation_matrix(
    z_unl: &FeatureMatrix,
    z_anc: &FeatureMatrix,
) -> Result<CorrelationMatrix> {
    if z_unl.dim() != z_anc.dim() {
        return Err(Error::DimMismatch(format!(
            "feature dims {} vs {}",
            z_unl.dim(),
            z_anc.dim()
        )));
    }
    let m = z_unl.count();
    let n = z_anc.count();
    let mut values = Matrix::zeros(m, n);
    for r in 0..m {
        for k in 0..n {
            values.set(r, k, vector_coral(z_anc.row(k), z_unl.row(r))?);
        }
    }
    Ok(CorrelationMatrix { values })
}

/// Cross-branch consistency loss between two correlation matrices.
///
/// Each matrix row of negated distances is softmaxed into a similarity
/// distribution over anchors (smaller distance, higher weight), then the two
/// branches' distributions are compared with cross-entropy, first argument as
/// target.
pub fn consistency_loss(
    corr_mp: &CorrelationMatrix,
    corr_ap: &CorrelationMatrix,
) -> Result<f64> {
    if corr_mp.m() != corr_ap.m() || corr_mp.n() != corr_ap.n() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            corr_mp.m(),
            corr_mp.n(),
            corr_ap.m(),
            corr_ap.n()
        )));
    }
    let a = softmax_rows(&negate(corr_mp.values()));
    let b = softmax_rows(&negate(corr_ap.values()));
    cross_entropy_rows(&a, &b)
}

fn negate(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, -m.get(r, c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> FeatureMatrix {
        let data: Vec<f64> = (0..count * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FeatureMatrix::new(Matrix::from_vec(count, dim, data).unwrap()).unwrap()
    }

    /// Independent brute-force oracle: centered rank-1 products built
    /// elementwise, full double loop over entries.
    fn vector_coral_oracle(vp: &[f64], vm: &[f64]) -> f64 {
        let c = vp.len();
        let mp = vp.iter().sum::<f64>() / c as f64;
        let mm = vm.iter().sum::<f64>() / c as f64;
        let mut sum = 0.0;
        for i in 0..c {
            for j in 0..c {
                let cp = (vp[i] - mp) * (vp[j] - mp) / (c as f64 - 1.0);
                let cm = (vm[i] - mm) * (vm[j] - mm) / (c as f64 - 1.0);
                sum += (cp - cm) * (cp - cm);
            }
        }
        sum / (4.0 * (c * c) as f64)
    }

    #[test]
    fn coral_distance_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z = random_features(&mut rng, 5, 4);
            assert_eq!(coral_distance(&z, &z).unwrap(), 0.0);
        }
    }

    #[test]
    fn coral_distance_constant_rows_is_zero() {
        let zp = FeatureMatrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        let zm = FeatureMatrix::from_rows(&[vec![-1.0, 5.0], vec![-1.0, 5.0]]).unwrap();
        assert_eq!(coral_distance(&zp, &zm).unwrap(), 0.0);
    }

    #[test]
    fn coral_distance_hand_example() {
        let zp = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zm = FeatureMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let d = coral_distance(&zp, &zm).unwrap();
        assert!((d - 0.0625).abs() < 1e-15, "got {d}");
    }

    #[test]
    fn coral_distance_dim_mismatch_errors() {
        let zp = FeatureMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let zm = FeatureMatrix::from_rows(&[vec![1.0, 0.0, 2.0]]).unwrap();
        assert!(coral_distance(&zp, &zm).is_err());
    }

    #[test]
    fn vector_coral_identical_and_constant() {
        assert_eq!(vector_coral(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(vector_coral(&[4.0, 4.0], &[-2.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn vector_coral_hand_example() {
        let d = vector_coral(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert!((d - 0.25).abs() < 1e-15, "got {d}");
    }

    #[test]
    fn vector_coral_rejects_degenerate_dim() {
        assert!(matches!(
            vector_coral(&[1.0], &[2.0]),
            Err(Error::DegenerateVector(1))
        ));
    }

    #[test]
    fn vector_coral_symmetric_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let dim = rng.gen_range(2..9);
            let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ab = vector_coral(&a, &b).unwrap();
            let ba = vector_coral(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-15);
            let shift = rng.gen_range(-5.0..5.0);
            let a_shift: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let shifted = vector_coral(&a_shift, &b).unwrap();
            assert!((ab - shifted).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_matrix_self_diagonal_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_features(&mut rng, 4, 5);
        let corr = correlation_matrix(&z, &z).unwrap();
        for i in 0..4 {
            assert_eq!(corr.values().get(i, i), 0.0);
        }
    }

    #[test]
    fn correlation_matrix_single_pair() {
        let zu = FeatureMatrix::from_rows(&[vec![1.0, -1.0, 0.5]]).unwrap();
        let za = FeatureMatrix::from_rows(&[vec![0.2, 0.9, -0.4]]).unwrap();
        let corr = correlation_matrix(&zu, &za).unwrap();
        assert_eq!(corr.m(), 1);
        assert_eq!(corr.n(), 1);
        let expect = vector_coral(za.row(0), zu.row(0)).unwrap();
        assert_eq!(corr.values().get(0, 0), expect);
    }

    #[test]
    fn correlation_matrix_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rng.gen_range(1..6);
            let n = rng.gen_range(1..5);
            let dim = rng.gen_range(2..7);
            let zu = random_features(&mut rng, m, dim);
            let za = random_features(&mut rng, n, dim);
            let corr = correlation_matrix(&zu, &za).unwrap();
            for r in 0..m {
                for k in 0..n {
                    let want = vector_coral_oracle(za.row(k), zu.row(r));
                    let got = corr.values().get(r, k);
                    assert!((got - want).abs() < 1e-12, "entry ({r},{k}): {got} vs {want}");
                    assert!(got >= 0.0);
                }
            }
        }
    }

    #[test]
    fn consistency_loss_equal_matrices_hits_entropy_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zu = random_features(&mut rng, 3, 4);
        let za = random_features(&mut rng, 2, 4);
        let corr = correlation_matrix(&zu, &za).unwrap();
        let loss = consistency_loss(&corr, &corr).unwrap();
        // CE(A, A) is the mean row entropy of A.
        let a = softmax_rows(&super::negate(corr.values()));
        let mut entropy = 0.0;
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                entropy -= a.get(r, c) * (a.get(r, c) + crate::numerics::LOG_EPS).ln();
            }
        }
        entropy /= a.rows() as f64;
        assert!((loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn consistency_loss_all_zero_two_anchors_is_ln2() {
        let corr = CorrelationMatrix {
            values: Matrix::zeros(3, 2),
        };
        let loss = consistency_loss(&corr, &corr).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn consistency_loss_sharp_row_entropy() {
        let values = Matrix::from_vec(1, 2, vec![0.0, 10.0]).unwrap();
        let corr = CorrelationMatrix { values };
        let loss = consistency_loss(&corr, &corr).unwrap();
        // softmax(-[0,10]) = (1/(1+e^-10), e^-10/(1+e^-10)); entropy ~ 4.994e-4
        assert!((loss - 4.993775842412e-4).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn consistency_loss_minimized_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zu = random_features(&mut rng, 4, 4);
        let za = random_features(&mut rng, 3, 4);
        let corr = correlation_matrix(&zu, &za).unwrap();
        let base = consistency_loss(&corr, &corr).unwrap();
        for _ in 0..500 {
            let mut perturbed = corr.values().clone();
            for r in 0..perturbed.rows() {
                for c in 0..perturbed.cols() {
                    let v = perturbed.get(r, c) + rng.gen_range(0.0..0.5);
                    perturbed.set(r, c, v);
                }
            }
            let other = CorrelationMatrix { values: perturbed };
            let loss = consistency_loss(&corr, &other).unwrap();
            assert!(loss >= base - 1e-10, "perturbed loss {loss} below floor {base}");
        }
    }

    #[test]
    fn consistency_loss_shape_mismatch_errors() {
        let a = CorrelationMatrix {
            values: Matrix::zeros(2, 3),
        };
        let b = CorrelationMatrix {
            values: Matrix::zeros(2, 2),
        };
        assert!(consistency_loss(&a, &b).is_err());
    }
}
