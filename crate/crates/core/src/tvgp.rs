//! Tensor-variate normal density with Kronecker-structured covariance.
//!
//! The covariance `Λ = Σ_1 ⊗ .. ⊗ Σ_K` is held only through the per-mode
//! eigendecompositions `Σ_k = Q_k diag(d_k) Q_kᵀ`. Any spectral function
//! `f(Λ) v` becomes three passes over the tensor: rotate into the joint
//! eigenbasis with `Q_kᵀ` along each mode, scale entrywise by `f` of the
//! product eigenvalues, and rotate back.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{mode_k_multiply, DenseTensor, Shape};

/// Lower clamp on per-mode eigenvalues.
pub const EIGEN_FLOOR: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-8;

/// Spectral form of one mode's covariance.
#[derive(Debug, Clone)]
pub struct ModeEigen {
    /// Orthonormal eigenvectors as columns.
    pub vectors: DMatrix<f64>,
    /// Eigenvalues, each at least [`EIGEN_FLOOR`].
    pub values: DVector<f64>,
}

impl ModeEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn log_det(&self) -> f64 {
        self.values.iter().map(|d| d.ln()).sum()
    }

    /// `Q diag(f(d)) Qᵀ`
    pub fn spectral_matrix(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (c, &d) in self.values.iter().enumerate() {
            let s = f(d);
            scaled.column_mut(c).scale_mut(s);
        }
        scaled * self.vectors.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.spectral_matrix(|d| d)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.spectral_matrix(|d| 1.0 / d)
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues floored at
/// [`EIGEN_FLOOR`].
pub fn mode_eigen(s: &DMatrix<f64>) -> Result<ModeEigen> {
    if !s.is_square() {
        return Err(Error::Shape(format!("{:?} matrix is not square", s.shape())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite covariance entry".into()));
    }
    let asym = (s - s.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::Numeric(format!(
            "covariance is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(s.clone());
    let values = eig.eigenvalues.map(|d| d.max(EIGEN_FLOOR));
    Ok(ModeEigen {
        vectors: eig.eigenvectors,
        values,
    })
}

/// The implicit operator `Λ = ⊗_k Σ_k`.
#[derive(Debug, Clone)]
pub struct KroneckerOperator {
    modes: Vec<ModeEigen>,
}

impl KroneckerOperator {
    pub fn new(modes: Vec<ModeEigen>) -> Result<KroneckerOperator> {
        if modes.is_empty() {
            return Err(Error::Shape("Kronecker operator needs at least one mode".into()));
        }
        Ok(KroneckerOperator { modes })
    }

    /// Decomposes each mode covariance.
    pub fn from_covariances(covs: &[DMatrix<f64>]) -> Result<KroneckerOperator> {
        KroneckerOperator::new(covs.iter().map(mode_eigen).collect::<Result<_>>()?)
    }

    pub fn modes(&self) -> &[ModeEigen] {
        &self.modes
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.modes.iter().map(ModeEigen::dim).collect())
            .expect("mode dimensions are positive")
    }

    /// `log |Λ| = sum_k (m / m_k) log |Σ_k|`
    pub fn log_det(&self) -> f64 {
        let m = self.shape().size() as f64;
        self.modes
            .iter()
            .map(|e| m / e.dim() as f64 * e.log_det())
            .sum()
    }

    /// Eigenvalues of `Λ` laid out as a tensor: entry `j` is
    /// `prod_k d_k[j_k]`.
    pub fn eigenvalue_grid(&self) -> DenseTensor {
        let mut grid = vec![1.0];
        for e in &self.modes {
            let mut next = Vec::with_capacity(grid.len() * e.dim());
            for &g in &grid {
                next.extend(e.values.iter().map(|&d| g * d));
            }
            grid = next;
        }
        DenseTensor::new(self.shape(), grid).expect("grid size matches shape")
    }

    /// `t ×_1 Q_1ᵀ .. ×_K Q_Kᵀ`
    pub fn to_eigenbasis(&self, t: &DenseTensor) -> Result<DenseTensor> {
        self.check(t)?;
        let mut out = t.clone();
        for (k, e) in self.modes.iter().enumerate() {
            out = mode_k_multiply(&out, &e.vectors.transpose(), k)?;
        }
        Ok(out)
    }

    /// `t ×_1 Q_1 .. ×_K Q_K`
    pub fn from_eigenbasis(&self, t: &DenseTensor) -> Result<DenseTensor> {
        self.check(t)?;
        let mut out = t.clone();
        for (k, e) in self.modes.iter().enumerate() {
            out = mode_k_multiply(&out, &e.vectors, k)?;
        }
        Ok(out)
    }

    /// `f(Λ)` applied to a tensor.
    pub fn apply_tensor(&self, t: &DenseTensor, f: impl Fn(f64) -> f64) -> Result<DenseTensor> {
        let mut rotated = self.to_eigenbasis(t)?;
        let grid = self.eigenvalue_grid();
        for (x, &d) in rotated.data_mut().iter_mut().zip(grid.data()) {
            *x *= f(d);
        }
        self.from_eigenbasis(&rotated)
    }

    /// `sum_j f(δ_j)` over all eigenvalues of `Λ`.
    pub fn spectral_sum(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.eigenvalue_grid().data().iter().map(|&d| f(d)).sum()
    }

    fn check(&self, t: &DenseTensor) -> Result<()> {
        let dims: Vec<usize> = self.modes.iter().map(ModeEigen::dim).collect();
        if t.shape().dims() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "tensor {:?} does not match operator modes {:?}",
                t.shape().dims(),
                dims
            )));
        }
        Ok(())
    }
}

/// `f(Λ) v` for a vectorized tensor `v`.
pub fn kron_apply(
    op: &KroneckerOperator,
    v: &[f64],
    f: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let shape = op.shape();
    if v.len() != shape.size() {
        return Err(Error::Shape(format!(
            "vector of length {} for an operator of size {}",
            v.len(),
            shape.size()
        )));
    }
    let t = DenseTensor::new(shape, v.to_vec())?;
    Ok(op.apply_tensor(&t, f)?.into_data())
}

/// Log-density of `M` under the zero-mean tensor-variate normal with
/// covariance `op`.
pub fn log_density(m: &DenseTensor, op: &KroneckerOperator) -> Result<f64> {
    let rotated = op.to_eigenbasis(m)?;
    let grid = op.eigenvalue_grid();
    let quad: f64 = rotated
        .data()
        .iter()
        .zip(grid.data())
        .map(|(x, d)| x * x / d)
        .sum();
    let n = m.shape().size() as f64;
    Ok(-0.5 * quad - 0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * op.log_det())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.kronecker(b)
    }

    #[test]
    fn identity_and_diagonal_eigen() {
        let e = mode_eigen(&DMatrix::identity(3, 3)).unwrap();
        assert!(e.values.iter().all(|&d| (d - 1.0).abs() < 1e-15));
        let qtq = e.vectors.transpose() * &e.vectors;
        assert!((qtq - DMatrix::identity(3, 3)).abs().max() < 1e-12);

        let e = mode_eigen(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).unwrap();
        let mut d: Vec<f64> = e.values.iter().copied().collect();
        d.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(d, vec![4.0, 1.0]);
    }

    #[test]
    fn eigen_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let s = random_spd(&mut rng, 5);
        let e = mode_eigen(&s).unwrap();
        assert!((e.reconstruct() - &s).abs().max() < 1e-8);
        assert!(
            (e.vectors.transpose() * &e.vectors - DMatrix::identity(5, 5))
                .abs()
                .max()
                < 1e-8
        );
    }

    #[test]
    fn eigen_floors_and_rejects_asymmetry() {
        let e = mode_eigen(&DMatrix::zeros(2, 2)).unwrap();
        assert!(e.values.iter().all(|&d| d == EIGEN_FLOOR));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(mode_eigen(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn kron_apply_identity_and_diagonal() {
        let op = KroneckerOperator::from_covariances(&[
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
        ])
        .unwrap();
        let v: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let out = kron_apply(&op, &v, |d| d).unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }

        let d1 = [2.0, 3.0];
        let d2 = [5.0, 7.0, 11.0];
        let op = KroneckerOperator::from_covariances(&[
            DMatrix::from_diagonal(&DVector::from_row_slice(&d1)),
            DMatrix::from_diagonal(&DVector::from_row_slice(&d2)),
        ])
        .unwrap();
        let out = kron_apply(&op, &v, |d| 1.0 / d).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let expect = v[i * 3 + j] / (d1[i] * d2[j]);
                assert!((out[i * 3 + j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn kron_apply_matches_explicit_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_spd(&mut rng, 3);
        let b = random_spd(&mut rng, 4);
        let op = KroneckerOperator::from_covariances(&[a.clone(), b.clone()]).unwrap();
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = kron(&a, &b);
        let expect = &dense * DVector::from_row_slice(&v);
        let got = kron_apply(&op, &v, |d| d).unwrap();
        for i in 0..12 {
            assert!((got[i] - expect[i]).abs() < 1e-10);
        }
        // (I + Λ)^{-1}
        let inv = (DMatrix::identity(12, 12) + &dense).try_inverse().unwrap();
        let expect = inv * DVector::from_row_slice(&v);
        let got = kron_apply(&op, &v, |d| 1.0 / (1.0 + d)).unwrap();
        for i in 0..12 {
            assert!((got[i] - expect[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn kron_apply_length_mismatch() {
        let op = KroneckerOperator::from_covariances(&[DMatrix::identity(2, 2)]).unwrap();
        assert!(matches!(kron_apply(&op, &[1.0], |d| d), Err(Error::Shape(_))));
    }

    #[test]
    fn log_density_identity_cases() {
        let op = KroneckerOperator::from_covariances(&[
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        ])
        .unwrap();
        let zero = DenseTensor::zeros(Shape::new(vec![2, 2]).unwrap());
        let l = log_density(&zero, &op).unwrap();
        assert!((l - (-2.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((l + 3.6758).abs() < 1e-4);

        let m = DenseTensor::new(Shape::new(vec![2, 2]).unwrap(), vec![0.5, -1.0, 2.0, 0.1])
            .unwrap();
        let expect = -0.5 * m.norm_sq() - 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_density(&m, &op).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn log_density_is_exchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let covs: Vec<_> = [3, 2, 4].iter().map(|&n| random_spd(&mut rng, n)).collect();
        let shape = Shape::new(vec![3, 2, 4]).unwrap();
        let m = DenseTensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0));
        let base = log_density(&m, &KroneckerOperator::from_covariances(&covs).unwrap()).unwrap();

        // permute mode-3 indices of M together with rows/cols of Σ_3
        let perm = [2usize, 0, 3, 1];
        let pm = DenseTensor::from_fn(shape, |i| m.get(&[i[0], i[1], perm[i[2]]]));
        let mut pcovs = covs.clone();
        pcovs[2] = DMatrix::from_fn(4, 4, |a, b| covs[2][(perm[a], perm[b])]);
        let permuted =
            log_density(&pm, &KroneckerOperator::from_covariances(&pcovs).unwrap()).unwrap();
        assert!((base - permuted).abs() < 1e-8);
    }

    #[test]
    fn density_integrates_to_one_on_1x2() {
        let s1 = DMatrix::from_row_slice(1, 1, &[0.8]);
        let s2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.7]);
        let op = KroneckerOperator::from_covariances(&[s1, s2]).unwrap();
        let shape = Shape::new(vec![1, 2]).unwrap();
        // midpoint rule over [-8, 8]^2
        let n = 400;
        let h = 16.0 / n as f64;
        let mut total = 0.0;
        for a in 0..n {
            for b in 0..n {
                let x = -8.0 + (a as f64 + 0.5) * h;
                let y = -8.0 + (b as f64 + 0.5) * h;
                let m = DenseTensor::new(shape.clone(), vec![x, y]).unwrap();
                total += log_density(&m, &op).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }
}
