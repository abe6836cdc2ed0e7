//! Synthetic binary arrays drawn from the model itself.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::inference::{FactorRole, FactorSet};
use crate::kernel::{gram, KernelSpec};
use crate::rng::{substream, Purpose};
use crate::tensor::{Shape, SparseTensorCOO};
use crate::tvgp::{kron_apply, KroneckerOperator};

/// Largest array generated densely.
pub const MAX_SYNTH_SIZE: usize = 100_000;

/// `vec(M) ~ N(0, Λ)` through the symmetric square root `Λ^{1/2} ε`.
pub fn sample_latent<R: Rng + ?Sized>(op: &KroneckerOperator, rng: &mut R) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..op.shape().size())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    kron_apply(op, &eps, f64::sqrt)
}

/// Draws factors `N(0, 1)`, a latent array from the tensor-variate GP they
/// define, and binary observations `y = 1[m + noise > 0]`. Returns the
/// listed nonzeros and the generating factors.
pub fn synth_generate(
    shape: &Shape,
    rank: usize,
    kernel: &KernelSpec,
    seed: u64,
) -> Result<(SparseTensorCOO, FactorSet)> {
    if shape.size() > MAX_SYNTH_SIZE {
        return Err(Error::Config(format!(
            "synthetic arrays are capped at {MAX_SYNTH_SIZE} entries, asked for {}",
            shape.size()
        )));
    }
    if rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    kernel.validate()?;
    let mut rng = substream(seed, Purpose::Synth, 0);
    let mats: Vec<DMatrix<f64>> = shape
        .dims()
        .iter()
        .map(|&m| {
            let data: Vec<f64> = (0..m * rank).map(|_| rng.sample(StandardNormal)).collect();
            DMatrix::from_row_slice(m, rank, &data)
        })
        .collect();
    let covs = mats
        .iter()
        .map(|u| gram(kernel, u))
        .collect::<Result<Vec<_>>>()?;
    let op = KroneckerOperator::from_covariances(&covs)?;
    let m = sample_latent(&op, &mut rng)?;
    let entries = m
        .iter()
        .enumerate()
        .filter_map(|(o, &mi)| {
            let z = mi + rng.sample::<f64, _>(StandardNormal);
            (z > 0.0).then(|| (shape.unravel(o), 1.0))
        })
        .collect();
    Ok((
        SparseTensorCOO::new(shape.clone(), entries)?,
        FactorSet::new(mats, FactorRole::Common)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reproducible_and_capped() {
        let shape = Shape::new(vec![6, 5, 4]).unwrap();
        let k = KernelSpec::rbf(1.0);
        let (a, fa) = synth_generate(&shape, 2, &k, 3).unwrap();
        let (b, fb) = synth_generate(&shape, 2, &k, 3).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
        assert_eq!(fa, fb);
        let (c, _) = synth_generate(&shape, 2, &k, 4).unwrap();
        assert_ne!(a.to_dense(), c.to_dense());
        let big = Shape::new(vec![100, 100, 11]).unwrap();
        assert!(matches!(
            synth_generate(&big, 2, &k, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn roughly_half_the_entries_are_ones() {
        let shape = Shape::new(vec![20, 20, 20]).unwrap();
        let (y, _) = synth_generate(&shape, 3, &KernelSpec::rbf(1.0), 11).unwrap();
        let frac = y.nnz() as f64 / shape.size() as f64;
        assert!((frac - 0.5).abs() < 0.1, "{frac}");
    }

    #[test]
    fn latent_covariance_matches_kronecker() {
        // 2x2 case: empirical covariance of vec(M) against Σ₁ ⊗ Σ₂
        let s1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.5]);
        let s2 = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, -0.5, 1.0]);
        let op = KroneckerOperator::from_covariances(&[s1.clone(), s2.clone()]).unwrap();
        let lambda = s1.kronecker(&s2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut cov = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n {
            let m = nalgebra::DVector::from_vec(sample_latent(&op, &mut rng).unwrap());
            cov += &m * m.transpose();
        }
        cov /= n as f64;
        for i in 0..4 {
            for j in 0..4 {
                // 5% of the larger diagonal scale covers near-zero entries
                let scale = (lambda[(i, i)] * lambda[(j, j)]).sqrt();
                assert!(
                    (cov[(i, j)] - lambda[(i, j)]).abs() < 0.05 * scale,
                    "({i},{j}): {} vs {}",
                    cov[(i, j)],
                    lambda[(i, j)]
                );
            }
        }
    }
}
