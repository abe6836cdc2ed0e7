//! Variational E-step and the per-group stochastic gradient M-step.
//!
//! For one subarray with block `Y`, latent `M` and augmented `Z`, the
//! variational posterior is
//!
//! * `q(z_i)`: `N(E[m_i], 1)` truncated to the side given by `y_i`;
//! * `q(vec M) = N(μ, Υ)` with `Υ = Λ (I + Λ)^{-1}` and `μ = Υ vec(E[Z])`.
//!
//! With `q` held fixed, the part of the expected log joint that depends on
//! the group factors `Ũ` is
//!
//! ```text
//! g(Ũ) = -1/(2 T λ) Σ_k |U_k - Ũ_k|²
//!        - ½ [ μᵀ Λ⁻¹ μ + tr(Λ⁻¹ Υ) + Σ_k (m/m_k) log|Σ_k| + m log 2π ]
//! ```
//!
//! where `Σ_k` is the kernel Gram over the selected rows of `Ũ_k` and
//! `Λ = ⊗ Σ_k`. The gradient flows through `Σ_k` only; `μ` and `Υ` stay at
//! their E-step values.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{gram, gram_vjp, KernelSpec};
use crate::probit::truncated_mean;
use crate::tensor::{
    contract_except, extract_subarray, mode_k_inner, DenseTensor, IndexSets, Shape,
    SparseTensorCOO,
};
use crate::tvgp::KroneckerOperator;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorRole {
    Common,
    Group(usize),
}

/// One latent factor matrix per mode (`m_k × r_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    matrices: Vec<DMatrix<f64>>,
    role: FactorRole,
}

impl FactorSet {
    pub fn new(matrices: Vec<DMatrix<f64>>, role: FactorRole) -> Result<FactorSet> {
        if matrices.is_empty() {
            return Err(Error::Shape("a factor set needs at least one mode".into()));
        }
        for (k, m) in matrices.iter().enumerate() {
            if m.nrows() == 0 || m.ncols() == 0 {
                return Err(Error::Shape(format!("mode {} factor matrix is empty", k + 1)));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("mode {} factors are not finite", k + 1)));
            }
        }
        Ok(FactorSet { matrices, role })
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn into_matrices(self) -> Vec<DMatrix<f64>> {
        self.matrices
    }

    pub fn mode(&self, k: usize) -> &DMatrix<f64> {
        &self.matrices[k]
    }

    pub fn mode_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.matrices[k]
    }

    pub fn ndims(&self) -> usize {
        self.matrices.len()
    }

    pub fn role(&self) -> FactorRole {
        self.role
    }

    pub fn with_role(mut self, role: FactorRole) -> FactorSet {
        self.role = role;
        self
    }

    /// Row counts per mode.
    pub fn dims(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.nrows()).collect()
    }

    /// Rows `idx` of mode `k`, in the given order.
    pub fn rows(&self, k: usize, idx: &[usize]) -> DMatrix<f64> {
        let m = &self.matrices[k];
        DMatrix::from_fn(idx.len(), m.ncols(), |i, c| m[(idx[i], c)])
    }

    pub fn check_shape(&self, shape: &Shape) -> Result<()> {
        if self.dims() != shape.dims() {
            return Err(Error::Shape(format!(
                "factor rows {:?} do not match array shape {:?}",
                self.dims(),
                shape.dims()
            )));
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &FactorSet) -> Result<()> {
        if self.ndims() != other.ndims() {
            return Err(Error::Shape(format!(
                "{} modes vs {} modes",
                self.ndims(),
                other.ndims()
            )));
        }
        for (k, (a, b)) in self.matrices.iter().zip(&other.matrices).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "mode {}: {:?} vs {:?}",
                    k + 1,
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &FactorSet) -> f64 {
        self.matrices
            .iter()
            .zip(&other.matrices)
            .map(|(a, b)| (a - b).abs().max())
            .fold(0.0, f64::max)
    }

    pub fn sq_distance(&self, other: &FactorSet) -> f64 {
        self.matrices
            .iter()
            .zip(&other.matrices)
            .map(|(a, b)| (a - b).norm_squared())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Hyperparameters of the stochastic M-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    /// Learning rate η.
    pub eta: f64,
    /// Prior variance λ tying group factors to the common factors.
    pub lambda: f64,
    pub kernel: KernelSpec,
    /// Fixed-point sweeps of q(Z) then q(M) per visit.
    pub estep_sweeps: usize,
}

impl SgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.estep_sweeps == 0 {
            return Err(Error::Config("estep sweeps must be at least 1".into()));
        }
        self.kernel.validate()
    }
}

/// Posterior moments of one subarray.
#[derive(Debug, Clone)]
pub struct SubarrayState {
    pub sel: IndexSets,
    /// Observed binary block.
    pub y: DenseTensor,
    /// Per-position flag; unobserved positions get an untruncated q(z).
    pub observed: Option<Vec<bool>>,
    /// `E_q[Z]`
    pub ez: DenseTensor,
    /// `E_q[M]`, the reshaped posterior mean μ.
    pub em: DenseTensor,
    /// Spectral form of `Λ` at the last E-step.
    pub op: Option<KroneckerOperator>,
    /// `tr((I + Λ)^{-1})`
    pub trace_upsilon: f64,
    /// `tr(Λ^{-1} Υ)`
    pub trace_lambda_inv_upsilon: f64,
}

impl SubarrayState {
    /// Extracts the block selected by `sel`; moments start at zero.
    pub fn new(data: &SparseTensorCOO, sel: IndexSets) -> Result<SubarrayState> {
        let y = extract_subarray(data, &sel)?;
        let zeros = DenseTensor::zeros(y.shape().clone());
        Ok(SubarrayState {
            sel,
            y,
            observed: None,
            ez: zeros.clone(),
            em: zeros,
            op: None,
            trace_upsilon: 0.0,
            trace_lambda_inv_upsilon: 0.0,
        })
    }

    /// Marks local positions (flat offsets) as unobserved.
    pub fn with_unobserved(mut self, offsets: &[usize]) -> SubarrayState {
        let mut mask = self
            .observed
            .take()
            .unwrap_or_else(|| vec![true; self.y.data().len()]);
        for &o in offsets {
            mask[o] = false;
        }
        self.observed = Some(mask);
        self
    }

    pub fn shape(&self) -> &Shape {
        self.y.shape()
    }

    fn operator(&self) -> Result<&KroneckerOperator> {
        self.op
            .as_ref()
            .ok_or_else(|| Error::Config("E-step has not been run on this subarray".into()))
    }
}

/// Mean of the truncated normal `q(z)` for label `y` and current `E[m]`.
pub fn estep_z(y: f64, em: f64) -> f64 {
    truncated_mean(y, em)
}

/// Elementwise q(Z) update over the block.
pub fn estep_z_block(state: &mut SubarrayState) {
    let ez = state.ez.data_mut();
    let y = state.y.data();
    let em = state.em.data();
    match &state.observed {
        None => {
            for i in 0..ez.len() {
                ez[i] = estep_z(y[i], em[i]);
            }
        }
        Some(mask) => {
            for i in 0..ez.len() {
                ez[i] = if mask[i] { estep_z(y[i], em[i]) } else { em[i] };
            }
        }
    }
}

/// q(M) update: `μ = Λ (I + Λ)^{-1} vec(E[Z])` plus the trace statistics.
pub fn estep_m(state: &mut SubarrayState) -> Result<()> {
    let op = state.operator()?;
    let em = op.apply_tensor(&state.ez, |d| d / (1.0 + d))?;
    let trace_upsilon = op.spectral_sum(|d| 1.0 / (1.0 + d));
    let trace_lambda_inv_upsilon = op.spectral_sum(|d| (d / (1.0 + d)) / d);
    state.em = em;
    state.trace_upsilon = trace_upsilon;
    state.trace_lambda_inv_upsilon = trace_lambda_inv_upsilon;
    Ok(())
}

fn selected_rows(state: &SubarrayState, factors: &FactorSet) -> Result<Vec<DMatrix<f64>>> {
    factors.check_shape_prefix(state)?;
    Ok((0..factors.ndims())
        .map(|k| factors.rows(k, state.sel.mode(k)))
        .collect())
}

impl FactorSet {
    fn check_shape_prefix(&self, state: &SubarrayState) -> Result<()> {
        if self.ndims() != state.sel.sets().len() {
            return Err(Error::Shape(format!(
                "{} factor modes for a {}-mode subarray",
                self.ndims(),
                state.sel.sets().len()
            )));
        }
        for (k, set) in state.sel.sets().iter().enumerate() {
            if set.iter().any(|&i| i >= self.matrices[k].nrows()) {
                return Err(Error::Range(format!(
                    "mode {} selection exceeds {} factor rows",
                    k + 1,
                    self.matrices[k].nrows()
                )));
            }
        }
        Ok(())
    }
}

/// Full E-step from the current factors: the covariances are rebuilt, the
/// moments restart from `E[M] = 0`, then `sweeps` rounds of q(Z), q(M).
pub fn estep(
    state: &mut SubarrayState,
    factors: &FactorSet,
    kernel: &KernelSpec,
    sweeps: usize,
) -> Result<()> {
    let xs = selected_rows(state, factors)?;
    let covs = xs
        .iter()
        .map(|x| gram(kernel, x))
        .collect::<Result<Vec<_>>>()?;
    state.op = Some(KroneckerOperator::from_covariances(&covs)?);
    state.em = DenseTensor::zeros(state.y.shape().clone());
    for _ in 0..sweeps.max(1) {
        estep_z_block(state);
        estep_m(state)?;
    }
    Ok(())
}

/// Value and (optionally) factor gradient of the expected log prior of `M`
/// under fixed q, evaluated at `factors`.
fn expected_log_prior(
    state: &SubarrayState,
    factors: &FactorSet,
    kernel: &KernelSpec,
    want_grad: bool,
) -> Result<(f64, Option<Vec<DMatrix<f64>>>)> {
    let op0 = state.operator()?;
    let xs = selected_rows(state, factors)?;
    let covs = xs
        .iter()
        .map(|x| gram(kernel, x))
        .collect::<Result<Vec<_>>>()?;
    let op = KroneckerOperator::from_covariances(&covs)?;
    let n = state.em.shape().size() as f64;
    let nmodes = xs.len();

    // A = Λ⁻¹ μ
    let alpha = op.apply_tensor(&state.em, |d| 1.0 / d)?;
    let quad = state.em.dot(&alpha);
    let log_det = op.log_det();

    // tr(Λ⁻¹ Υ) with Υ = ⊗Q0 · diag(δ0/(1+δ0)) · ⊗Q0ᵀ:
    //   = Σ_j D_j Π_k c_k[j_k],   c_k = diag(Q0_kᵀ Σ_k⁻¹ Q0_k)
    let inverses: Vec<DMatrix<f64>> = op.modes().iter().map(|e| e.inverse()).collect();
    let c: Vec<Vec<f64>> = op0
        .modes()
        .iter()
        .zip(&inverses)
        .map(|(e0, inv)| {
            let m = e0.vectors.transpose() * inv * &e0.vectors;
            m.diagonal().iter().copied().collect()
        })
        .collect();
    let upsilon_spectrum = op0.eigenvalue_grid().map(|d| d / (1.0 + d));
    let w0 = contract_except(&upsilon_spectrum, &c, 0)?;
    let trace: f64 = w0.iter().zip(&c[0]).map(|(w, c)| w * c).sum();

    let value = -0.5 * (quad + trace + log_det + n * LN_2PI);
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite local objective".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }

    let mut grads: Vec<DMatrix<f64>> = factors
        .matrices()
        .iter()
        .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
        .collect();
    for k in 0..nmodes {
        let inv = &inverses[k];
        let mk = inv.nrows() as f64;
        // ∂/∂Σ_k of -½ μᵀΛ⁻¹μ = ½ A_(k) (⊗_{l≠k} Σ_l) A_(k)ᵀ = ½ A_(k) μ_(k)ᵀ Σ_k⁻¹
        let mut g = mode_k_inner(&alpha, &state.em, k)? * inv * 0.5;
        g = (&g + g.transpose()) * 0.5;
        // -½ (m/m_k) log|Σ_k|
        g -= inv * (0.5 * n / mk);
        // -½ tr(Λ⁻¹Υ)
        let w = contract_except(&upsilon_spectrum, &c, k)?;
        let q0 = &op0.modes()[k].vectors;
        let mid = q0 * DMatrix::from_diagonal(&DVector::from_vec(w)) * q0.transpose();
        g += inv * mid * inv * 0.5;

        let gx = gram_vjp(kernel, &xs[k], &g)?;
        for (local, &row) in state.sel.mode(k).iter().enumerate() {
            for c in 0..gx.ncols() {
                grads[k][(row, c)] += gx[(local, c)];
            }
        }
    }
    Ok((value, Some(grads)))
}

/// `-1/(2 T λ) Σ_k |U_k - Ũ_k|²`
pub fn prior_term(group: &FactorSet, common: &FactorSet, lambda: f64, t_n: usize) -> f64 {
    -group.sq_distance(common) / (2.0 * t_n as f64 * lambda)
}

fn check_objective_args(lambda: f64, t_n: usize) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if t_n == 0 {
        return Err(Error::Config("group has no subarrays".into()));
    }
    Ok(())
}

/// Local objective `g_nt` at `factors`, with the subarray's q fixed.
pub fn local_objective(
    state: &SubarrayState,
    factors: &FactorSet,
    common: &FactorSet,
    t_n: usize,
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<f64> {
    check_objective_args(lambda, t_n)?;
    factors.check_compatible(common)?;
    let (lik, _) = expected_log_prior(state, factors, kernel, false)?;
    Ok(prior_term(factors, common, lambda, t_n) + lik)
}

/// Objective value and its gradient with respect to every entry of `factors`.
pub fn local_value_and_gradient(
    state: &SubarrayState,
    factors: &FactorSet,
    common: &FactorSet,
    t_n: usize,
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    check_objective_args(lambda, t_n)?;
    factors.check_compatible(common)?;
    let (lik, grads) = expected_log_prior(state, factors, kernel, true)?;
    let mut grads = grads.expect("gradient requested");
    let scale = 1.0 / (t_n as f64 * lambda);
    for (g, (u, ut)) in grads
        .iter_mut()
        .zip(common.matrices().iter().zip(factors.matrices()))
    {
        *g += (u - ut) * scale;
    }
    Ok((prior_term(factors, common, lambda, t_n) + lik, grads))
}

/// Gradient of [`local_objective`].
pub fn local_gradient(
    state: &SubarrayState,
    factors: &FactorSet,
    common: &FactorSet,
    t_n: usize,
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<Vec<DMatrix<f64>>> {
    Ok(local_value_and_gradient(state, factors, common, t_n, lambda, kernel)?.1)
}

/// A worker's share of the data: its subarray selections, its factors Ũₙ
/// and its random stream.
#[derive(Debug, Clone)]
pub struct GroupState {
    pub id: usize,
    pub subarrays: Vec<IndexSets>,
    pub factors: FactorSet,
    pub rng: ChaCha8Rng,
}

/// Objective and gradient magnitude observed during one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub grad_norm: f64,
}

/// One ascent step `Ũ ← Ũ + η ∂g_nt(Ũ)` on subarray `t` of the group,
/// preceded by a fresh E-step.
pub fn sgd_step(
    group: &mut GroupState,
    data: &SparseTensorCOO,
    t: usize,
    common: &FactorSet,
    params: &SgdParams,
) -> Result<StepStats> {
    let sel = group
        .subarrays
        .get(t)
        .ok_or_else(|| Error::Range(format!("subarray {t} not in group {}", group.id)))?
        .clone();
    let t_n = group.subarrays.len();
    let mut state = SubarrayState::new(data, sel)?;
    estep(&mut state, &group.factors, &params.kernel, params.estep_sweeps)?;
    let (objective, grads) = local_value_and_gradient(
        &state,
        &group.factors,
        common,
        t_n,
        params.lambda,
        &params.kernel,
    )?;
    let grad_norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient on subarray {t} of group {}",
            group.id
        )));
    }
    if params.eta != 0.0 {
        for (k, g) in grads.iter().enumerate() {
            *group.factors.mode_mut(k) += g * params.eta;
        }
    }
    Ok(StepStats {
        objective,
        grad_norm,
    })
}

/// Result of one pass of [`vb_sgd`].
#[derive(Debug, Clone)]
pub struct GroupResult {
    pub factors: FactorSet,
    pub steps: Vec<StepStats>,
}

/// One pass of stochastic variational EM over a group: shuffle the
/// subarrays, start from the common factors (unless `persist` keeps the
/// previous group factors), and take one ascent step per subarray.
pub fn vb_sgd(
    group: &mut GroupState,
    data: &SparseTensorCOO,
    common: &FactorSet,
    params: &SgdParams,
    persist: bool,
) -> Result<GroupResult> {
    params.validate()?;
    let role = FactorRole::Group(group.id);
    if group.subarrays.is_empty() {
        return Ok(GroupResult {
            factors: common.clone().with_role(role),
            steps: Vec::new(),
        });
    }
    let mut order: Vec<usize> = (0..group.subarrays.len()).collect();
    order.shuffle(&mut group.rng);
    if !persist || group.factors.check_compatible(common).is_err() {
        group.factors = common.clone().with_role(role);
    }
    let mut steps = Vec::with_capacity(order.len());
    for t in order {
        steps.push(sgd_step(group, data, t, common, params)?);
    }
    Ok(GroupResult {
        factors: group.factors.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::MaternOrder;
    use rand::{Rng, SeedableRng};

    fn random_factors(rng: &mut ChaCha8Rng, dims: &[usize], r: usize, scale: f64) -> FactorSet {
        FactorSet::new(
            dims.iter()
                .map(|&m| DMatrix::from_fn(m, r, |_, _| rng.random_range(-scale..scale)))
                .collect(),
            FactorRole::Common,
        )
        .unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, dims: &[usize], p: f64) -> SparseTensorCOO {
        let shape = Shape::new(dims.to_vec()).unwrap();
        let entries = (0..shape.size())
            .filter(|_| rng.random_bool(p))
            .map(|o| (shape.unravel(o), 1.0))
            .collect();
        SparseTensorCOO::new(shape, entries).unwrap()
    }

    fn dense_kron(covs: &[DMatrix<f64>]) -> DMatrix<f64> {
        covs.iter()
            .skip(1)
            .fold(covs[0].clone(), |acc, c| acc.kronecker(c))
    }

    #[test]
    fn estep_z_reference_values() {
        let root = (2.0 / std::f64::consts::PI).sqrt();
        assert!((estep_z(1.0, 0.0) - root).abs() < 1e-12);
        assert!((estep_z(0.0, 0.0) + root).abs() < 1e-12);
        assert!((estep_z(1.0, 10.0) - 10.0).abs() < 1e-6);
        for em in [-40.0, -6.5, -2.0, 0.0, 3.0, 40.0] {
            let up = estep_z(1.0, em);
            let down = estep_z(0.0, em);
            assert!(up.is_finite() && down.is_finite());
            assert!(up >= em && down <= em, "em={em}: {up} {down}");
        }
    }

    #[test]
    fn estep_m_identity_covariance() {
        let shape = Shape::new(vec![2, 3]).unwrap();
        let data = SparseTensorCOO::new(shape.clone(), vec![(vec![0, 1], 1.0)]).unwrap();
        let mut state = SubarrayState::new(&data, IndexSets::full(&shape)).unwrap();
        state.op = Some(
            KroneckerOperator::from_covariances(&[
                DMatrix::identity(2, 2),
                DMatrix::identity(3, 3),
            ])
            .unwrap(),
        );
        state.ez = DenseTensor::new(shape.clone(), vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        estep_m(&mut state).unwrap();
        for (m, z) in state.em.data().iter().zip(state.ez.data()) {
            assert!((m - z / 2.0).abs() < 1e-14);
        }
        assert!((state.trace_upsilon - 3.0).abs() < 1e-14);

        state.ez = DenseTensor::zeros(shape);
        estep_m(&mut state).unwrap();
        assert!(state.em.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estep_m_matches_dense_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let dims = [2, 2, 2];
        let data = random_data(&mut rng, &dims, 0.5);
        let factors = random_factors(&mut rng, &dims, 2, 1.0);
        let kernel = KernelSpec::rbf(1.0);
        let shape = data.shape().clone();
        let mut state = SubarrayState::new(&data, IndexSets::full(&shape)).unwrap();
        estep(&mut state, &factors, &kernel, 1).unwrap();

        let covs: Vec<_> = (0..3).map(|k| gram(&kernel, factors.mode(k)).unwrap()).collect();
        let lambda = dense_kron(&covs);
        let eye = DMatrix::identity(8, 8);
        let upsilon = &lambda * (&eye + &lambda).try_inverse().unwrap();
        let mu = &upsilon * DVector::from_row_slice(state.ez.data());
        for i in 0..8 {
            assert!((state.em.data()[i] - mu[i]).abs() < 1e-8);
        }
        let tr = (&eye + &lambda).try_inverse().unwrap().trace();
        assert!((state.trace_upsilon - tr).abs() < 1e-10);
        assert!((state.trace_lambda_inv_upsilon - state.trace_upsilon).abs() < 1e-10);
    }

    fn kernels() -> Vec<KernelSpec> {
        vec![
            KernelSpec::rbf(1.0),
            KernelSpec::linear().with_jitter(0.1),
            KernelSpec::polynomial(2, 1.0),
            KernelSpec::matern(MaternOrder::ThreeHalves, 1.0),
            KernelSpec::matern(MaternOrder::FiveHalves, 1.0),
        ]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for kernel in kernels() {
            let dims = [3, 3, 3];
            let data = random_data(&mut rng, &dims, 0.4);
            let common = random_factors(&mut rng, &dims, 2, 1.0);
            let mut factors = common.clone();
            for k in 0..3 {
                factors.mode_mut(k).iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            }
            let shape = data.shape().clone();
            let mut state = SubarrayState::new(&data, IndexSets::full(&shape)).unwrap();
            estep(&mut state, &factors, &kernel, 2).unwrap();
            let grads = local_gradient(&state, &factors, &common, 3, 0.5, &kernel).unwrap();
            for k in 0..3 {
                for idx in 0..factors.mode(k).len() {
                    let x = factors.mode(k)[idx];
                    let h = 1e-5 * (1.0 + x.abs());
                    let mut plus = factors.clone();
                    plus.mode_mut(k)[idx] = x + h;
                    let mut minus = factors.clone();
                    minus.mode_mut(k)[idx] = x - h;
                    let fp = local_objective(&state, &plus, &common, 3, 0.5, &kernel).unwrap();
                    let fm = local_objective(&state, &minus, &common, 3, 0.5, &kernel).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    let an = grads[k][idx];
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-4, "{kernel:?} mode {k} entry {idx}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn prior_term_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let u = random_factors(&mut rng, &[3, 4], 2, 1.0);
        let v = random_factors(&mut rng, &[3, 4], 2, 1.0);
        assert_eq!(prior_term(&u, &u, 1.0, 2), 0.0);
        let a = prior_term(&v, &u, 1.0, 2);
        let b = prior_term(&v, &u, 2.0, 2);
        assert!((a - 2.0 * b).abs() < 1e-14);
    }

    #[test]
    fn objective_rejects_bad_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let data = random_data(&mut rng, &[2, 2], 0.5);
        let u = random_factors(&mut rng, &[2, 2], 1, 1.0);
        let mut state = SubarrayState::new(&data, IndexSets::full(data.shape())).unwrap();
        estep(&mut state, &u, &KernelSpec::rbf(1.0), 1).unwrap();
        assert!(matches!(
            local_objective(&state, &u, &u, 1, 0.0, &KernelSpec::rbf(1.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn objective_with_identity_covariances_matches_dense() {
        // linear kernel on orthonormal rows gives Σ_k = I (up to jitter 0)
        let shape = Shape::new(vec![3, 3]).unwrap();
        let data = SparseTensorCOO::new(shape.clone(), vec![(vec![1, 2], 1.0)]).unwrap();
        let u = FactorSet::new(
            vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3)],
            FactorRole::Common,
        )
        .unwrap();
        let kernel = KernelSpec::linear().with_jitter(0.0);
        let mut state = SubarrayState::new(&data, IndexSets::full(&shape)).unwrap();
        estep(&mut state, &u, &kernel, 1).unwrap();
        let got = local_objective(&state, &u, &u, 1, 1.0, &kernel).unwrap();
        // Λ = I: μ = Ez/2, Υ = I/2
        let quad: f64 = state.em.norm_sq();
        let expect = -0.5 * (quad + 4.5 + 9.0 * LN_2PI);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let dims = [4, 4];
        let data = random_data(&mut rng, &dims, 0.3);
        let u = random_factors(&mut rng, &dims, 2, 0.5);
        let mut group = GroupState {
            id: 0,
            subarrays: vec![IndexSets::full(data.shape())],
            factors: u.clone(),
            rng: ChaCha8Rng::seed_from_u64(1),
        };
        let params = SgdParams {
            eta: 0.0,
            lambda: 1.0,
            kernel: KernelSpec::rbf(1.0),
            estep_sweeps: 1,
        };
        sgd_step(&mut group, &data, 0, &u, &params).unwrap();
        assert_eq!(group.factors.max_abs_diff(&u), 0.0);
    }

    #[test]
    fn empty_group_returns_common() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let data = random_data(&mut rng, &[3, 3], 0.3);
        let u = random_factors(&mut rng, &[3, 3], 2, 0.5);
        let mut group = GroupState {
            id: 4,
            subarrays: vec![],
            factors: u.clone(),
            rng: ChaCha8Rng::seed_from_u64(1),
        };
        let params = SgdParams {
            eta: 0.01,
            lambda: 1.0,
            kernel: KernelSpec::rbf(1.0),
            estep_sweeps: 1,
        };
        let out = vb_sgd(&mut group, &data, &u, &params, false).unwrap();
        assert_eq!(out.factors.max_abs_diff(&u), 0.0);
        assert_eq!(out.factors.role(), FactorRole::Group(4));
    }

    #[test]
    fn vb_sgd_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let dims = [6, 5, 4];
        let data = random_data(&mut rng, &dims, 0.3);
        let u = random_factors(&mut rng, &dims, 2, 0.5);
        let shape = data.shape().clone();
        let subs: Vec<_> = (0..5)
            .map(|_| crate::sampler::sample_uniform(&shape, &[3, 3, 2], &mut rng).unwrap())
            .collect();
        let params = SgdParams {
            eta: 0.01,
            lambda: 1.0,
            kernel: KernelSpec::rbf(1.0),
            estep_sweeps: 1,
        };
        let run = || {
            let mut g = GroupState {
                id: 0,
                subarrays: subs.clone(),
                factors: u.clone(),
                rng: ChaCha8Rng::seed_from_u64(9),
            };
            vb_sgd(&mut g, &data, &u, &params, false).unwrap().factors
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&u) > 0.0);
    }

    #[test]
    fn untouched_rows_move_only_by_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let dims = [6, 6];
        let data = random_data(&mut rng, &dims, 0.4);
        let u = random_factors(&mut rng, &dims, 2, 0.5);
        let shape = data.shape().clone();
        // rows 4 and 5 of mode 1 never selected
        let subs = vec![
            IndexSets::new(vec![vec![0, 1, 2], vec![0, 1, 2]], &shape).unwrap(),
            IndexSets::new(vec![vec![3, 1], vec![3, 4, 5]], &shape).unwrap(),
        ];
        let params = SgdParams {
            eta: 0.05,
            lambda: 0.5,
            kernel: KernelSpec::rbf(1.0),
            estep_sweeps: 1,
        };
        let mut g = GroupState {
            id: 0,
            subarrays: subs,
            factors: u.clone(),
            rng: ChaCha8Rng::seed_from_u64(3),
        };
        let out = vb_sgd(&mut g, &data, &u, &params, false).unwrap();
        // starting at U, the prior gradient is zero on rows never touched, and
        // stays zero because those rows never move
        for row in [4, 5] {
            for c in 0..2 {
                assert_eq!(out.factors.mode(0)[(row, c)], u.mode(0)[(row, c)]);
            }
        }
        assert!(out.factors.max_abs_diff(&u) > 0.0);
    }

    #[test]
    fn prior_gradient_is_scaled_difference() {
        // the likelihood part does not depend on λ, so the difference of two
        // gradients isolates the prior part (1/(Tλ)) (U - Ũ)
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let dims = [3, 4];
        let data = random_data(&mut rng, &dims, 0.4);
        let common = random_factors(&mut rng, &dims, 2, 0.5);
        let factors = random_factors(&mut rng, &dims, 2, 0.5);
        let kernel = KernelSpec::rbf(1.0);
        let mut state = SubarrayState::new(&data, IndexSets::full(data.shape())).unwrap();
        estep(&mut state, &factors, &kernel, 1).unwrap();
        let (t, l1, l2) = (3, 0.5, 2.0);
        let g1 = local_gradient(&state, &factors, &common, t, l1, &kernel).unwrap();
        let g2 = local_gradient(&state, &factors, &common, t, l2, &kernel).unwrap();
        for k in 0..2 {
            let expect =
                (common.mode(k) - factors.mode(k)) * ((1.0 / l1 - 1.0 / l2) / t as f64);
            assert!((&g1[k] - &g2[k] - expect).abs().max() < 1e-12);
        }
    }

    #[test]
    fn objective_rises_over_small_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let dims = [4, 4, 4];
        let data = random_data(&mut rng, &dims, 0.3);
        let u = random_factors(&mut rng, &dims, 2, 1.0);
        // a visible jitter keeps the Grams well conditioned, so a fixed
        // small step cannot overshoot
        let kernel = KernelSpec::rbf(1.0).with_jitter(0.1);
        let mut factors = u.clone();
        let mut state = SubarrayState::new(&data, IndexSets::full(data.shape())).unwrap();
        estep(&mut state, &factors, &kernel, 1).unwrap();
        // q fixed: plain gradient ascent on a smooth function
        let mut values = vec![local_objective(&state, &factors, &u, 1, 1.0, &kernel).unwrap()];
        for _ in 0..50 {
            let g = local_gradient(&state, &factors, &u, 1, 1.0, &kernel).unwrap();
            for (k, gk) in g.iter().enumerate() {
                *factors.mode_mut(k) += gk * 1e-3;
            }
            let cur = local_objective(&state, &factors, &u, 1, 1.0, &kernel).unwrap();
            values.push(cur);
        }
        assert!(values.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{values:?}");
        assert!(values[50] > values[0]);
    }
}
