//! Covariance functions over latent factor rows.
//!
//! Every family is available in three forms: the Gram matrix, its
//! directional derivative along a perturbation of the inputs, and the
//! adjoint of that derivative ([`gram_vjp`]), which is what the gradient of
//! the training objective needs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternOrder {
    ThreeHalves,
    FiveHalves,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    /// `v * x·y`
    Linear,
    /// `v * exp(-|x-y|^2 / (2 l^2))`
    Rbf,
    /// `v * (x·y + bias)^degree`
    Polynomial { degree: u32, bias: f64 },
    /// Matérn with smoothness 3/2 or 5/2.
    Matern(MaternOrder),
}

/// Kernel family plus its scale parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub variance: f64,
    /// Added to the Gram diagonal. `None` means `1e-6 * variance`.
    pub jitter: Option<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> KernelSpec {
        KernelSpec {
            family,
            lengthscale: 1.0,
            variance: 1.0,
            jitter: None,
        }
    }

    pub fn linear() -> KernelSpec {
        KernelSpec::new(KernelFamily::Linear)
    }

    pub fn rbf(lengthscale: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Rbf).with_lengthscale(lengthscale)
    }

    pub fn polynomial(degree: u32, bias: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Polynomial { degree, bias })
    }

    pub fn matern(order: MaternOrder, lengthscale: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Matern(order)).with_lengthscale(lengthscale)
    }

    pub fn with_lengthscale(mut self, lengthscale: f64) -> KernelSpec {
        self.lengthscale = lengthscale;
        self
    }

    pub fn with_variance(mut self, variance: f64) -> KernelSpec {
        self.variance = variance;
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> KernelSpec {
        self.jitter = Some(jitter);
        self
    }

    pub fn effective_jitter(&self) -> f64 {
        self.jitter.unwrap_or(1e-6 * self.variance)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("kernel {name} must be positive, got {v}")))
            }
        };
        positive("variance", self.variance)?;
        match self.family {
            KernelFamily::Rbf | KernelFamily::Matern(_) => positive("lengthscale", self.lengthscale)?,
            KernelFamily::Polynomial { degree, bias } => {
                if degree == 0 {
                    return Err(Error::Config("polynomial degree must be at least 1".into()));
                }
                if !(bias.is_finite() && bias >= 0.0) {
                    return Err(Error::Config(format!(
                        "polynomial bias must be nonnegative, got {bias}"
                    )));
                }
            }
            KernelFamily::Linear => {}
        }
        let j = self.effective_jitter();
        if !(j.is_finite() && j >= 0.0) {
            return Err(Error::Config(format!("jitter must be nonnegative, got {j}")));
        }
        Ok(())
    }

    /// Kernel value `k(x, y)` without jitter.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let v = self.variance;
        match self.family {
            KernelFamily::Linear => v * dot(x, y),
            KernelFamily::Polynomial { degree, bias } => v * (dot(x, y) + bias).powi(degree as i32),
            KernelFamily::Rbf => {
                v * (-sq_dist(x, y) / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
            KernelFamily::Matern(order) => {
                let d = sq_dist(x, y).sqrt();
                match order {
                    MaternOrder::ThreeHalves => {
                        let a = 3f64.sqrt() * d / self.lengthscale;
                        v * (1.0 + a) * (-a).exp()
                    }
                    MaternOrder::FiveHalves => {
                        let a = 5f64.sqrt() * d / self.lengthscale;
                        v * (1.0 + a + a * a / 3.0) * (-a).exp()
                    }
                }
            }
        }
    }

    /// Accumulates `scale * ∂k(x, y)/∂x` into `out`.
    fn add_grad_first(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        let v = self.variance;
        let l2 = self.lengthscale * self.lengthscale;
        match self.family {
            KernelFamily::Linear => axpy(scale * v, y, out),
            KernelFamily::Polynomial { degree, bias } => {
                let p = degree as i32;
                let c = v * p as f64 * (dot(x, y) + bias).powi(p - 1);
                axpy(scale * c, y, out);
            }
            KernelFamily::Rbf => {
                let k = v * (-sq_dist(x, y) / (2.0 * l2)).exp();
                axpy_diff(-scale * k / l2, x, y, out);
            }
            KernelFamily::Matern(order) => {
                let d = sq_dist(x, y).sqrt();
                let c = match order {
                    MaternOrder::ThreeHalves => {
                        let a = 3f64.sqrt() * d / self.lengthscale;
                        -v * 3.0 / l2 * (-a).exp()
                    }
                    MaternOrder::FiveHalves => {
                        let a = 5f64.sqrt() * d / self.lengthscale;
                        -v * 5.0 / (3.0 * l2) * (1.0 + a) * (-a).exp()
                    }
                };
                axpy_diff(scale * c, x, y, out);
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn axpy(a: f64, x: &[f64], out: &mut [f64]) {
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// `out += a * (x - y)`
fn axpy_diff(a: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o += a * (xi - yi);
    }
}

fn rows(x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite kernel input".into()));
    }
    Ok(x.row_iter().map(|r| r.iter().copied().collect()).collect())
}

/// Gram matrix `k(X, X) + jitter * I` over the rows of `x`.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let pts = rows(x)?;
    let n = pts.len();
    let jitter = spec.effective_jitter();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(&pts[i], &pts[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += jitter;
    }
    Ok(k)
}

/// Directional derivative of [`gram`] at `x` along `dx`.
pub fn gram_directional_grad(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    dx: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if x.shape() != dx.shape() {
        return Err(Error::Shape(format!(
            "direction {:?} does not match inputs {:?}",
            dx.shape(),
            x.shape()
        )));
    }
    let pts = rows(x)?;
    let dirs = rows(dx)?;
    let n = pts.len();
    let r = x.ncols();
    let mut out = DMatrix::zeros(n, n);
    let mut g = vec![0.0; r];
    for i in 0..n {
        for j in 0..=i {
            g.iter_mut().for_each(|v| *v = 0.0);
            spec.add_grad_first(&pts[i], &pts[j], 1.0, &mut g);
            let mut v = dot(&g, &dirs[i]);
            g.iter_mut().for_each(|v| *v = 0.0);
            spec.add_grad_first(&pts[j], &pts[i], 1.0, &mut g);
            v += dot(&g, &dirs[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Adjoint of the Gram derivative: the gradient of `sum_ij G_ij K_ij(X)`
/// with respect to `X`.
pub fn gram_vjp(spec: &KernelSpec, x: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = x.nrows();
    if g.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "cotangent {:?} does not match a {n}x{n} Gram",
            g.shape()
        )));
    }
    let pts = rows(x)?;
    let r = x.ncols();
    let mut out = DMatrix::zeros(n, r);
    let mut acc = vec![0.0; r];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let w = g[(i, j)] + g[(j, i)];
            if w != 0.0 {
                spec.add_grad_first(&pts[i], &pts[j], w, &mut acc);
            }
        }
        for (c, &v) in acc.iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}
