//! Coefficient fields of the SDE `dX = b(X) dt + sigma(X) dW`.
//!
//! A [`CoefficientField`] bundles the drift `b : R^d -> R^d`, the diffusion
//! `sigma : R^d -> R^{d x m}`, optional analytic derivative data, and a
//! descriptor of declared singular points. Every derivative accessor falls
//! back to central finite differences of the base closures when no analytic
//! closure was supplied, so structural checks run on any evaluable field.
//!
//! Index conventions (repeated indices summed):
//! - `grad_drift[i*d + j]  = d_j b^i`
//! - `grad_diffusion[(i*d + j)*m + l] = d_j sigma^{il}`
//! - `div_diffusion[l] = d_i sigma^{il}`
//! - `grad_div_diffusion[i*m + l] = d_i (div sigma^{.l})`

mod checks;
mod gridfield;
mod mollifier;
mod presets;

pub use checks::{
    check_coercivity, check_compression_rate, check_compression_rate_weighted,
    check_linear_growth, check_sigma_divergence_product, CoercivityOutcome, CoercivityReport,
    CompressionRateReport, GrowthReport, SigmaDivergenceReport,
};
pub use gridfield::grid_field_from_csv;
pub use mollifier::{mollify, Mollifier};
pub use presets::{
    constant_field, linear_field, ou_field, regularized_example_field, rotation_field,
    sec6_certificate, singular_example_field, Sec6Certificate,
};

use std::sync::Arc;
use thiserror::Error;

/// Derivative queries closer than this to a declared singularity are
/// rejected instead of extrapolated.
pub const SINGULARITY_GUARD: f64 = 1e-8;

/// Relative step for finite-difference fallbacks (scaled by the local
/// magnitude of the evaluation point).
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("evaluation at {point:?} hit the singularity guard")]
    Singular { point: Vec<f64> },
    #[error("point outside the field's domain: {point:?}")]
    OutOfDomain { point: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("derivative data unavailable: {0}")]
    DerivativeUnavailable(String),
    #[error("invalid field construction: {0}")]
    Invalid(String),
}

/// Evaluation failure raised from inside a field closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalError {
    OutOfDomain,
    Singular,
}

pub type VecClosure = Arc<dyn Fn(&[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync>;
pub type ScalarClosure = Arc<dyn Fn(&[f64]) -> Result<f64, EvalError> + Send + Sync>;

/// A declared singular point of the coefficients together with the radius
/// of the region where they are undefined or non-differentiable.
#[derive(Clone, Debug)]
pub struct Singularity {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Optional analytic derivative closures. Any field left `None` is served
/// by finite differences of the base closures.
#[derive(Clone, Default)]
pub struct FieldDerivatives {
    pub grad_drift: Option<VecClosure>,
    pub div_drift: Option<ScalarClosure>,
    pub grad_diffusion: Option<VecClosure>,
    pub div_diffusion: Option<VecClosure>,
    pub grad_div_diffusion: Option<VecClosure>,
}

#[derive(Clone)]
pub struct CoefficientField {
    pub dim: usize,
    pub noise_dim: usize,
    pub name: String,
    drift: VecClosure,
    diffusion: VecClosure,
    derivs: FieldDerivatives,
    pub singularities: Vec<Singularity>,
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("singularities", &self.singularities.len())
            .finish()
    }
}

impl CoefficientField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        drift: VecClosure,
        diffusion: VecClosure,
        derivs: FieldDerivatives,
        singularities: Vec<Singularity>,
    ) -> Result<Self, FieldError> {
        if dim == 0 || noise_dim == 0 {
            return Err(FieldError::Invalid("dimensions must be positive".into()));
        }
        Ok(Self { dim, noise_dim, name: name.into(), drift, diffusion, derivs, singularities })
    }

    fn check_point(&self, x: &[f64]) -> Result<(), FieldError> {
        if x.len() != self.dim {
            return Err(FieldError::Dimension { expected: self.dim, got: x.len() });
        }
        for s in &self.singularities {
            let d2: f64 = x.iter().zip(&s.center).map(|(a, b)| (a - b) * (a - b)).sum();
            let guard = s.radius + SINGULARITY_GUARD;
            if d2 <= guard * guard {
                return Err(FieldError::Singular { point: x.to_vec() });
            }
        }
        Ok(())
    }

    /// True when `x` is inside the guard region of a declared singularity.
    pub fn near_singularity(&self, x: &[f64]) -> bool {
        self.singularities.iter().any(|s| {
            let d2: f64 = x.iter().zip(&s.center).map(|(a, b)| (a - b) * (a - b)).sum();
            let guard = s.radius + SINGULARITY_GUARD;
            d2 <= guard * guard
        })
    }

    fn lift(&self, x: &[f64], r: Result<(), EvalError>) -> Result<(), FieldError> {
        match r {
            Ok(()) => Ok(()),
            Err(EvalError::OutOfDomain) => Err(FieldError::OutOfDomain { point: x.to_vec() }),
            Err(EvalError::Singular) => Err(FieldError::Singular { point: x.to_vec() }),
        }
    }

    /// Drift `b(x)` into `out` (length `d`).
    pub fn drift(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(x)?;
        self.lift(x, (self.drift)(x, out))
    }

    /// Diffusion `sigma(x)` into `out` (row-major `d x m`).
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(x)?;
        self.lift(x, (self.diffusion)(x, out))
    }

    fn fd_step(&self, x: &[f64]) -> f64 {
        FD_STEP * crate::grid::norm(x).max(1.0)
    }

    /// Jacobian of the drift, `out[i*d + j] = d_j b^i`.
    pub fn grad_drift(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(x)?;
        if let Some(g) = &self.derivs.grad_drift {
            return self.lift(x, g(x, out));
        }
        let d = self.dim;
        let h = self.fd_step(x);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            xp[j] = x[j] + h;
            self.drift(&xp, &mut fp)?;
            xp[j] = x[j] - h;
            self.drift(&xp, &mut fm)?;
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(())
    }

    /// Divergence of the drift.
    pub fn div_drift(&self, x: &[f64]) -> Result<f64, FieldError> {
        self.check_point(x)?;
        if let Some(f) = &self.derivs.div_drift {
            return f(x).map_err(|e| match e {
                EvalError::OutOfDomain => FieldError::OutOfDomain { point: x.to_vec() },
                EvalError::Singular => FieldError::Singular { point: x.to_vec() },
            });
        }
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        self.grad_drift(x, &mut g)?;
        Ok((0..d).map(|i| g[i * d + i]).sum())
    }

    /// Diffusion gradient, `out[(i*d + j)*m + l] = d_j sigma^{il}`.
    pub fn grad_diffusion(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(x)?;
        if let Some(g) = &self.derivs.grad_diffusion {
            return self.lift(x, g(x, out));
        }
        let (d, m) = (self.dim, self.noise_dim);
        let h = self.fd_step(x);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d * m];
        let mut fm = vec![0.0; d * m];
        for j in 0..d {
            xp[j] = x[j] + h;
            self.diffusion(&xp, &mut fp)?;
            xp[j] = x[j] - h;
            self.diffusion(&xp, &mut fm)?;
            xp[j] = x[j];
            for i in 0..d {
                for l in 0..m {
                    out[(i * d + j) * m + l] = (fp[i * m + l] - fm[i * m + l]) / (2.0 * h);
                }
            }
        }
        Ok(())
    }

    /// `out[l] = div sigma^{.l} = d_i sigma^{il}`.
    pub fn div_diffusion(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(x)?;
        if let Some(f) = &self.derivs.div_diffusion {
            return self.lift(x, f(x, out));
        }
        let (d, m) = (self.dim, self.noise_dim);
        let mut g = vec![0.0; d * d * m];
        self.grad_diffusion(x, &mut g)?;
        for l in 0..m {
            out[l] = (0..d).map(|i| g[(i * d + i) * m + l]).sum();
        }
        Ok(())
    }

    /// `out[i*m + l] = d_i (div sigma^{.l})`.
    pub fn grad_div_diffusion(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        self.check_point(x)?;
        if let Some(f) = &self.derivs.grad_div_diffusion {
            return self.lift(x, f(x, out));
        }
        let (d, m) = (self.dim, self.noise_dim);
        // One finite-difference layer over div_diffusion; a slightly larger
        // step keeps the nested-FD roundoff in check when div_diffusion is
        // itself a fallback.
        let h = if self.derivs.div_diffusion.is_some() || self.derivs.grad_diffusion.is_some() {
            self.fd_step(x)
        } else {
            10.0 * self.fd_step(x)
        };
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for i in 0..d {
            xp[i] = x[i] + h;
            self.div_diffusion(&xp, &mut fp)?;
            xp[i] = x[i] - h;
            self.div_diffusion(&xp, &mut fm)?;
            xp[i] = x[i];
            for l in 0..m {
                out[i * m + l] = (fp[l] - fm[l]) / (2.0 * h);
            }
        }
        Ok(())
    }

    /// Contraction `d_i sigma^{jl} d_j sigma^{il}`.
    pub fn diffusion_grad_contraction(&self, x: &[f64]) -> Result<f64, FieldError> {
        let (d, m) = (self.dim, self.noise_dim);
        let mut g = vec![0.0; d * d * m];
        self.grad_diffusion(x, &mut g)?;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                for l in 0..m {
                    acc += g[(j * d + i) * m + l] * g[(i * d + j) * m + l];
                }
            }
        }
        Ok(acc)
    }

    /// Contraction `sigma^{il} d_i (div sigma^{.l})`.
    pub fn sigma_dot_grad_div_diffusion(&self, x: &[f64]) -> Result<f64, FieldError> {
        let (d, m) = (self.dim, self.noise_dim);
        let mut s = vec![0.0; d * m];
        self.diffusion(x, &mut s)?;
        let mut gd = vec![0.0; d * m];
        self.grad_div_diffusion(x, &mut gd)?;
        Ok(s.iter().zip(&gd).map(|(a, b)| a * b).sum())
    }

    /// Squared norm of the diffusion divergence vector, `sum_l (div sigma^{.l})^2`.
    pub fn div_diffusion_norm2(&self, x: &[f64]) -> Result<f64, FieldError> {
        let mut dv = vec![0.0; self.noise_dim];
        self.div_diffusion(x, &mut dv)?;
        Ok(dv.iter().map(|v| v * v).sum())
    }

    /// Vector `c^i = sigma^{jl} d_j sigma^{il}` appearing in the drift
    /// corrections.
    pub fn sigma_grad_sigma(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let (d, m) = (self.dim, self.noise_dim);
        let mut s = vec![0.0; d * m];
        self.diffusion(x, &mut s)?;
        let mut g = vec![0.0; d * d * m];
        self.grad_diffusion(x, &mut g)?;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                for l in 0..m {
                    acc += s[j * m + l] * g[(i * d + j) * m + l];
                }
            }
            out[i] = acc;
        }
        Ok(())
    }

    /// Transport drift `b_sigma = b - sigma^{jl} d_j sigma^{il}`.
    pub fn drift_sigma(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let d = self.dim;
        let mut c = vec![0.0; d];
        self.drift(x, out)?;
        self.sigma_grad_sigma(x, &mut c)?;
        for i in 0..d {
            out[i] -= c[i];
        }
        Ok(())
    }

    /// Stratonovich-corrected drift `b - (1/2) sigma^{jl} d_j sigma^{il}`.
    pub fn drift_tilde(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let d = self.dim;
        let mut c = vec![0.0; d];
        self.drift(x, out)?;
        self.sigma_grad_sigma(x, &mut c)?;
        for i in 0..d {
            out[i] -= 0.5 * c[i];
        }
        Ok(())
    }

    /// Whether the diffusion is constant in `x` (checked analytically for
    /// presets that declare zero gradients, otherwise sampled).
    pub fn has_constant_diffusion(&self, sample: &[f64]) -> bool {
        let (d, m) = (self.dim, self.noise_dim);
        let mut g = vec![0.0; d * d * m];
        if self.grad_diffusion(sample, &mut g).is_err() {
            return false;
        }
        g.iter().all(|v| v.abs() < 1e-12)
    }

    /// The field of the pathwise inverse flow: an SDE with drift
    /// `-b_sigma` and the same diffusion, integrated against the reversed
    /// path. Tracking the forward density formula along it reproduces the
    /// determinant of the inverse Jacobian.
    pub fn inverse_flow_field(&self) -> CoefficientField {
        let inner = self.clone();
        let d = self.dim;
        let drift: VecClosure = Arc::new(move |x: &[f64], out: &mut [f64]| {
            inner.drift_sigma(x, out).map_err(|e| match e {
                FieldError::OutOfDomain { .. } => EvalError::OutOfDomain,
                _ => EvalError::Singular,
            })?;
            for v in out.iter_mut() {
                *v = -*v;
            }
            Ok(())
        });
        let inner2 = self.clone();
        let diffusion: VecClosure = Arc::new(move |x: &[f64], out: &mut [f64]| {
            inner2.diffusion(x, out).map_err(|e| match e {
                FieldError::OutOfDomain { .. } => EvalError::OutOfDomain,
                _ => EvalError::Singular,
            })
        });
        // div(-b_sigma) = -div b + d_i sigma^{jl} d_j sigma^{il}
        //                + sigma^{il} d_i div sigma^{.l}
        let inner3 = self.clone();
        let div_drift: ScalarClosure = Arc::new(move |x: &[f64]| {
            let db = inner3.div_drift(x).map_err(|_| EvalError::Singular)?;
            let dsds = inner3.diffusion_grad_contraction(x).map_err(|_| EvalError::Singular)?;
            let sgd = inner3.sigma_dot_grad_div_diffusion(x).map_err(|_| EvalError::Singular)?;
            Ok(-db + dsds + sgd)
        });
        let inner4 = self.clone();
        let div_diffusion: VecClosure = Arc::new(move |x: &[f64], out: &mut [f64]| {
            inner4.div_diffusion(x, out).map_err(|_| EvalError::Singular)
        });
        let inner5 = self.clone();
        let grad_diffusion: VecClosure = Arc::new(move |x: &[f64], out: &mut [f64]| {
            inner5.grad_diffusion(x, out).map_err(|_| EvalError::Singular)
        });
        let inner6 = self.clone();
        let grad_div_diffusion: VecClosure = Arc::new(move |x: &[f64], out: &mut [f64]| {
            inner6.grad_div_diffusion(x, out).map_err(|_| EvalError::Singular)
        });
        CoefficientField {
            dim: d,
            noise_dim: self.noise_dim,
            name: format!("{}-inverse", self.name),
            drift,
            diffusion,
            derivs: FieldDerivatives {
                grad_drift: None,
                div_drift: Some(div_drift),
                grad_diffusion: Some(grad_diffusion),
                div_diffusion: Some(div_diffusion),
                grad_div_diffusion: Some(grad_div_diffusion),
            },
            singularities: self.singularities.clone(),
        }
    }

    /// Verify analytic derivative closures against central finite
    /// differences of the base fields at the given points (relative
    /// tolerance on the local scale). Points inside singularity guards are
    /// skipped.
    pub fn validate_derivatives(&self, points: &[Vec<f64>], rel_tol: f64) -> Result<(), FieldError> {
        let (d, m) = (self.dim, self.noise_dim);
        for x in points {
            if self.near_singularity(x) {
                continue;
            }
            let h = self.fd_step(x);
            if let Some(g) = &self.derivs.grad_drift {
                let mut got = vec![0.0; d * d];
                self.lift(x, g(x, &mut got))?;
                let mut xp = x.clone();
                let (mut fp, mut fm) = (vec![0.0; d], vec![0.0; d]);
                for j in 0..d {
                    xp[j] = x[j] + h;
                    self.drift(&xp, &mut fp)?;
                    xp[j] = x[j] - h;
                    self.drift(&xp, &mut fm)?;
                    xp[j] = x[j];
                    for i in 0..d {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        let scale = got[i * d + j].abs().max(fd.abs()).max(1.0);
                        if (got[i * d + j] - fd).abs() > rel_tol * scale {
                            return Err(FieldError::Invalid(format!(
                                "grad_drift[{i},{j}] at {x:?}: analytic {} vs fd {fd}",
                                got[i * d + j]
                            )));
                        }
                    }
                }
            }
            if let Some(g) = &self.derivs.grad_diffusion {
                let mut got = vec![0.0; d * d * m];
                self.lift(x, g(x, &mut got))?;
                let mut xp = x.clone();
                let (mut fp, mut fm) = (vec![0.0; d * m], vec![0.0; d * m]);
                for j in 0..d {
                    xp[j] = x[j] + h;
                    self.diffusion(&xp, &mut fp)?;
                    xp[j] = x[j] - h;
                    self.diffusion(&xp, &mut fm)?;
                    xp[j] = x[j];
                    for i in 0..d {
                        for l in 0..m {
                            let fd = (fp[i * m + l] - fm[i * m + l]) / (2.0 * h);
                            let got_v = got[(i * d + j) * m + l];
                            let scale = got_v.abs().max(fd.abs()).max(1.0);
                            if (got_v - fd).abs() > rel_tol * scale {
                                return Err(FieldError::Invalid(format!(
                                    "grad_diffusion[{i},{j},{l}] at {x:?}: analytic {got_v} vs fd {fd}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_fallbacks_match_analytic_on_linear_preset() {
        // Drift Ax with analytic data removed exercises every fallback.
        let a = vec![1.0, 2.0, 3.0, -4.0];
        let field = linear_field(&a, &[0.5, 0.1, 0.0, 0.25], 2).unwrap();
        let stripped = CoefficientField::new(
            "stripped",
            2,
            2,
            field.drift.clone(),
            field.diffusion.clone(),
            FieldDerivatives::default(),
            vec![],
        )
        .unwrap();
        let x = vec![0.3, -0.7];
        let mut g = vec![0.0; 4];
        stripped.grad_drift(&x, &mut g).unwrap();
        for (got, want) in g.iter().zip(&a) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
        assert!((stripped.div_drift(&x).unwrap() - (1.0 - 4.0)).abs() < 1e-7);
        assert!(stripped.diffusion_grad_contraction(&x).unwrap().abs() < 1e-9);
    }

    #[test]
    fn singularity_guard_rejects_nearby_points() {
        let field = singular_example_field(3, 51.0).unwrap();
        let mut out = vec![0.0; 3];
        assert!(matches!(
            field.drift(&[0.0, 0.0, 0.0], &mut out),
            Err(FieldError::Singular { .. })
        ));
        assert!(field.drift(&[1.0, 0.0, 0.0], &mut out).is_ok());
    }

    #[test]
    fn inverse_field_divergence_matches_exponent_identity() {
        // For the regularized example the inverse-flow divergence must equal
        // -div b + dsds + sigma.grad div sigma computed from the preset data.
        let f = regularized_example_field(3, 51.0, 4).unwrap();
        let inv = f.inverse_flow_field();
        let x = vec![0.8, -0.3, 1.1];
        let expect = -f.div_drift(&x).unwrap()
            + f.diffusion_grad_contraction(&x).unwrap()
            + f.sigma_dot_grad_div_diffusion(&x).unwrap();
        assert!((inv.div_drift(&x).unwrap() - expect).abs() < 1e-12);
    }
}
