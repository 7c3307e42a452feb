//! Built-in coefficient presets addressable by name from experiment
//! configs: `constant`, `linear`, `ou`, `rotation`, `example_sec6`,
//! `user_grid` (the latter loads from CSV, see `gridfield`).

use super::{
    CoefficientField, FieldDerivatives, FieldError, ScalarClosure, Singularity,
    VecClosure,
};
use std::sync::Arc;

fn vec_closure(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> VecClosure {
    Arc::new(move |x, out| {
        f(x, out);
        Ok(())
    })
}

fn zero_closure() -> VecClosure {
    Arc::new(|_x, out| {
        out.fill(0.0);
        Ok(())
    })
}

/// Constant drift `v` and constant diffusion matrix (row-major `d x m`).
pub fn constant_field(v: &[f64], sigma: &[f64], noise_dim: usize) -> Result<CoefficientField, FieldError> {
    let d = v.len();
    if sigma.len() != d * noise_dim {
        return Err(FieldError::Invalid(format!(
            "sigma needs {} entries for d={d}, m={noise_dim}, got {}",
            d * noise_dim,
            sigma.len()
        )));
    }
    let v = v.to_vec();
    let sig = sigma.to_vec();
    CoefficientField::new(
        "constant",
        d,
        noise_dim,
        vec_closure(move |_x, out| out.copy_from_slice(&v)),
        vec_closure(move |_x, out| out.copy_from_slice(&sig)),
        FieldDerivatives {
            grad_drift: Some(zero_closure()),
            div_drift: Some(Arc::new(|_| Ok(0.0))),
            grad_diffusion: Some(zero_closure()),
            div_diffusion: Some(zero_closure()),
            grad_div_diffusion: Some(zero_closure()),
        },
        vec![],
    )
}

/// Linear drift `b(x) = A x` with constant diffusion (row-major `d x m`).
pub fn linear_field(a: &[f64], sigma: &[f64], noise_dim: usize) -> Result<CoefficientField, FieldError> {
    let d2 = a.len();
    let d = (d2 as f64).sqrt().round() as usize;
    if d * d != d2 {
        return Err(FieldError::Invalid("A must be square".into()));
    }
    if sigma.len() != d * noise_dim {
        return Err(FieldError::Invalid("sigma size mismatch".into()));
    }
    let a_drift = a.to_vec();
    let a_grad = a.to_vec();
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let sig = sigma.to_vec();
    CoefficientField::new(
        "linear",
        d,
        noise_dim,
        vec_closure(move |x, out| {
            for i in 0..d {
                out[i] = (0..d).map(|j| a_drift[i * d + j] * x[j]).sum();
            }
        }),
        vec_closure(move |_x, out| out.copy_from_slice(&sig)),
        FieldDerivatives {
            grad_drift: Some(vec_closure(move |_x, out| out.copy_from_slice(&a_grad))),
            div_drift: Some(Arc::new(move |_| Ok(trace))),
            grad_diffusion: Some(zero_closure()),
            div_diffusion: Some(zero_closure()),
            grad_div_diffusion: Some(zero_closure()),
        },
        vec![],
    )
}

/// Ornstein-Uhlenbeck: `b(x) = -x`, `sigma = scale * I_d`. The default
/// `scale = sqrt(2)` makes the standard normal the stationary law.
pub fn ou_field(d: usize, scale: f64) -> Result<CoefficientField, FieldError> {
    let mut a = vec![0.0; d * d];
    let mut sig = vec![0.0; d * d];
    for i in 0..d {
        a[i * d + i] = -1.0;
        sig[i * d + i] = scale;
    }
    let mut f = linear_field(&a, &sig, d)?;
    f.name = "ou".into();
    Ok(f)
}

/// Planar rotation with radial pull: `b(x) = (-x2, x1) - pull * x`,
/// `sigma = noise * I_2`. Divergence-free for `pull = 0`.
pub fn rotation_field(pull: f64, noise: f64) -> Result<CoefficientField, FieldError> {
    let a = vec![-pull, -1.0, 1.0, -pull];
    let sig = vec![noise, 0.0, 0.0, noise];
    let mut f = linear_field(&a, &sig, 2)?;
    f.name = "rotation".into();
    Ok(f)
}

/// Minimal admissible drift strength for the singular radial example in
/// dimension `d`: `(4 d^2 + 5 d) / (d - 2)`.
pub fn sec6_min_beta(d: usize) -> f64 {
    ((4 * d * d + 5 * d) as f64) / ((d - 2) as f64)
}

/// The singular radial example: `b(x) = beta x / |x|^2`,
/// `sigma(x) = x (x)^T / |x|^2`, with a declared singularity at the origin.
/// Requires `d >= 3`.
pub fn singular_example_field(d: usize, beta: f64) -> Result<CoefficientField, FieldError> {
    example_field_impl(d, beta, 0.0, "example_sec6")
}

/// The explicit regularization of the singular example at level `n`:
/// `b_n(x) = beta x / (|x|^2 + 1/n)`, `sigma_n(x) = x (x)^T / (|x|^2 + 1/n)`,
/// with full analytic derivative data. Smooth, no singularities.
pub fn regularized_example_field(d: usize, beta: f64, n: u32) -> Result<CoefficientField, FieldError> {
    if n == 0 {
        return Err(FieldError::Invalid("regularization level must be >= 1".into()));
    }
    example_field_impl(d, beta, 1.0 / n as f64, &format!("example_sec6[n={n}]"))
}

fn example_field_impl(d: usize, beta: f64, c: f64, name: &str) -> Result<CoefficientField, FieldError> {
    if d < 3 {
        return Err(FieldError::Invalid(format!("the radial example needs d >= 3, got {d}")));
    }
    let m = d;

    let drift = vec_closure(move |x: &[f64], out: &mut [f64]| {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let denom = s + c;
        for i in 0..x.len() {
            out[i] = beta * x[i] / denom;
        }
    });
    let diffusion = vec_closure(move |x: &[f64], out: &mut [f64]| {
        let dd = x.len();
        let s: f64 = x.iter().map(|v| v * v).sum();
        let denom = s + c;
        for i in 0..dd {
            for l in 0..dd {
                out[i * dd + l] = x[i] * x[l] / denom;
            }
        }
    });

    // d_j b^i = beta (delta_ij D - 2 x^i x^j) / D^2
    let grad_drift = vec_closure(move |x: &[f64], out: &mut [f64]| {
        let dd = x.len();
        let s: f64 = x.iter().map(|v| v * v).sum();
        let dn = s + c;
        for i in 0..dd {
            for j in 0..dd {
                let kron = if i == j { dn } else { 0.0 };
                out[i * dd + j] = beta * (kron - 2.0 * x[i] * x[j]) / (dn * dn);
            }
        }
    });
    // div b = beta (d-2)/D + 2 beta c / D^2
    let df = d as f64;
    let div_drift: ScalarClosure = Arc::new(move |x: &[f64]| {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let dn = s + c;
        Ok(beta * (df - 2.0) / dn + 2.0 * beta * c / (dn * dn))
    });
    // d_j sigma^{il} = (delta_ij x^l + delta_jl x^i) / D - 2 x^j x^i x^l / D^2
    let grad_diffusion = vec_closure(move |x: &[f64], out: &mut [f64]| {
        let dd = x.len();
        let s: f64 = x.iter().map(|v| v * v).sum();
        let dn = s + c;
        for i in 0..dd {
            for j in 0..dd {
                for l in 0..dd {
                    let mut v = -2.0 * x[j] * x[i] * x[l] / (dn * dn);
                    if i == j {
                        v += x[l] / dn;
                    }
                    if j == l {
                        v += x[i] / dn;
                    }
                    out[(i * dd + j) * dd + l] = v;
                }
            }
        }
    });
    // div sigma^{.l} = x^l ((d-1)|x|^2 + (d+1) c) / D^2
    let div_diffusion = vec_closure(move |x: &[f64], out: &mut [f64]| {
        let dd = x.len();
        let ddf = dd as f64;
        let s: f64 = x.iter().map(|v| v * v).sum();
        let dn = s + c;
        let f = ((ddf - 1.0) * s + (ddf + 1.0) * c) / (dn * dn);
        for l in 0..dd {
            out[l] = x[l] * f;
        }
    });
    // d_i (div sigma^{.l}) = delta_il F + 2 x^i x^l F'
    // with F = ((d-1)s + (d+1)c)/D^2, F' = (d-1)/D^2 - 2((d-1)s+(d+1)c)/D^3.
    let grad_div_diffusion = vec_closure(move |x: &[f64], out: &mut [f64]| {
        let dd = x.len();
        let ddf = dd as f64;
        let s: f64 = x.iter().map(|v| v * v).sum();
        let dn = s + c;
        let num = (ddf - 1.0) * s + (ddf + 1.0) * c;
        let f = num / (dn * dn);
        let fp = (ddf - 1.0) / (dn * dn) - 2.0 * num / (dn * dn * dn);
        for i in 0..dd {
            for l in 0..dd {
                let kron = if i == l { f } else { 0.0 };
                out[i * dd + l] = kron + 2.0 * x[i] * x[l] * fp;
            }
        }
    });

    let singularities = if c == 0.0 {
        vec![Singularity { center: vec![0.0; d], radius: 0.0 }]
    } else {
        vec![]
    };

    CoefficientField::new(
        name,
        d,
        m,
        drift,
        diffusion,
        FieldDerivatives {
            grad_drift: Some(grad_drift),
            div_drift: Some(div_drift),
            grad_diffusion: Some(grad_diffusion),
            div_diffusion: Some(div_diffusion),
            grad_div_diffusion: Some(grad_div_diffusion),
        },
        singularities,
    )
}

/// Certificate for the singular example's structural bound.
///
/// The admissibility argument for the preset bounds each diffusion term of
/// the compression-rate expression by `const / (|x|^2 + 1/n)` and the drift
/// divergence from below by `beta (d-2) / (|x|^2 + 1/n)`, so the certified
/// upper bound of the expression is
///
/// ```text
///   (4 d^2 + 5 d - beta (d - 2)) / (|x|^2 + 1/n),
/// ```
///
/// which is nonpositive exactly when `beta >= (4 d^2 + 5 d) / (d - 2)`.
/// Below the threshold the certificate margin is strictly positive: the
/// termwise bound no longer certifies anything, even though the exact
/// expression may still be negative (the bound is sufficient, not sharp).
#[derive(Clone, Debug)]
pub struct Sec6Certificate {
    pub beta: f64,
    pub min_beta: f64,
    /// Sup over the grid of the positive part of the certified bound.
    pub margin_sup: f64,
    /// C1 induced by the certificate (equals `margin_sup`).
    pub c1_certified: f64,
    pub admissible: bool,
}

pub fn sec6_certificate(d: usize, beta: f64, n: u32, points: &[Vec<f64>]) -> Result<Sec6Certificate, FieldError> {
    if d < 3 {
        return Err(FieldError::Invalid(format!("the radial example needs d >= 3, got {d}")));
    }
    if n == 0 {
        return Err(FieldError::Invalid("regularization level must be >= 1".into()));
    }
    let c = 1.0 / n as f64;
    let min_beta = sec6_min_beta(d);
    let coeff = 4.0 * (d * d) as f64 + 5.0 * d as f64 - beta * (d as f64 - 2.0);
    let mut margin_sup = 0.0f64;
    for x in points {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let bound = coeff / (s + c);
        margin_sup = margin_sup.max(bound.max(0.0));
    }
    Ok(Sec6Certificate {
        beta,
        min_beta,
        margin_sup,
        c1_certified: margin_sup,
        admissible: beta >= min_beta,
    })
}
