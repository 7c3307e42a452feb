//! Grid-sup checks of the structural conditions a coefficient field must
//! satisfy for the flow construction: the compression-rate bound, the
//! coercivity inequality and the linear-growth inequality.
//!
//! All suprema are lattice approximations of essential suprema; reports
//! record how many points entered the scan.

use super::{CoefficientField, FieldError};
use crate::util::linear_fit;
use serde::Serialize;

/// Result of scanning the compression-rate expression
/// `-div b + 1/2 d_i sigma^{jl} d_j sigma^{il} + sigma^{il} d_i div sigma^{.l}
///  + (p/2) |div sigma|^2`
/// over a grid. Its positive-part sup is the constant `C1` controlling the
/// expected inverse-Jacobian moments and the density bound `K <= e^{C1 T}`.
#[derive(Clone, Debug, Serialize)]
pub struct CompressionRateReport {
    /// Sup of the positive part (the certified `C1`).
    pub c1: f64,
    /// Signed maximum of the expression over the grid.
    pub max_expression: f64,
    /// Point attaining the signed maximum.
    pub argmax: Vec<f64>,
    /// Moment order weighting the `|div sigma|^2` term (`p = 2` recovers
    /// the plain condition).
    pub moment_order: f64,
    pub points_evaluated: usize,
}

/// Compression-rate scan with the plain (`p = 2`) weight.
pub fn check_compression_rate(
    field: &CoefficientField,
    points: &[Vec<f64>],
) -> Result<CompressionRateReport, FieldError> {
    check_compression_rate_weighted(field, points, 2.0)
}

/// Compression-rate scan with the `p`-dependent weight `(p/2) |div sigma|^2`
/// (the moment checker computes its own sup instead of reusing the plain
/// `C1`, because for `p > 2` the weighted sup can exceed it).
pub fn check_compression_rate_weighted(
    field: &CoefficientField,
    points: &[Vec<f64>],
    p: f64,
) -> Result<CompressionRateReport, FieldError> {
    let mut max_expression = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    let mut evaluated = 0usize;
    for x in points {
        let div_b = field.div_drift(x)?;
        let dsds = field.diffusion_grad_contraction(x)?;
        let sgd = field.sigma_dot_grad_div_diffusion(x)?;
        let div_sig2 = field.div_diffusion_norm2(x)?;
        let expr = -div_b + 0.5 * dsds + sgd + 0.5 * p * div_sig2;
        evaluated += 1;
        if expr > max_expression {
            max_expression = expr;
            argmax = x.clone();
        }
    }
    if evaluated == 0 {
        return Err(FieldError::Invalid("empty grid".into()));
    }
    Ok(CompressionRateReport {
        c1: max_expression.max(0.0),
        max_expression,
        argmax,
        moment_order: p,
        points_evaluated: evaluated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum CoercivityOutcome {
    /// `<x, b> + |sigma|_HS^2 <= 0` on the whole grid.
    NonPositive,
    /// Fitted envelope `<x, b> + |sigma|_HS^2 <= -c1 |x|^2 + c2` with
    /// `c1 > 0`, tight on the grid.
    Fitted { c1: f64, c2: f64 },
    /// No decaying envelope exists on the grid (fitted slope
    /// nonnegative): the coercivity inequality fails.
    Failed { reason: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct CoercivityReport {
    pub outcome: CoercivityOutcome,
    /// Grid maximum of `<x, b(x)> + |sigma(x)|_HS^2`.
    pub max_value: f64,
    pub points_evaluated: usize,
}

/// Scan `g(x) = <x, b(x)> + |sigma(x)|_HS^2`. If `g <= 0` everywhere the
/// strong branch holds; otherwise fit the tightest decaying envelope
/// `-c1 |x|^2 + c2` by regressing `g` on `|x|^2` and lifting the intercept
/// until the inequality holds at every grid point.
pub fn check_coercivity(
    field: &CoefficientField,
    points: &[Vec<f64>],
) -> Result<CoercivityReport, FieldError> {
    let d = field.dim;
    let m = field.noise_dim;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    let mut g_vals = Vec::with_capacity(points.len());
    let mut r2_vals = Vec::with_capacity(points.len());
    for x in points {
        field.drift(x, &mut b)?;
        field.diffusion(x, &mut s)?;
        let inner: f64 = x.iter().zip(&b).map(|(a, c)| a * c).sum();
        let hs2: f64 = s.iter().map(|v| v * v).sum();
        g_vals.push(inner + hs2);
        r2_vals.push(crate::grid::norm2(x));
    }
    if g_vals.is_empty() {
        return Err(FieldError::Invalid("empty grid".into()));
    }
    let max_value = g_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let outcome = if max_value <= 1e-12 {
        CoercivityOutcome::NonPositive
    } else {
        let (slope, _) = linear_fit(&r2_vals, &g_vals);
        let c1 = -slope;
        if c1 <= 1e-12 {
            CoercivityOutcome::Failed {
                reason: format!(
                    "no decaying envelope: fitted slope {slope:.3e} is nonnegative \
                     (grid max of <x,b>+|sigma|^2 is {max_value:.3e})"
                ),
            }
        } else {
            let c2 = g_vals
                .iter()
                .zip(&r2_vals)
                .map(|(g, r2)| g + c1 * r2)
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            CoercivityOutcome::Fitted { c1, c2 }
        }
    };
    Ok(CoercivityReport { outcome, max_value, points_evaluated: g_vals.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    /// Smallest constant with `<x, b> + 2 |sigma|_HS^2 <= c2 (|x|^2 + 1)`
    /// over the grid.
    pub c2: f64,
    pub points_evaluated: usize,
}

/// Linear-growth inequality `<x, b_n(x)> + 2 |sigma_n(x)|_HS^2 <= C2 (|x|^2 + 1)`.
pub fn check_linear_growth(
    field: &CoefficientField,
    points: &[Vec<f64>],
) -> Result<GrowthReport, FieldError> {
    let d = field.dim;
    let m = field.noise_dim;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    let mut c2 = 0.0f64;
    let mut evaluated = 0usize;
    for x in points {
        field.drift(x, &mut b)?;
        field.diffusion(x, &mut s)?;
        let inner: f64 = x.iter().zip(&b).map(|(a, c)| a * c).sum();
        let hs2: f64 = s.iter().map(|v| v * v).sum();
        let ratio = (inner + 2.0 * hs2) / (crate::grid::norm2(x) + 1.0);
        c2 = c2.max(ratio);
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(FieldError::Invalid("empty grid".into()));
    }
    Ok(GrowthReport { c2, points_evaluated: evaluated })
}

#[derive(Clone, Debug, Serialize)]
pub struct SigmaDivergenceReport {
    /// Grid sup of `sup_{|z| <= 1} |sigma(x - z)|_HS * |grad div sigma|(x)`.
    pub sup: f64,
    pub points_evaluated: usize,
    pub points_skipped: usize,
}

/// Grid sup of the shifted-diffusion growth product. Informational only:
/// nothing downstream is gated on it.
pub fn check_sigma_divergence_product(
    field: &CoefficientField,
    points: &[Vec<f64>],
    shell_samples: usize,
) -> Result<SigmaDivergenceReport, FieldError> {
    let d = field.dim;
    let m = field.noise_dim;
    let mut s = vec![0.0; d * m];
    let mut gd = vec![0.0; d * m];
    let mut sup = 0.0f64;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    // Deterministic unit-ball sample offsets (low-discrepancy-ish radial shells).
    let mut offsets: Vec<Vec<f64>> = vec![vec![0.0; d]];
    let mut stream = crate::rng::CounterStream::new(0x5157, 7);
    for _ in 0..shell_samples.max(1) {
        let v: Vec<f64> = (0..d).map(|_| stream.next_normal()).collect();
        let r = stream.next_uniform().powf(1.0 / d as f64);
        let nv = crate::grid::norm(&v).max(1e-12);
        offsets.push(v.iter().map(|vi| vi / nv * r).collect());
    }
    for x in points {
        let gd_res = field.grad_div_diffusion(x, &mut gd);
        if gd_res.is_err() {
            skipped += 1;
            continue;
        }
        let gd_norm: f64 = gd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut sigma_sup = 0.0f64;
        let mut any = false;
        for z in &offsets {
            let y: Vec<f64> = x.iter().zip(z).map(|(a, b)| a - b).collect();
            if field.diffusion(&y, &mut s).is_ok() {
                any = true;
                sigma_sup = sigma_sup.max(s.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        if !any {
            skipped += 1;
            continue;
        }
        sup = sup.max(sigma_sup * gd_norm);
        evaluated += 1;
    }
    Ok(SigmaDivergenceReport { sup, points_evaluated: evaluated, points_skipped: skipped })
}
