//! Small numerical helpers: Gauss-Legendre rules, dense determinants,
//! error function, linear regression.

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
///
/// Newton iteration on the Legendre polynomial from the Chebyshev initial
/// guess; accurate to machine precision for the orders used here (< 200).
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative by recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Tanh-sinh (double-exponential) nodes and weights on `(0, 1)`.
///
/// Handles integrands that are smooth inside but flat to all orders at an
/// endpoint (the bump kernel's radial profile) with near-exponential
/// accuracy; `n` points per side, step `h`.
pub fn tanh_sinh(n: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let half_pi = 0.5 * std::f64::consts::PI;
    for j in -(n as i64)..=(n as i64) {
        let t = j as f64 * h;
        let s = t.sinh();
        let r = 0.5 * (1.0 + (half_pi * s).tanh());
        let w = half_pi * h * t.cosh() / (half_pi * s).cosh().powi(2) * 0.5;
        if r > 1e-300 && r < 1.0 && w > 1e-300 {
            nodes.push(r);
            weights.push(w);
        }
    }
    (nodes, weights)
}

/// Determinant of a dense row-major `n x n` matrix by LU with partial
/// pivoting. Returns the determinant together with a crude condition
/// estimate `max|pivot| / min|pivot|`.
pub fn lu_determinant(a: &[f64], n: usize) -> (f64, f64) {
    let mut m = a.to_vec();
    let mut det = 1.0;
    let mut max_piv = 0.0f64;
    let mut min_piv = f64::INFINITY;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            det = -det;
        }
        let p = m[col * n + col];
        if p == 0.0 {
            return (0.0, f64::INFINITY);
        }
        max_piv = max_piv.max(p.abs());
        min_piv = min_piv.min(p.abs());
        det *= p;
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
        }
    }
    (det, max_piv / min_piv)
}

/// Error function, Abramowitz-Stegun 7.1.26 rational approximation
/// (absolute error below 1.5e-7, ample for 3-sigma Monte Carlo gates).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Mean and standard error of a sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(5);
        // degree up to 2*5-1 = 9 is exact
        let int_x8: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(8)).sum();
        assert!((int_x8 - 2.0 / 9.0).abs() < 1e-14);
        let int_1: f64 = w.iter().sum();
        assert!((int_1 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn determinant_matches_hand_values() {
        let (d, _) = lu_determinant(&[1.0, 2.0, 3.0, 4.0], 2);
        assert!((d + 2.0).abs() < 1e-14);
        let (d3, cond) = lu_determinant(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0], 3);
        assert!((d3 - 24.0).abs() < 1e-12);
        assert!((cond - 2.0).abs() < 1e-12);
    }

    #[test]
    fn erf_reference_points() {
        // rational approximation: absolute error below 1.5e-7
        assert!((erf(0.0)).abs() < 2e-7);
        assert!((erf(1.0) - 0.8427007929).abs() < 2e-7);
        assert!((erf(-1.0) + 0.8427007929).abs() < 2e-7);
        assert!((erf(3.0) - 0.9999779095).abs() < 2e-7);
    }

    #[test]
    fn tanh_sinh_handles_flat_endpoints() {
        // int_0^1 exp(-1/(1-r^2)) r^2 dr, reference from a 200-point
        // Gauss-Legendre run.
        let (rs, ws) = tanh_sinh(80, 0.04);
        let got: f64 = rs
            .iter()
            .zip(&ws)
            .map(|(r, w)| w * r * r * (-1.0 / (1.0 - r * r)).exp())
            .sum();
        assert!((got - 3.5100738376487917e-2).abs() < 1e-13, "{got}");
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (s, i) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12);
    }
}
