//! Local maximal functions on lattices and the pointwise / integral
//! inequalities they control.
//!
//! `M_R f(x) = sup_{0 < r < R} avg_{B_r} |f(x + y)| dy`, discretized by a
//! log-spaced family of radii; the ball average of a radius is the plain
//! mean over the lattice nodes inside the ball, which keeps the
//! constant-function identity exact on interior nodes and converges to the
//! continuum average as the spacing shrinks.

use crate::grid::{norm, norm2, Lattice};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaximalError {
    #[error("radius {0} must exceed the lattice spacing {1}")]
    RadiusTooSmall(f64, f64),
    #[error("need at least 8 radii, got {0}")]
    TooFewRadii(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Scalar samples on a lattice.
#[derive(Clone, Debug)]
pub struct GridFunction {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(lattice: Lattice, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = lattice.iter_points().map(|x| f(x)).collect();
        Self { lattice, values }
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    /// CSV export: one row of node coordinates plus value.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.lattice.dim;
        writeln!(
            out,
            "{}",
            (0..d).map(|a| format!("x{a}")).chain(["f".into()]).collect::<Vec<_>>().join(",")
        )?;
        for (i, x) in self.lattice.iter_points().enumerate() {
            let coords: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{},{}", coords.join(","), self.values[i])?;
        }
        Ok(())
    }
}

/// The maximal function values together with boundary bookkeeping.
#[derive(Clone, Debug)]
pub struct MaximalFunction {
    pub values: Vec<f64>,
    /// Nodes whose largest ball exits the sampled box; their sup only ran
    /// over the radii fully inside.
    pub boundary_incomplete: Vec<bool>,
    pub radii: Vec<f64>,
}

/// Log-spaced radii in `(h, R]`.
pub fn log_radii(h: f64, r_max: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|j| h * (r_max / h).powf((j + 1) as f64 / count as f64))
        .collect()
}

/// Discrete local maximal function: at each node the max over the radius
/// family of ball averages of `|f|`.
///
/// Requires a full (unexcluded) lattice. Nodes whose `R`-ball leaves the
/// box are flagged `boundary_incomplete` and their value only reflects the
/// radii that fit.
pub fn maximal_function(
    f: &GridFunction,
    r_max: f64,
    radii_count: usize,
) -> Result<MaximalFunction, MaximalError> {
    let h = f.lattice.spacing;
    if !(r_max > h) {
        return Err(MaximalError::RadiusTooSmall(r_max, h));
    }
    if radii_count < 8 {
        return Err(MaximalError::TooFewRadii(radii_count));
    }
    maximal_function_with_radii(f, &log_radii(h, r_max, radii_count))
}

/// Maximal function over an explicit radius family (exact nested-family
/// comparisons need control over the radii).
///
/// One pass per node over the ball offsets sorted by distance, with an
/// average snapshot at each radius threshold, so dense radius families cost
/// almost nothing beyond the largest ball.
pub fn maximal_function_with_radii(
    f: &GridFunction,
    radii: &[f64],
) -> Result<MaximalFunction, MaximalError> {
    let lat = &f.lattice;
    let h = lat.spacing;
    if lat.exclude_center.is_some() {
        return Err(MaximalError::Invalid("maximal function needs a full lattice".into()));
    }
    let d = lat.dim;
    let r_max = radii.iter().cloned().fold(0.0, f64::max);
    let radii = radii.to_vec();
    let mut radii_sorted = radii.clone();
    radii_sorted.sort_by(f64::total_cmp);

    // Ball offsets in index space, sorted by distance.
    let reach = (r_max / h).floor() as i64;
    let mut offsets: Vec<(f64, Vec<i64>)> = Vec::new();
    let mut off = vec![-reach; d];
    'outer: loop {
        let dist2: f64 = off.iter().map(|&o| (o as f64 * h) * (o as f64 * h)).sum();
        if dist2 <= r_max * r_max {
            offsets.push((dist2, off.clone()));
        }
        let mut a = d;
        loop {
            if a == 0 {
                break 'outer;
            }
            a -= 1;
            off[a] += 1;
            if off[a] <= reach {
                break;
            }
            off[a] = -reach;
        }
    }
    offsets.sort_by(|a, b| a.0.total_cmp(&b.0));

    let counts = lat.counts.clone();
    let strides = {
        let mut s = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * counts[a + 1];
        }
        s
    };
    let n = lat.num_points();

    let results: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map(|node| {
            let mut rem = node;
            let mut idx = vec![0i64; d];
            for a in 0..d {
                idx[a] = (rem / strides[a]) as i64;
                rem %= strides[a];
            }
            let mut best = 0.0f64;
            let mut incomplete = false;
            let mut sum = 0.0f64;
            let mut count = 0usize;
            let mut out_of_box = 0usize;
            let mut next_offset = 0usize;
            for &r in &radii_sorted {
                let r2 = r * r;
                while next_offset < offsets.len() && offsets[next_offset].0 <= r2 {
                    let off = &offsets[next_offset].1;
                    let mut flat = 0usize;
                    let mut inside = true;
                    for a in 0..d {
                        let j = idx[a] + off[a];
                        if j < 0 || j >= counts[a] as i64 {
                            inside = false;
                            break;
                        }
                        flat += j as usize * strides[a];
                    }
                    if inside {
                        sum += f.values[flat].abs();
                        count += 1;
                    } else {
                        out_of_box += 1;
                    }
                    next_offset += 1;
                }
                if out_of_box > 0 {
                    incomplete = true;
                    continue;
                }
                if count > 0 {
                    let avg = sum / count as f64;
                    if avg > best {
                        best = avg;
                    }
                }
            }
            (best, incomplete)
        })
        .collect();

    Ok(MaximalFunction {
        values: results.iter().map(|r| r.0).collect(),
        boundary_incomplete: results.iter().map(|r| r.1).collect(),
        radii,
    })
}

/// Empirical constants of the pointwise difference bounds
/// `|f(x)-f(y)| <= C |x-y| (M_R |grad f|^q(x))^{1/q}` (`q > d`) and
/// `|f(x)-f(y)| <= C |x-y| (M_R |grad f|(x) + M_R |grad f|(y))`.
#[derive(Clone, Debug, Serialize)]
pub struct PointwiseBoundReport {
    /// Smallest constant observed for the single-point (`q`-power) form.
    pub c_single: f64,
    /// Smallest constant observed for the two-point form.
    pub c_two_point: f64,
    pub pairs_used: usize,
    pub pairs_excluded: usize,
    pub q: f64,
}

/// Scan node pairs with `|x - y| <= R`. `grad_norm` holds `|grad f|` at the
/// lattice nodes (analytic or finite differences, the caller chooses).
/// Pairs with an endpoint marked excluded (e.g. straddling a declared
/// singularity) are skipped and counted.
pub fn check_morrey_pointwise(
    f: &GridFunction,
    grad_norm: &GridFunction,
    q: f64,
    r_max: f64,
    pairs: &[(usize, usize)],
    excluded: &[bool],
) -> Result<PointwiseBoundReport, MaximalError> {
    let d = f.lattice.dim as f64;
    if q <= d {
        return Err(MaximalError::Invalid(format!("q = {q} must exceed d = {d}")));
    }
    let radii = 16;
    let mq = maximal_function(
        &GridFunction {
            lattice: grad_norm.lattice.clone(),
            values: grad_norm.values.iter().map(|g| g.abs().powf(q)).collect(),
        },
        r_max,
        radii,
    )?;
    let m1 = maximal_function(grad_norm, r_max, radii)?;

    let mut c_single = 0.0f64;
    let mut c_two = 0.0f64;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &(i, j) in pairs {
        if excluded.get(i).copied().unwrap_or(false) || excluded.get(j).copied().unwrap_or(false) {
            skipped += 1;
            continue;
        }
        // boundary-incomplete maximal values underestimate the sup
        if mq.boundary_incomplete[i] || m1.boundary_incomplete[i] || m1.boundary_incomplete[j] {
            skipped += 1;
            continue;
        }
        let xi = f.lattice.point(i);
        let xj = f.lattice.point(j);
        let dist = norm(&xi.iter().zip(xj).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist == 0.0 || dist > r_max {
            skipped += 1;
            continue;
        }
        let df = (f.values[i] - f.values[j]).abs();
        let single = mq.values[i].powf(1.0 / q);
        if single > 0.0 {
            c_single = c_single.max(df / (dist * single));
        } else if df > 0.0 {
            c_single = f64::INFINITY;
        }
        let two = m1.values[i] + m1.values[j];
        if two > 0.0 {
            c_two = c_two.max(df / (dist * two));
        } else if df > 0.0 {
            c_two = f64::INFINITY;
        }
        used += 1;
    }
    Ok(PointwiseBoundReport {
        c_single,
        c_two_point: c_two,
        pairs_used: used,
        pairs_excluded: skipped,
        q,
    })
}

/// Integral comparison `int_{B_N} M_R |f|` versus
/// `int_{B_{N+R}} |f| log(|f| + 1)`, across the scaling family
/// `lambda f, lambda in {1, 2, 4, 8}`.
#[derive(Clone, Debug, Serialize)]
pub struct LlogLReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Fitted affine coefficients of lhs against rhs over the family.
    pub slope: f64,
    pub intercept: f64,
}

pub fn check_llogl_bound(
    f: &GridFunction,
    n_ball: f64,
    r_max: f64,
) -> Result<LlogLReport, MaximalError> {
    let lambdas = vec![1.0, 2.0, 4.0, 8.0];
    let mf = maximal_function(f, r_max, 16)?;
    let lat = &f.lattice;
    let cell = lat.cell_mass();
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    for &lam in &lambdas {
        let mut left = 0.0;
        let mut right = 0.0;
        for (i, x) in lat.iter_points().enumerate() {
            let r2 = norm2(x);
            if r2 <= n_ball * n_ball {
                left += lam * mf.values[i] * cell;
            }
            if r2 <= (n_ball + r_max) * (n_ball + r_max) {
                let v = lam * f.values[i].abs();
                right += v * (v + 1.0).ln() * cell;
            }
        }
        lhs.push(left);
        rhs.push(right);
    }
    let (slope, intercept) = crate::util::linear_fit(&rhs, &lhs);
    Ok(LlogLReport { lhs, rhs, lambdas, slope, intercept })
}

/// Ratio `(int_{B_N} (M_R |f|)^p)^{1/p} / (int_{B_{N+R}} |f|^p)^{1/p}`,
/// exactly invariant under `f -> lambda f`.
#[derive(Clone, Debug, Serialize)]
pub struct LpBoundReport {
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub p: f64,
}

pub fn check_lp_bound(
    f: &GridFunction,
    p: f64,
    n_ball: f64,
    r_max: f64,
) -> Result<LpBoundReport, MaximalError> {
    if p <= 1.0 {
        return Err(MaximalError::Invalid(format!("p = {p} must exceed 1")));
    }
    let mf = maximal_function(f, r_max, 16)?;
    let lat = &f.lattice;
    let cell = lat.cell_mass();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, x) in lat.iter_points().enumerate() {
        let r2 = norm2(x);
        if r2 <= n_ball * n_ball {
            num += mf.values[i].powf(p) * cell;
        }
        if r2 <= (n_ball + r_max) * (n_ball + r_max) {
            den += f.values[i].abs().powf(p) * cell;
        }
    }
    let ratio = num.powf(1.0 / p) / den.powf(1.0 / p);
    Ok(LpBoundReport { ratio, numerator: num.powf(1.0 / p), denominator: den.powf(1.0 / p), p })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat1d(lo: f64, hi: f64, n: usize) -> Lattice {
        Lattice::over_box(&[(lo, hi)], n).unwrap()
    }

    #[test]
    fn constants_are_fixed_points_on_interior_nodes() {
        let lat = Lattice::over_box(&[(-3.0, 3.0), (-3.0, 3.0)], 61).unwrap();
        let f = GridFunction::from_fn(lat, |_| 2.5);
        let mf = maximal_function(&f, 1.0, 12).unwrap();
        for (i, (v, inc)) in mf.values.iter().zip(&mf.boundary_incomplete).enumerate() {
            if !inc {
                assert_eq!(*v, 2.5, "node {i}");
            }
        }
        assert!(mf.boundary_incomplete.iter().any(|b| !b));
    }

    #[test]
    fn worked_interval_indicator_value() {
        // d = 1, f = 1_{[0,1]}, x = 2, R = 3: ball average (r-1)/(2r) for
        // 1 < r <= 2 and 1/(2r) beyond, sup = 1/4 at r = 2.
        let lat = lat1d(-6.0, 6.0, 4801); // h = 0.0025
        let f = GridFunction::from_fn(lat.clone(), |x| {
            if x[0] >= 0.0 && x[0] <= 1.0 {
                1.0
            } else {
                0.0
            }
        });
        let mf = maximal_function(&f, 3.0, 320).unwrap();
        let node = lat.iter_points().position(|x| (x[0] - 2.0).abs() < 1e-9).unwrap();
        // dense-radii brute force at 10x the radii resolution
        let brute = maximal_function(&f, 3.0, 3200).unwrap();
        assert!(
            (mf.values[node] - brute.values[node]).abs() / brute.values[node] < 0.01,
            "{} vs brute {}",
            mf.values[node],
            brute.values[node]
        );
        assert!((brute.values[node] - 0.25).abs() < 0.01, "brute {}", brute.values[node]);
    }

    #[test]
    fn pointwise_monotonicity_in_the_function_and_radius() {
        let lat = Lattice::over_box(&[(-2.0, 2.0), (-2.0, 2.0)], 41).unwrap();
        let f = GridFunction::from_fn(lat.clone(), |x| (x[0] * x[1]).abs() + 0.3);
        let g = GridFunction::from_fn(lat.clone(), |x| (x[0] * x[1]).abs());
        let mf = maximal_function(&f, 1.0, 12).unwrap();
        let mg = maximal_function(&g, 1.0, 12).unwrap();
        for i in 0..f.values.len() {
            assert!(mf.values[i] >= mg.values[i], "f >= g must give M f >= M g");
        }
        // radius monotonicity: exact over nested radius families
        let small = log_radii(f.lattice.spacing, 0.5, 16);
        let mut large = small.clone();
        large.extend(log_radii(0.5, 1.0, 8));
        let m_small = maximal_function_with_radii(&f, &small).unwrap();
        let m_large = maximal_function_with_radii(&f, &large).unwrap();
        for i in 0..f.values.len() {
            if !m_large.boundary_incomplete[i] && !m_small.boundary_incomplete[i] {
                assert!(
                    m_large.values[i] >= m_small.values[i],
                    "radius monotonicity at {i}: {} vs {}",
                    m_large.values[i],
                    m_small.values[i]
                );
            }
        }
    }

    #[test]
    fn sublinearity_and_scaling_are_exact() {
        let lat = Lattice::over_box(&[(-2.0, 2.0), (-2.0, 2.0)], 41).unwrap();
        let f = GridFunction::from_fn(lat.clone(), |x| x[0].sin() + 0.2 * x[1]);
        let g = GridFunction::from_fn(lat.clone(), |x| (x[0] - x[1]).cos());
        let sum = GridFunction {
            lattice: lat.clone(),
            values: f.values.iter().zip(&g.values).map(|(a, b)| a + b).collect(),
        };
        let (mf, mg, ms) = (
            maximal_function(&f, 0.8, 12).unwrap(),
            maximal_function(&g, 0.8, 12).unwrap(),
            maximal_function(&sum, 0.8, 12).unwrap(),
        );
        for i in 0..f.values.len() {
            assert!(ms.values[i] <= mf.values[i] + mg.values[i] + 1e-12);
        }
        // power-of-two scalings commute bitwise, generic ones to roundoff
        let scaled4 = GridFunction {
            lattice: lat.clone(),
            values: f.values.iter().map(|v| 4.0 * v).collect(),
        };
        let msc4 = maximal_function(&scaled4, 0.8, 12).unwrap();
        for i in 0..f.values.len() {
            assert_eq!(msc4.values[i], 4.0 * mf.values[i]);
        }
        let scaled3 = GridFunction {
            lattice: lat.clone(),
            values: f.values.iter().map(|v| 3.0 * v).collect(),
        };
        let msc3 = maximal_function(&scaled3, 0.8, 12).unwrap();
        for i in 0..f.values.len() {
            assert!((msc3.values[i] - 3.0 * mf.values[i]).abs() <= 1e-12 * msc3.values[i].abs());
        }
    }

    #[test]
    fn linear_functions_give_unit_morrey_constant() {
        let lat = Lattice::over_box(&[(-2.0, 2.0), (-2.0, 2.0)], 41).unwrap();
        let v = [0.8, -0.6];
        let f = GridFunction::from_fn(lat.clone(), |x| v[0] * x[0] + v[1] * x[1]);
        let grad = GridFunction::from_fn(lat.clone(), |_| (v[0] * v[0] + v[1] * v[1]).sqrt());
        let n = lat.num_points();
        let mut pairs = Vec::new();
        for i in (0..n).step_by(7) {
            for j in (0..n).step_by(11) {
                pairs.push((i, j));
            }
        }
        let rep = check_morrey_pointwise(&f, &grad, 3.0, 1.0, &pairs, &vec![false; n]).unwrap();
        // |f(x)-f(y)| = |v . (x-y)| <= |v| |x-y| with M|grad f| = |v|
        assert!(rep.c_single <= 1.0 + 1e-9, "c = {}", rep.c_single);
        assert!(rep.c_two_point <= 0.5 + 1e-9);
        assert!(rep.pairs_used > 0);

        // constants: zero difference, zero constant
        let c = GridFunction::from_fn(lat.clone(), |_| 4.0);
        let zero_grad = GridFunction::from_fn(lat.clone(), |_| 0.0);
        let rep =
            check_morrey_pointwise(&c, &zero_grad, 3.0, 1.0, &pairs, &vec![false; n]).unwrap();
        assert_eq!(rep.c_single, 0.0);
        assert_eq!(rep.c_two_point, 0.0);
    }

    #[test]
    fn radial_kink_on_an_annulus_has_stable_constant() {
        // f(x) = |x| on 0.5 <= |x| <= 2 with q = 3: finite constant, stable
        // within 10% under grid refinement.
        let mut cs = Vec::new();
        for per_axis in [41usize, 81] {
            let lat = Lattice::over_box(&[(-2.5, 2.5), (-2.5, 2.5)], per_axis).unwrap();
            let f = GridFunction::from_fn(lat.clone(), |x| norm(x));
            let grad = GridFunction::from_fn(lat.clone(), |_| 1.0);
            let n = lat.num_points();
            let annulus: Vec<usize> = (0..n)
                .filter(|&i| {
                    let r = norm(lat.point(i));
                    (0.5..=2.0).contains(&r)
                })
                .collect();
            let mut pairs = Vec::new();
            for (a, &i) in annulus.iter().enumerate().step_by(5) {
                for &j in annulus.iter().skip(a).step_by(9) {
                    pairs.push((i, j));
                }
            }
            let rep = check_morrey_pointwise(&f, &grad, 3.0, 1.0, &pairs, &vec![false; n]).unwrap();
            assert!(rep.c_single.is_finite());
            cs.push(rep.c_single);
        }
        let rel = (cs[0] - cs[1]).abs() / cs[1];
        assert!(rel < 0.1, "constants {cs:?} differ by {rel}");
    }

    #[test]
    fn llogl_comparison_trivial_and_refined() {
        let lat = Lattice::over_box(&[(-2.0, 2.0), (-2.0, 2.0)], 25).unwrap();
        let zero = GridFunction::from_fn(lat.clone(), |_| 0.0);
        let rep = check_llogl_bound(&zero, 1.0, 0.5).unwrap();
        assert!(rep.lhs.iter().all(|v| *v == 0.0));
        assert!(rep.rhs.iter().all(|v| *v == 0.0));

        let one = GridFunction::from_fn(lat.clone(), |_| 1.0);
        let rep = check_llogl_bound(&one, 1.0, 0.5).unwrap();
        // lhs ~ |B_1| = pi, rhs ~ |B_1.5| log 2 at lambda = 1
        assert!(rep.lhs[0] > 0.0 && rep.rhs[0] > 0.0);
        assert!((rep.lhs[0] / std::f64::consts::PI - 1.0).abs() < 0.2);

        // integrable singular profile: both sides finite and stable under
        // doubling the resolution
        let mut vals = Vec::new();
        for per_axis in [81usize, 161] {
            let lat = Lattice::over_box(&[(-2.0, 2.0), (-2.0, 2.0)], per_axis).unwrap();
            let f = GridFunction::from_fn(lat.clone(), |x| {
                let r = norm(x).max(0.1);
                r.powf(-1.5)
            });
            let rep = check_llogl_bound(&f, 1.0, 0.5).unwrap();
            vals.push((rep.lhs[0], rep.rhs[0]));
        }
        let (l0, r0) = vals[0];
        let (l1, r1) = vals[1];
        assert!((l0 - l1).abs() / l1 < 0.05, "lhs {l0} vs {l1}");
        assert!((r0 - r1).abs() / r1 < 0.05, "rhs {r0} vs {r1}");
    }

    #[test]
    fn lp_ratio_scales_exactly_and_matches_brute_force() {
        let lat = lat1d(-4.0, 4.0, 801);
        let f = GridFunction::from_fn(lat.clone(), |x| {
            if x[0] >= 0.0 && x[0] <= 1.0 {
                1.0
            } else {
                0.0
            }
        });
        let rep = check_lp_bound(&f, 2.0, 2.0, 1.0).unwrap();
        let scaled = GridFunction {
            lattice: lat.clone(),
            values: f.values.iter().map(|v| 7.0 * v).collect(),
        };
        let rep_s = check_lp_bound(&scaled, 2.0, 2.0, 1.0).unwrap();
        assert!(
            (rep.ratio - rep_s.ratio).abs() <= 1e-12 * rep.ratio,
            "{} vs {}",
            rep.ratio,
            rep_s.ratio
        );

        // 10x-resolution brute force within 2%
        let fine = lat1d(-4.0, 4.0, 8001);
        let ff = GridFunction::from_fn(fine, |x| {
            if x[0] >= 0.0 && x[0] <= 1.0 {
                1.0
            } else {
                0.0
            }
        });
        let rep_fine = check_lp_bound(&ff, 2.0, 2.0, 1.0).unwrap();
        assert!(
            (rep.ratio - rep_fine.ratio).abs() / rep_fine.ratio < 0.02,
            "{} vs {}",
            rep.ratio,
            rep_fine.ratio
        );

        // constants: ratio below one by the volume comparison
        let one = GridFunction::from_fn(lat1d(-4.0, 4.0, 801), |_| 1.0);
        let rep_one = check_lp_bound(&one, 2.0, 2.0, 1.0).unwrap();
        assert!(rep_one.ratio < 1.0);
    }
}
