//! Log-distance stability functional between two flows under the same
//! Brownian path, the Chebyshev conversion of its bound into a sup-distance
//! integral, and the Cauchy convergence diagnostic across regularization
//! levels.
//!
//! The central quantity for flows `X` and `X^` sharing a noise bundle is
//!
//! ```text
//!   xi^delta = h^d sum_{x_i in B_N cap G_T^R} log(Phi(x_i)/delta^2 + 1),
//!   Phi(x)   = sup_{t <= T} |X_t(x) - X^_t(x)|^2,
//! ```
//!
//! with `G_T^R` the particles whose whole paths (both flows) stay inside
//! the radius-`R` ball. A `delta`-uniform bound on `xi^delta` forces the
//! two flows to coincide on most of `B_N`, which is what the uniqueness
//! diagnostic measures.

use crate::coeff::CoefficientField;
use crate::flow::{FlowEnsemble, FlowError, IntegrateOpts, ParticleStatus, Scheme};
use crate::grid::{norm2, unit_ball_volume, Lattice};
use crate::noise::NoiseBundle;
use rayon::prelude::*;
use serde::Serialize;

/// Pathwise sup-distance data of two flows advanced in lockstep on the same
/// increments (sup over every step, no snapshot storage).
#[derive(Clone, Debug)]
pub struct PairwiseSup {
    /// `sup_t |X_t - X^_t|^2` per particle.
    pub phi: Vec<f64>,
    /// Whole-path radius sup of the larger of the two flows, per particle.
    pub sup_radius: Vec<f64>,
    /// Both particles stayed active to the horizon.
    pub both_active: Vec<bool>,
}

/// Advance both fields through the same bundle, one particle at a time,
/// tracking the running sup of the squared distance. A particle pair whose
/// either member freezes keeps its `phi` up to the freeze and leaves the
/// active set.
pub fn pairwise_sup_distance(
    field_a: &CoefficientField,
    field_b: &CoefficientField,
    bundle: &NoiseBundle,
    grid: &Lattice,
    opts: &IntegrateOpts,
) -> Result<PairwiseSup, FlowError> {
    if field_a.dim != grid.dim || field_b.dim != grid.dim {
        return Err(FlowError::DimensionMismatch { field: field_a.dim, grid: grid.dim });
    }
    if field_a.noise_dim != bundle.m || field_b.noise_dim != bundle.m {
        return Err(FlowError::NoiseMismatch { bundle: bundle.m, field: field_a.noise_dim });
    }
    if opts.scheme != Scheme::EulerMaruyama {
        return Err(FlowError::Invalid("lockstep comparison pins the Euler scheme".into()));
    }
    let d = grid.dim;
    let m = bundle.m;
    let dt = bundle.dt();
    let steps = bundle.steps();
    let n = grid.num_points();
    let r_escape2 = opts.escape_radius * opts.escape_radius;

    let out: Vec<(f64, f64, bool)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let start = grid.point(p);
            let mut xa = start.to_vec();
            let mut xb = start.to_vec();
            let mut ba = vec![0.0; d];
            let mut bb = vec![0.0; d];
            let mut sa = vec![0.0; d * m];
            let mut sb = vec![0.0; d * m];
            let mut phi = 0.0f64;
            let mut sup_rad = crate::grid::norm(start);
            let mut active = true;
            for k in 0..steps {
                if norm2(&xa) > r_escape2
                    || norm2(&xb) > r_escape2
                    || field_a.near_singularity(&xa)
                    || field_b.near_singularity(&xb)
                {
                    active = false;
                    break;
                }
                let ok = field_a
                    .drift(&xa, &mut ba)
                    .and_then(|_| field_a.diffusion(&xa, &mut sa))
                    .and_then(|_| field_b.drift(&xb, &mut bb))
                    .and_then(|_| field_b.diffusion(&xb, &mut sb));
                if ok.is_err() {
                    active = false;
                    break;
                }
                let dw = bundle.increment(k);
                for i in 0..d {
                    let mut da = ba[i] * dt;
                    let mut db = bb[i] * dt;
                    for l in 0..m {
                        da += sa[i * m + l] * dw[l];
                        db += sb[i * m + l] * dw[l];
                    }
                    xa[i] += da;
                    xb[i] += db;
                }
                if !xa.iter().chain(xb.iter()).all(|v| v.is_finite()) {
                    active = false;
                    break;
                }
                let dist2: f64 =
                    xa.iter().zip(&xb).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 > phi {
                    phi = dist2;
                }
                let rad = norm2(&xa).max(norm2(&xb)).sqrt();
                if rad > sup_rad {
                    sup_rad = rad;
                }
            }
            (phi, sup_rad, active)
        })
        .collect();

    Ok(PairwiseSup {
        phi: out.iter().map(|o| o.0).collect(),
        sup_radius: out.iter().map(|o| o.1).collect(),
        both_active: out.iter().map(|o| o.2).collect(),
    })
}

/// The log-functional of one flow pair.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub horizon: f64,
    pub n_ball: f64,
    pub r_ball: f64,
    pub delta: f64,
    /// Value of the functional (mass-weighted lattice sum).
    pub xi: f64,
    /// `h^d sum Phi` over the truncated set.
    pub phi_integral: f64,
    pub particles_in_set: usize,
    pub particles_total: usize,
    pub dim: usize,
    pub cell_mass: f64,
    #[serde(skip)]
    pub phi: Vec<f64>,
    #[serde(skip)]
    pub in_set: Vec<bool>,
}

impl StabilityReport {
    fn from_phi(
        phi: &[f64],
        sup_radius: &[f64],
        active: &[bool],
        grid: &Lattice,
        horizon: f64,
        n_ball: f64,
        r_ball: f64,
        delta: f64,
    ) -> Self {
        let mass = grid.cell_mass();
        let mut xi = 0.0;
        let mut phi_integral = 0.0;
        let mut in_set = vec![false; phi.len()];
        let mut count = 0usize;
        for (i, x) in grid.iter_points().enumerate() {
            let keep = active[i] && sup_radius[i] <= r_ball && norm2(x) <= n_ball * n_ball;
            in_set[i] = keep;
            if keep {
                xi += (phi[i] / (delta * delta) + 1.0).ln() * mass;
                phi_integral += phi[i] * mass;
                count += 1;
            }
        }
        StabilityReport {
            horizon,
            n_ball,
            r_ball,
            delta,
            xi,
            phi_integral,
            particles_in_set: count,
            particles_total: phi.len(),
            dim: grid.dim,
            cell_mass: mass,
            phi: phi.to_vec(),
            in_set,
        }
    }

    /// Same data re-evaluated at another truncation level `delta`.
    pub fn with_delta(&self, delta: f64, grid: &Lattice) -> Self {
        let mut out = self.clone();
        out.delta = delta;
        out.xi = 0.0;
        let _ = grid;
        for (i, keep) in self.in_set.iter().enumerate() {
            if *keep {
                out.xi += (self.phi[i] / (delta * delta) + 1.0).ln() * self.cell_mass;
            }
        }
        out
    }
}

/// Log-functional between two already-integrated ensembles sharing grid and
/// bundle. `Phi` is the sup over the stored snapshots; build the ensembles
/// with `save_every = 1` for the sup over every step.
pub fn log_functional(
    ens_a: &FlowEnsemble,
    ens_b: &FlowEnsemble,
    n_ball: f64,
    r_ball: f64,
    delta: f64,
) -> Result<StabilityReport, FlowError> {
    if ens_a.grid.points_flat() != ens_b.grid.points_flat() {
        return Err(FlowError::Invalid("ensembles must share the initial grid".into()));
    }
    if ens_a.bundle.increments_flat() != ens_b.bundle.increments_flat() {
        return Err(FlowError::Invalid("ensembles must share the noise bundle".into()));
    }
    if ens_a.save_steps != ens_b.save_steps {
        return Err(FlowError::Invalid("ensembles must share save times".into()));
    }
    let d = ens_a.dim();
    let n = ens_a.num_particles();
    let mut phi = vec![0.0; n];
    for si in 0..ens_a.save_steps.len() {
        let (sa, sb) = (&ens_a.snapshots[si], &ens_b.snapshots[si]);
        for p in 0..n {
            let mut dist2 = 0.0;
            for i in 0..d {
                let diff = sa[p * d + i] - sb[p * d + i];
                dist2 += diff * diff;
            }
            if dist2 > phi[p] {
                phi[p] = dist2;
            }
        }
    }
    let active: Vec<bool> = ens_a
        .status
        .iter()
        .zip(&ens_b.status)
        .map(|(a, b)| a.is_active() && b.is_active())
        .collect();
    let sup_radius: Vec<f64> = ens_a
        .sup_radius
        .iter()
        .zip(&ens_b.sup_radius)
        .map(|(a, b)| a.max(*b))
        .collect();
    Ok(StabilityReport::from_phi(
        &phi,
        &sup_radius,
        &active,
        &ens_a.grid,
        ens_a.bundle.horizon(),
        n_ball,
        r_ball,
        delta,
    ))
}

/// Chebyshev conversion of a log-functional bound into a sup-distance
/// integral bound.
#[derive(Clone, Debug, Serialize)]
pub struct ChebyshevReport {
    pub m_bound: f64,
    /// `4 R^2 / M + delta^2 (e^{M^2} - 1) |B_N|` (the threshold inside the
    /// conversion is the squared form `M^2`).
    pub bound: f64,
    pub empirical: f64,
    pub holds: bool,
    /// The hypothesis `xi <= M` was satisfied by the report.
    pub hypothesis_ok: bool,
    /// Bound exceeds diameter^2 x volume of the truncation ball: it
    /// constrains nothing.
    pub vacuous: bool,
}

/// Convert `xi^delta <= M` into the integral bound. The conversion splits
/// the truncated set at the level `M^2` of the log integrand, so the bound
/// carries `e^{M^2}`; callers are expected to have checked the hypothesis
/// and a violation is reported rather than fatal.
pub fn chebyshev_bound(report: &StabilityReport, m_bound: f64) -> ChebyshevReport {
    let ball = unit_ball_volume(report.dim) * report.n_ball.powi(report.dim as i32);
    let exp_term = (m_bound * m_bound).exp() - 1.0;
    let bound = 4.0 * report.r_ball * report.r_ball / m_bound
        + report.delta * report.delta * exp_term * ball;
    let empirical = report.phi_integral;
    let diameter2 = 4.0 * report.n_ball * report.n_ball;
    ChebyshevReport {
        m_bound,
        bound,
        empirical,
        holds: empirical <= bound,
        hypothesis_ok: report.xi <= m_bound,
        vacuous: !(bound <= diameter2 * ball),
    }
}

/// One row of the Cauchy convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct CauchyRow {
    pub level_low: u32,
    pub level_high: u32,
    /// Coefficient distance `int_{B_R} |b_n - b_m| + (int_{B_R} |s_n - s_m|^2)^{1/2}`.
    pub coeff_delta: f64,
    /// Mean over seeds of `h^d sum_{B_N cap G} Phi^{q/2}`.
    pub mean_sup_q: f64,
    /// Mean over seeds of the log functional at `delta = coeff_delta`.
    pub mean_xi: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CauchyTable {
    pub rows: Vec<CauchyRow>,
    pub q: f64,
    pub horizon: f64,
    pub n_ball: f64,
    pub r_ball: f64,
}

impl CauchyTable {
    /// CSV export with the column layout `n,m,delta_nm,mean_sup_q,xi_delta`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "n,m,delta_nm,mean_sup_q,xi_delta")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.level_low, r.level_high, r.coeff_delta, r.mean_sup_q, r.mean_xi
            )?;
        }
        Ok(())
    }
}

/// Empirical Cauchy diagnostic across a strictly increasing family of
/// regularization levels: for each consecutive pair the expected truncated
/// integral of `sup_t |X_n - X_m|^q` under common noise, together with the
/// coefficient distance `delta_{n,m}` evaluated on `delta_lattice`.
///
/// `q` must lie in `[1, 2)`.
#[allow(clippy::too_many_arguments)]
pub fn cauchy_diagnostic(
    fields: &[(u32, CoefficientField)],
    seeds: &[u64],
    grid: &Lattice,
    delta_lattice: &Lattice,
    dt: f64,
    horizon: f64,
    q: f64,
    n_ball: f64,
    r_ball: f64,
    opts: &IntegrateOpts,
) -> Result<CauchyTable, FlowError> {
    if !(1.0..2.0).contains(&q) {
        return Err(FlowError::Invalid(format!("q = {q} must lie in [1, 2)")));
    }
    if fields.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(FlowError::Invalid("levels must be strictly increasing".into()));
    }
    let steps = (horizon / dt).round() as usize;
    let tg = crate::grid::TimeGrid::new(dt, steps)?;
    let mass = grid.cell_mass();

    let mut rows = Vec::new();
    for pair in fields.windows(2) {
        let (n_lo, field_lo) = (&pair[0].0, &pair[0].1);
        let (n_hi, field_hi) = (&pair[1].0, &pair[1].1);
        let coeff_delta = coefficient_distance(field_lo, field_hi, delta_lattice, r_ball)?;
        let mut sup_q = Vec::with_capacity(seeds.len());
        let mut xis = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let bundle = NoiseBundle::generate(seed, field_lo.noise_dim, tg)?;
            let sup = pairwise_sup_distance(field_lo, field_hi, &bundle, grid, opts)?;
            let mut acc = 0.0;
            let mut xi = 0.0;
            for (i, x) in grid.iter_points().enumerate() {
                if sup.both_active[i]
                    && sup.sup_radius[i] <= r_ball
                    && norm2(x) <= n_ball * n_ball
                {
                    acc += sup.phi[i].powf(q / 2.0) * mass;
                    xi += (sup.phi[i] / (coeff_delta * coeff_delta) + 1.0).ln() * mass;
                }
            }
            sup_q.push(acc);
            xis.push(xi);
        }
        rows.push(CauchyRow {
            level_low: *n_lo,
            level_high: *n_hi,
            coeff_delta,
            mean_sup_q: sup_q.iter().sum::<f64>() / sup_q.len() as f64,
            mean_xi: xis.iter().sum::<f64>() / xis.len() as f64,
            seeds: seeds.len(),
        });
    }
    Ok(CauchyTable { rows, q, horizon, n_ball, r_ball })
}

/// `int_{B_R} |b_n - b_m| + (int_{B_R} |sigma_n - sigma_m|^2)^{1/2}` by
/// lattice quadrature (the lattice carries any singularity exclusion).
pub fn coefficient_distance(
    field_a: &CoefficientField,
    field_b: &CoefficientField,
    lattice: &Lattice,
    r_ball: f64,
) -> Result<f64, FlowError> {
    let d = field_a.dim;
    let m = field_a.noise_dim;
    let mut ba = vec![0.0; d];
    let mut bb = vec![0.0; d];
    let mut sa = vec![0.0; d * m];
    let mut sb = vec![0.0; d * m];
    let mut drift_l1 = 0.0;
    let mut sigma_l2 = 0.0;
    let mass = lattice.cell_mass();
    for x in lattice.iter_points() {
        if norm2(x) > r_ball * r_ball {
            continue;
        }
        field_a.drift(x, &mut ba)?;
        field_b.drift(x, &mut bb)?;
        field_a.diffusion(x, &mut sa)?;
        field_b.diffusion(x, &mut sb)?;
        let db: f64 = ba.iter().zip(&bb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let ds: f64 = sa.iter().zip(&sb).map(|(a, b)| (a - b) * (a - b)).sum();
        drift_l1 += db * mass;
        sigma_l2 += ds * mass;
    }
    Ok(drift_l1 + sigma_l2.sqrt())
}

/// Uniqueness diagnostic: the same coefficient preset integrated two ways
/// (scheme or step size variants) under one bundle, scanned across a
/// decreasing `delta` sequence.
#[derive(Clone, Debug, Serialize)]
pub struct UniquenessRow {
    pub delta: f64,
    pub xi: f64,
    pub chebyshev_bound: f64,
    pub bound_vacuous: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct UniquenessReport {
    pub rows: Vec<UniquenessRow>,
    pub phi_integral: f64,
    pub xi_delta_independent: bool,
}

pub fn uniqueness_test(
    ens_a: &FlowEnsemble,
    ens_b: &FlowEnsemble,
    n_ball: f64,
    r_ball: f64,
    deltas: &[f64],
) -> Result<UniquenessReport, FlowError> {
    if deltas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(FlowError::Invalid("delta sequence must be strictly decreasing".into()));
    }
    let base = log_functional(ens_a, ens_b, n_ball, r_ball, deltas[0])?;
    let mut rows = Vec::new();
    for &delta in deltas {
        let rep = base.with_delta(delta, &ens_a.grid);
        let cheb = chebyshev_bound(&rep, rep.xi.max(1e-300));
        rows.push(UniquenessRow {
            delta,
            xi: rep.xi,
            chebyshev_bound: cheb.bound,
            bound_vacuous: cheb.vacuous,
        });
    }
    // "delta-independent" in the operational sense: the functional grew by
    // less than one decade while delta fell by at least one.
    let growth = rows.last().unwrap().xi / rows.first().unwrap().xi.max(1e-300);
    Ok(UniquenessReport {
        rows,
        phi_integral: base.phi_integral,
        xi_delta_independent: growth < 10.0,
    })
}

/// Particles excluded from the truncation set of a report, by reason.
pub fn truncation_losses(ens: &FlowEnsemble, r_ball: f64) -> (usize, usize) {
    let escaped = ens
        .status
        .iter()
        .filter(|s| matches!(s, ParticleStatus::Escaped { .. } | ParticleStatus::SingularHit { .. }))
        .count();
    let out_of_ball = ens
        .sup_radius
        .iter()
        .zip(&ens.status)
        .filter(|(r, s)| s.is_active() && **r > r_ball)
        .count();
    (escaped, out_of_ball)
}
