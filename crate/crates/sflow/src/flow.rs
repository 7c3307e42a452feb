//! Ensemble integration of the SDE under common noise: forward flows,
//! inverse flows via time reversal, and the flow/Markov property checks.
//!
//! All particles of an ensemble consume the same increments of one
//! [`NoiseBundle`]. Per-particle work is embarrassingly parallel and every
//! reduction is performed sequentially over the particle index, so results
//! are bitwise independent of the worker count.

use crate::coeff::CoefficientField;
use crate::grid::{norm, norm2, Lattice};
use crate::noise::NoiseBundle;
use crate::util::mean_stderr;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("field dimension {field} does not match grid dimension {grid}")]
    DimensionMismatch { field: usize, grid: usize },
    #[error("noise dimension {bundle} does not match field noise dimension {field}")]
    NoiseMismatch { bundle: usize, field: usize },
    #[error("bundle horizon {have} is shorter than requested horizon {want}")]
    ShortBundle { have: f64, want: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Field(#[from] crate::coeff::FieldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scheme {
    EulerMaruyama,
    /// Diagonal Milstein, diagnostics on smooth presets only.
    MilsteinDiag,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euler_maruyama" => Ok(Scheme::EulerMaruyama),
            "milstein_diag" => Ok(Scheme::MilsteinDiag),
            other => Err(format!("unknown scheme '{other}'")),
        }
    }
}

/// Why a particle stopped advancing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ParticleStatus {
    Active,
    /// Left the escape ball; frozen from `step` on.
    Escaped { step: usize },
    /// Field evaluation hit a declared singularity at `step`.
    SingularHit { step: usize },
}

impl ParticleStatus {
    pub fn is_active(&self) -> bool {
        matches!(self, ParticleStatus::Active)
    }

    /// First step at which the particle froze, if any.
    pub fn frozen_step(&self) -> Option<usize> {
        match self {
            ParticleStatus::Active => None,
            ParticleStatus::Escaped { step } | ParticleStatus::SingularHit { step } => Some(*step),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IntegrateOpts {
    pub scheme: Scheme,
    /// Particles freeze once `|X| > escape_radius`.
    pub escape_radius: f64,
    /// Snapshot stride in steps (1 = every step). The initial state and the
    /// final step are always included.
    pub save_every: usize,
    /// Accumulate the pathwise log-density along trajectories.
    pub track_density: bool,
}

impl IntegrateOpts {
    pub fn new(escape_radius: f64) -> Self {
        Self {
            scheme: Scheme::EulerMaruyama,
            escape_radius,
            save_every: 1,
            track_density: false,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_save_every(mut self, save_every: usize) -> Self {
        self.save_every = save_every.max(1);
        self
    }

    pub fn with_density(mut self) -> Self {
        self.track_density = true;
        self
    }
}

/// Trajectories of one initial lattice under one noise bundle.
#[derive(Clone, Debug)]
pub struct FlowEnsemble {
    pub field: CoefficientField,
    pub bundle: NoiseBundle,
    pub grid: Lattice,
    pub opts: IntegrateOpts,
    /// Step indices of the stored snapshots (`0` first, last step last).
    pub save_steps: Vec<usize>,
    /// `save_steps.len()` snapshots of `num_particles x d` positions.
    pub snapshots: Vec<Vec<f64>>,
    pub status: Vec<ParticleStatus>,
    /// Running sup of `|X_t|` over all integration steps, per particle.
    pub sup_radius: Vec<f64>,
    /// Log-density track per snapshot (empty unless requested).
    pub log_density: Vec<Vec<f64>>,
}

impl FlowEnsemble {
    pub fn num_particles(&self) -> usize {
        self.grid.num_points()
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn final_positions(&self) -> &[f64] {
        self.snapshots.last().expect("ensemble has at least the initial snapshot")
    }

    pub fn position(&self, snapshot: usize, particle: usize) -> &[f64] {
        let d = self.dim();
        &self.snapshots[snapshot][particle * d..(particle + 1) * d]
    }

    /// Index into `save_steps` for a grid-aligned time.
    pub fn snapshot_at(&self, t: f64) -> Result<usize, FlowError> {
        let step = self.bundle.grid.step_index(t)?;
        self.save_steps
            .iter()
            .position(|&s| s == step)
            .ok_or_else(|| FlowError::Invalid(format!("no snapshot stored at t = {t}")))
    }

    /// Particles inside the truncation set: never escaped, never singular,
    /// and with whole-path sup radius at most `r`.
    pub fn in_radius_set(&self, r: f64) -> Vec<bool> {
        self.status
            .iter()
            .zip(&self.sup_radius)
            .map(|(st, sup)| st.is_active() && *sup <= r)
            .collect()
    }
}

struct ParticleOutput {
    positions: Vec<f64>, // save_count x d
    log_density: Vec<f64>,
    status: ParticleStatus,
    sup_radius: f64,
}

/// Integrate `dX = b(X) dt + sigma(X) dW` for every lattice point under the
/// shared bundle.
///
/// Euler-Maruyama: `X_{k+1} = X_k + b(X_k) dt + sigma(X_k) dW_k`. Particles
/// freeze at the first exit from the escape ball or on a singular field
/// evaluation; frozen particles keep their last position in later
/// snapshots.
pub fn integrate_forward(
    field: &CoefficientField,
    bundle: &NoiseBundle,
    grid: &Lattice,
    opts: &IntegrateOpts,
) -> Result<FlowEnsemble, FlowError> {
    if field.dim != grid.dim {
        return Err(FlowError::DimensionMismatch { field: field.dim, grid: grid.dim });
    }
    if field.noise_dim != bundle.m {
        return Err(FlowError::NoiseMismatch { bundle: bundle.m, field: field.noise_dim });
    }

    let steps = bundle.steps();
    let mut save_steps: Vec<usize> = (0..=steps).step_by(opts.save_every).collect();
    if *save_steps.last().unwrap() != steps {
        save_steps.push(steps);
    }

    let n = grid.num_points();
    let outputs: Vec<ParticleOutput> = (0..n)
        .into_par_iter()
        .map(|p| advance_particle(field, bundle, grid.point(p), opts, &save_steps))
        .collect::<Result<Vec<_>, FlowError>>()?;

    let d = grid.dim;
    let mut snapshots = vec![vec![0.0; n * d]; save_steps.len()];
    let mut log_density = if opts.track_density {
        vec![vec![0.0; n]; save_steps.len()]
    } else {
        Vec::new()
    };
    let mut status = Vec::with_capacity(n);
    let mut sup_radius = Vec::with_capacity(n);
    for (p, out) in outputs.into_iter().enumerate() {
        for (si, snap) in snapshots.iter_mut().enumerate() {
            snap[p * d..(p + 1) * d].copy_from_slice(&out.positions[si * d..(si + 1) * d]);
        }
        if opts.track_density {
            for (si, ld) in log_density.iter_mut().enumerate() {
                ld[p] = out.log_density[si];
            }
        }
        status.push(out.status);
        sup_radius.push(out.sup_radius);
    }

    Ok(FlowEnsemble {
        field: field.clone(),
        bundle: bundle.clone(),
        grid: grid.clone(),
        opts: opts.clone(),
        save_steps,
        snapshots,
        status,
        sup_radius,
        log_density,
    })
}

fn advance_particle(
    field: &CoefficientField,
    bundle: &NoiseBundle,
    start: &[f64],
    opts: &IntegrateOpts,
    save_steps: &[usize],
) -> Result<ParticleOutput, FlowError> {
    let d = field.dim;
    let m = field.noise_dim;
    let dt = bundle.dt();
    let steps = bundle.steps();

    let mut x = start.to_vec();
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * m];
    let mut gsig = vec![0.0; d * d * m];
    let mut div_sig = vec![0.0; m];
    let mut log_rho = 0.0f64;
    let mut status = ParticleStatus::Active;
    let mut sup_radius = norm(&x);

    let mut positions = Vec::with_capacity(save_steps.len() * d);
    let mut log_density = Vec::with_capacity(if opts.track_density { save_steps.len() } else { 0 });
    let mut save_iter = save_steps.iter().peekable();
    if save_iter.peek() == Some(&&0usize) {
        positions.extend_from_slice(&x);
        if opts.track_density {
            log_density.push(log_rho);
        }
        save_iter.next();
    }

    for k in 0..steps {
        if status.is_active() {
            if norm2(&x) > opts.escape_radius * opts.escape_radius {
                status = ParticleStatus::Escaped { step: k };
            } else if field.near_singularity(&x) {
                status = ParticleStatus::SingularHit { step: k };
            } else {
                let db = bundle.increment(k);
                let ok = field.drift(&x, &mut b).and_then(|_| field.diffusion(&x, &mut sig));
                match ok {
                    Err(_) => status = ParticleStatus::SingularHit { step: k },
                    Ok(()) => {
                        if opts.track_density {
                            let div_b = field.div_drift(&x)?;
                            let dsds = field.diffusion_grad_contraction(&x)?;
                            field.div_diffusion(&x, &mut div_sig)?;
                            let mut dw_term = 0.0;
                            for l in 0..m {
                                dw_term += div_sig[l] * db[l];
                            }
                            log_rho += (div_b - 0.5 * dsds) * dt + dw_term;
                        }
                        match opts.scheme {
                            Scheme::EulerMaruyama => {
                                for i in 0..d {
                                    let mut dx = b[i] * dt;
                                    for l in 0..m {
                                        dx += sig[i * m + l] * db[l];
                                    }
                                    x[i] += dx;
                                }
                            }
                            Scheme::MilsteinDiag => {
                                field.grad_diffusion(&x, &mut gsig)?;
                                for i in 0..d {
                                    let mut dx = b[i] * dt;
                                    for l in 0..m {
                                        dx += sig[i * m + l] * db[l];
                                    }
                                    // diagonal correction 1/2 s^{ii} d_i s^{ii} ((dW^i)^2 - dt)
                                    if i < m {
                                        let s_ii = sig[i * m + i];
                                        let ds_ii = gsig[(i * d + i) * m + i];
                                        dx += 0.5 * s_ii * ds_ii * (db[i] * db[i] - dt);
                                    }
                                    x[i] += dx;
                                }
                            }
                        }
                        let r = norm(&x);
                        if r > sup_radius {
                            sup_radius = r;
                        }
                        if !x.iter().all(|v| v.is_finite()) {
                            status = ParticleStatus::Escaped { step: k + 1 };
                        }
                    }
                }
            }
        }
        if save_iter.peek() == Some(&&(k + 1)) {
            positions.extend_from_slice(&x);
            if opts.track_density {
                log_density.push(log_rho);
            }
            save_iter.next();
        }
    }

    Ok(ParticleOutput { positions, log_density, status, sup_radius })
}

/// Integrate the inverse flow `X_T^{-1}` as the ensemble of the companion
/// SDE with drift `-b_sigma` and the same diffusion, driven by the
/// time-reversed bundle at horizon `T`.
///
/// The returned ensemble carries the companion field, so density tracking
/// along it yields the determinant of the inverse Jacobian.
pub fn integrate_inverse(
    field: &CoefficientField,
    bundle: &NoiseBundle,
    horizon: f64,
    grid: &Lattice,
    opts: &IntegrateOpts,
) -> Result<FlowEnsemble, FlowError> {
    let steps_wanted = bundle.grid.step_index(horizon)?;
    if steps_wanted == 0 {
        return Err(FlowError::Invalid("inverse flow needs a positive horizon".into()));
    }
    if steps_wanted > bundle.steps() {
        return Err(FlowError::ShortBundle { have: bundle.horizon(), want: horizon });
    }
    let truncated = bundle.truncated(steps_wanted);
    let reversed = truncated.reverse(truncated.horizon())?;
    let inverse_field = field.inverse_flow_field();
    integrate_forward(&inverse_field, &reversed, grid, opts)
}

/// Report of the pathwise flow-property check
/// `X_{s+t}(x) = X_t(shift_s W, X_s(x))`.
#[derive(Clone, Debug, Serialize)]
pub struct CocycleReport {
    pub s: f64,
    pub t: f64,
    /// Max over compared particles of `|lhs - rhs| / max(1, |lhs|)`.
    pub max_relative_discrepancy: f64,
    pub particles_compared: usize,
    /// Particles dropped because they froze before `s + t`.
    pub particles_excluded: usize,
}

/// Both sides consume identical increments: the left side runs to `s + t`
/// directly, the right side restarts from the time-`s` snapshot with the
/// shifted bundle. For the Euler scheme the two computations perform the
/// same float operations, so the discrepancy is pure roundoff.
pub fn check_cocycle(
    field: &CoefficientField,
    bundle: &NoiseBundle,
    s: f64,
    t: f64,
    grid: &Lattice,
    opts: &IntegrateOpts,
) -> Result<CocycleReport, FlowError> {
    let step_s = bundle.grid.step_index(s)?;
    let step_st = bundle.grid.step_index(s + t)?;
    if step_st > bundle.steps() {
        return Err(FlowError::ShortBundle { have: bundle.horizon(), want: s + t });
    }

    let full = integrate_forward(field, &bundle.truncated(step_st), grid, opts)?;
    let si_s = full
        .save_steps
        .iter()
        .position(|&k| k == step_s)
        .ok_or_else(|| FlowError::Invalid("cocycle check needs save_every = 1".into()))?;

    let d = grid.dim;
    let n = grid.num_points();
    if step_s == step_st {
        return Ok(CocycleReport {
            s,
            t,
            max_relative_discrepancy: 0.0,
            particles_compared: n,
            particles_excluded: 0,
        });
    }

    // Restart lattice carrying the mid positions; spacing metadata is
    // irrelevant for the restart run.
    let mid = full.snapshots[si_s].clone();
    let restart = restart_lattice(&full.grid, mid)?;
    let shifted = bundle.shift(s)?.truncated(step_st - step_s);
    let second = integrate_forward(field, &shifted, &restart, opts)?;

    let mut max_rel = 0.0f64;
    let mut compared = 0usize;
    let mut excluded = 0usize;
    let lhs = full.final_positions();
    let rhs = second.final_positions();
    for p in 0..n {
        let frozen_early = matches!(full.status[p].frozen_step(), Some(step) if step <= step_s)
            || !second.status[p].is_active()
            || !full.status[p].is_active();
        if frozen_early {
            excluded += 1;
            continue;
        }
        compared += 1;
        for i in 0..d {
            let a = lhs[p * d + i];
            let b = rhs[p * d + i];
            let rel = (a - b).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(CocycleReport {
        s,
        t,
        max_relative_discrepancy: max_rel,
        particles_compared: compared,
        particles_excluded: excluded,
    })
}

fn restart_lattice(template: &Lattice, positions: Vec<f64>) -> Result<Lattice, FlowError> {
    Ok(Lattice::from_points(
        template.dim,
        template.spacing,
        positions,
    ))
}

/// Monte Carlo estimate of the transition semigroup `T_t phi (x) = E phi(X_t(x))`
/// per lattice node, averaged over independent seeds.
#[derive(Clone, Debug)]
pub struct SemigroupEstimate {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub t: f64,
}

pub fn estimate_semigroup(
    field: &CoefficientField,
    seeds: &[u64],
    t: f64,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    grid: &Lattice,
    opts: &IntegrateOpts,
    dt: f64,
) -> Result<SemigroupEstimate, FlowError> {
    if seeds.len() < 2 {
        return Err(FlowError::Invalid("semigroup estimation needs at least 2 seeds".into()));
    }
    let tg = crate::grid::TimeGrid::from_horizon(t, dt)?;
    let n = grid.num_points();
    let mut per_seed: Vec<Vec<f64>> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let bundle = NoiseBundle::generate(seed, field.noise_dim, tg)?;
        let ens = integrate_forward(field, &bundle, grid, opts)?;
        let fin = ens.final_positions();
        per_seed.push((0..n).map(|p| phi(&fin[p * grid.dim..(p + 1) * grid.dim])).collect());
    }
    let mut values = vec![0.0; n];
    let mut stderr = vec![0.0; n];
    let mut buf = vec![0.0; seeds.len()];
    for p in 0..n {
        for (s, row) in per_seed.iter().enumerate() {
            buf[s] = row[p];
        }
        let (m, se) = mean_stderr(&buf);
        values[p] = m;
        stderr[p] = se;
    }
    Ok(SemigroupEstimate { values, stderr, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{constant_field, linear_field, regularized_example_field};
    use crate::grid::TimeGrid;

    fn lattice_1d(lo: f64, hi: f64, n: usize) -> Lattice {
        Lattice::over_box(&[(lo, hi)], n).unwrap()
    }

    fn bundle(seed: u64, m: usize, dt: f64, steps: usize) -> NoiseBundle {
        NoiseBundle::generate(seed, m, TimeGrid::new(dt, steps).unwrap()).unwrap()
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let f = constant_field(&[0.0, 0.0], &[0.0; 4], 2).unwrap();
        let b = bundle(1, 2, 0.05, 20);
        let grid = Lattice::over_box(&[(-1.0, 1.0), (-1.0, 1.0)], 5).unwrap();
        let ens = integrate_forward(&f, &b, &grid, &IntegrateOpts::new(10.0)).unwrap();
        assert_eq!(ens.final_positions(), grid.points_flat());
        assert_eq!(ens.snapshots[0], grid.points_flat());
    }

    #[test]
    fn constant_coefficients_integrate_exactly() {
        let v = [0.5, -0.25];
        let sig = [1.0, 0.2, 0.0, 0.7];
        let f = constant_field(&v, &sig, 2).unwrap();
        let b = bundle(3, 2, 0.01, 50);
        let grid = Lattice::over_box(&[(-1.0, 1.0), (-1.0, 1.0)], 3).unwrap();
        let ens = integrate_forward(&f, &b, &grid, &IntegrateOpts::new(100.0)).unwrap();
        let t = b.horizon();
        let w = b.path_at(b.steps());
        for p in 0..grid.num_points() {
            let x0 = grid.point(p);
            for i in 0..2 {
                let want = x0[i] + v[i] * t + sig[i * 2] * w[0] + sig[i * 2 + 1] * w[1];
                let got = ens.final_positions()[p * 2 + i];
                assert!((got - want).abs() < 1e-12, "particle {p}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn strong_convergence_on_the_linear_oracle() {
        // dX = AX dt + S dW with A = diag(-1,-2) has the exact recursive
        // solution X_{k+1} = e^{A dt} X_k + int e^{A(dt-s)} S dW; on a fixed
        // increment path the integral term per step is approximated to
        // O(dt^{3/2}) by e^{A dt} S dW_k, which leaves an O(dt) envelope --
        // the observed strong order of Euler here is >= 0.9.
        let a = [-1.0, 0.0, 0.0, -2.0];
        let sig = [0.5, 0.0, 0.0, 0.5];
        let f = linear_field(&a, &sig, 2).unwrap();
        let grid = Lattice::from_points(2, 1.0, vec![1.0, 1.0, -0.5, 2.0]);
        let t = 1.0f64;
        let mut errors = Vec::new();
        let dts = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
        for &dt in &dts {
            let steps = (t / dt).round() as usize;
            let b = bundle(7, 2, dt, steps);
            let ens =
                integrate_forward(&f, &b, &grid, &IntegrateOpts::new(1e6)).unwrap();
            // exact recursive discretization on the same increments
            let e1 = (-dt as f64).exp();
            let e2 = (-2.0 * dt).exp();
            let mut max_err = 0.0f64;
            for p in 0..grid.num_points() {
                let x0 = grid.point(p);
                let mut x = [x0[0], x0[1]];
                for k in 0..steps {
                    let dw = b.increment(k);
                    x[0] = e1 * x[0] + 0.5 * dw[0];
                    x[1] = e2 * x[1] + 0.5 * dw[1];
                }
                let got = &ens.final_positions()[p * 2..p * 2 + 2];
                max_err = max_err.max((got[0] - x[0]).abs()).max((got[1] - x[1]).abs());
            }
            errors.push(max_err);
        }
        // observed order from consecutive halvings
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 0.9, "observed order {order} from errors {errors:?}");
        }
    }

    #[test]
    fn inverse_of_affine_flow_is_the_affine_inverse() {
        let v = [0.3, -0.1];
        let sig = [0.6, 0.0, 0.0, 0.4];
        let f = constant_field(&v, &sig, 2).unwrap();
        let b = bundle(11, 2, 0.01, 40);
        let t = b.horizon();
        let grid = Lattice::over_box(&[(-1.0, 1.0), (-1.0, 1.0)], 3).unwrap();
        let inv = integrate_inverse(&f, &b, t, &grid, &IntegrateOpts::new(100.0)).unwrap();
        let w = b.path_at(b.steps());
        for p in 0..grid.num_points() {
            let x0 = grid.point(p);
            for i in 0..2 {
                let want = x0[i] - v[i] * t - (sig[i * 2] * w[0] + sig[i * 2 + 1] * w[1]);
                let got = inv.final_positions()[p * 2 + i];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn inverse_composed_with_forward_returns_the_grid() {
        // Smooth Lipschitz preset with state-dependent diffusion.
        let f = regularized_example_field(3, 51.0, 4).unwrap();
        let dt = 1e-3;
        let t = 0.5;
        let b = bundle(5, 3, dt, (t / dt) as usize);
        let grid = Lattice::with_exclusion(
            vec![0.8, 0.8, 0.8],
            0.2,
            vec![3, 3, 3],
            None,
            0.0,
        )
        .unwrap();
        let fwd = integrate_forward(&f, &b, &grid, &IntegrateOpts::new(1e3)).unwrap();
        let end = Lattice::from_points(3, grid.spacing, fwd.final_positions().to_vec());
        let back = integrate_inverse(&f, &b, t, &end, &IntegrateOpts::new(1e3)).unwrap();
        let mut errs: Vec<f64> = (0..grid.num_points())
            .map(|p| {
                let x0 = grid.point(p);
                let xr = &back.final_positions()[p * 3..(p + 1) * 3];
                ((x0[0] - xr[0]).powi(2) + (x0[1] - xr[1]).powi(2) + (x0[2] - xr[2]).powi(2))
                    .sqrt()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        let scale = 51.0 / 2.0; // drift magnitude near |x| ~ 1.4
        assert!(median < 5e-2 * scale, "median roundtrip error {median}");
    }

    #[test]
    fn cocycle_discrepancy_is_roundoff_only() {
        let f = regularized_example_field(3, 51.0, 8).unwrap();
        let b = bundle(21, 3, 1e-3, 500);
        let grid = Lattice::with_exclusion(
            vec![-1.5, -1.5, -1.5],
            0.75,
            vec![5, 5, 5],
            Some(vec![0.0; 3]),
            0.3,
        )
        .unwrap();
        let rep =
            check_cocycle(&f, &b, 0.25, 0.25, &grid, &IntegrateOpts::new(1e3)).unwrap();
        assert!(rep.max_relative_discrepancy < 1e-12, "{}", rep.max_relative_discrepancy);
        assert!(rep.particles_compared > 0);

        // s = 0 is the identity shift: exact equality by construction.
        let rep0 = check_cocycle(&f, &b, 0.0, 0.25, &grid, &IntegrateOpts::new(1e3)).unwrap();
        assert_eq!(rep0.max_relative_discrepancy, 0.0);
    }

    #[test]
    fn semigroup_preserves_constants_and_martingale_means() {
        let f = constant_field(&[0.0], &[1.0], 1).unwrap();
        let grid = lattice_1d(-1.0, 1.0, 5);
        let opts = IntegrateOpts::new(50.0);
        let ones = estimate_semigroup(&f, &[1, 2, 3, 4], 0.5, &|_| 1.0, &grid, &opts, 1e-2)
            .unwrap();
        assert!(ones.values.iter().all(|v| (v - 1.0).abs() < 1e-14));

        // b = 0, sigma = I, phi = x: T_t phi = x (martingale), 3 sigma gate.
        let seeds: Vec<u64> = (1..=64).collect();
        let est = estimate_semigroup(&f, &seeds, 0.5, &|x| x[0], &grid, &opts, 1e-2).unwrap();
        for p in 0..grid.num_points() {
            let x = grid.point(p)[0];
            assert!(
                (est.values[p] - x).abs() <= 3.0 * est.stderr[p],
                "node {x}: {} +- {}",
                est.values[p],
                est.stderr[p]
            );
        }
    }

    #[test]
    fn workers_do_not_change_trajectories() {
        let f = regularized_example_field(3, 51.0, 4).unwrap();
        let b = bundle(13, 3, 1e-2, 50);
        let grid = Lattice::with_exclusion(
            vec![-1.0, -1.0, -1.0],
            0.5,
            vec![5, 5, 5],
            Some(vec![0.0; 3]),
            0.3,
        )
        .unwrap();
        let opts = IntegrateOpts::new(100.0).with_density();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let e1 = pool1.install(|| integrate_forward(&f, &b, &grid, &opts)).unwrap();
        let e4 = pool4.install(|| integrate_forward(&f, &b, &grid, &opts)).unwrap();
        assert_eq!(e1.final_positions(), e4.final_positions());
        assert_eq!(e1.log_density.last(), e4.log_density.last());
    }
}
