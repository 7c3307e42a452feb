//! Uniform time grids and spatial lattices shared by the simulation modules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("time grid needs at least one step")]
    EmptyGrid,
    #[error("time {0} is not aligned with the grid (dt = {1})")]
    UnalignedTime(f64, f64),
    #[error("lattice axis {axis}: lo {lo} must be below hi {hi}")]
    BadBox { axis: usize, lo: f64, hi: f64 },
    #[error("lattice spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("lattice has no points (box too small or everything excluded)")]
    EmptyLattice,
}

/// Uniform partition of `[0, T]` stored as `(dt, steps)` so that
/// `T == steps * dt` holds in the stored representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize) -> Result<Self, GridError> {
        if !(dt > 0.0) {
            return Err(GridError::NonPositiveStep(dt));
        }
        if steps == 0 {
            return Err(GridError::EmptyGrid);
        }
        Ok(Self { dt, steps })
    }

    /// Grid covering `[0, horizon]`; `horizon` must be an (approximate)
    /// multiple of `dt`, the step count is rounded to the nearest integer.
    pub fn from_horizon(horizon: f64, dt: f64) -> Result<Self, GridError> {
        if !(dt > 0.0) {
            return Err(GridError::NonPositiveStep(dt));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 {
            return Err(GridError::EmptyGrid);
        }
        if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(GridError::UnalignedTime(horizon, dt));
        }
        Ok(Self { dt, steps: steps as usize })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Step index of a grid-aligned time, or an error if `t` falls between
    /// grid points.
    pub fn step_index(&self, t: f64) -> Result<usize, GridError> {
        let k = (t / self.dt).round();
        if k < 0.0 || k > self.steps as f64 || (k * self.dt - t).abs() > 1e-9 * self.dt {
            return Err(GridError::UnalignedTime(t, self.dt));
        }
        Ok(k as usize)
    }

    /// Truncation to the first `steps` steps.
    pub fn truncated(&self, steps: usize) -> Self {
        Self { dt: self.dt, steps: steps.min(self.steps) }
    }
}

/// Regular lattice over an axis-aligned box with uniform spacing `h`,
/// optionally excluding a ball (used around coefficient singularities).
///
/// Every node carries Lebesgue mass `h^d`, which is what turns lattice sums
/// into the integrals appearing in the diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lattice {
    pub dim: usize,
    pub lo: Vec<f64>,
    pub spacing: f64,
    pub counts: Vec<usize>,
    pub exclude_center: Option<Vec<f64>>,
    pub exclude_radius: f64,
    /// Flat nodes, `len = num_points * dim`.
    points: Vec<f64>,
}

impl Lattice {
    /// Lattice with `counts[a]` nodes along axis `a`, starting at `lo`,
    /// spaced by `h`.
    pub fn new(lo: Vec<f64>, spacing: f64, counts: Vec<usize>) -> Result<Self, GridError> {
        Self::with_exclusion(lo, spacing, counts, None, 0.0)
    }

    /// Lattice over `[lo, hi]` per axis with `n` nodes per axis (inclusive
    /// endpoints). Spacing is `(hi - lo) / (n - 1)`, which must agree across
    /// axes.
    pub fn over_box(bounds: &[(f64, f64)], per_axis: usize) -> Result<Self, GridError> {
        if per_axis < 2 {
            return Err(GridError::EmptyLattice);
        }
        let mut lo = Vec::new();
        let mut h = None;
        for (axis, &(a, b)) in bounds.iter().enumerate() {
            if !(a < b) {
                return Err(GridError::BadBox { axis, lo: a, hi: b });
            }
            let ha = (b - a) / (per_axis - 1) as f64;
            match h {
                None => h = Some(ha),
                Some(prev) => {
                    if (prev - ha).abs() > 1e-12 * prev.abs() {
                        return Err(GridError::BadSpacing(ha));
                    }
                }
            }
            lo.push(a);
        }
        Self::new(lo, h.unwrap(), vec![per_axis; bounds.len()])
    }

    pub fn with_exclusion(
        lo: Vec<f64>,
        spacing: f64,
        counts: Vec<usize>,
        exclude_center: Option<Vec<f64>>,
        exclude_radius: f64,
    ) -> Result<Self, GridError> {
        if !(spacing > 0.0) {
            return Err(GridError::BadSpacing(spacing));
        }
        let dim = lo.len();
        assert_eq!(counts.len(), dim, "counts/lo dimension mismatch");
        let mut points = Vec::new();
        let total: usize = counts.iter().product();
        let mut idx = vec![0usize; dim];
        let mut x = vec![0.0f64; dim];
        for _ in 0..total {
            for a in 0..dim {
                x[a] = lo[a] + idx[a] as f64 * spacing;
            }
            let keep = match &exclude_center {
                Some(c) => {
                    let r2: f64 = x.iter().zip(c).map(|(xi, ci)| (xi - ci) * (xi - ci)).sum();
                    r2 > exclude_radius * exclude_radius
                }
                None => true,
            };
            if keep {
                points.extend_from_slice(&x);
            }
            // row-major odometer
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < counts[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        if points.is_empty() {
            return Err(GridError::EmptyLattice);
        }
        Ok(Self { dim, lo, spacing, counts, exclude_center, exclude_radius, points })
    }

    /// Lattice wrapper around explicit points (restart grids, pushforward
    /// images). Carries the spacing of the originating lattice so mass
    /// weights stay meaningful; box metadata is degenerate.
    pub fn from_points(dim: usize, spacing: f64, points: Vec<f64>) -> Self {
        assert!(dim > 0 && points.len() % dim == 0);
        let n = points.len() / dim;
        let mut counts = vec![1; dim];
        counts[0] = n;
        Self {
            dim,
            lo: vec![0.0; dim],
            spacing,
            counts,
            exclude_center: None,
            exclude_radius: 0.0,
            points,
        }
    }

    pub fn num_points(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Lebesgue mass carried by one node.
    pub fn cell_mass(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Lattice quadrature `h^d * sum_i f(x_i)`.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mass = self.cell_mass();
        self.iter_points().map(|x| f(x) * mass).sum()
    }

    /// Lattice quadrature restricted to the centered ball of radius `r`.
    pub fn integrate_ball(&self, r: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mass = self.cell_mass();
        self.iter_points()
            .filter(|x| norm2(x) <= r * r)
            .map(|x| f(x) * mass)
            .sum()
    }
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    norm2(x).sqrt()
}

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    // pi^{d/2} / Gamma(d/2 + 1), by the even/odd closed forms.
    let pi = std::f64::consts::PI;
    if d % 2 == 0 {
        let k = d / 2;
        let mut v = 1.0;
        for j in 1..=k {
            v *= pi / j as f64;
        }
        v
    } else {
        // Gamma(d/2 + 1) = sqrt(pi) (d)!! / 2^{(d+1)/2}
        let mut double_fact = 1.0;
        let mut j = d as i64;
        while j > 1 {
            double_fact *= j as f64;
            j -= 2;
        }
        pi.powf((d - 1) as f64 / 2.0) * 2f64.powi((d as i32 + 1) / 2) / double_fact
    }
}

pub fn ball_volume(d: usize, r: f64) -> f64 {
    unit_ball_volume(d) * r.powi(d as i32)
}
