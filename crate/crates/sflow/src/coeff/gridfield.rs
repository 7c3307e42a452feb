//! Coefficient fields sampled on a regular lattice, loaded from CSV and
//! evaluated by multilinear interpolation. Derivatives fall back to the
//! generic finite-difference accessors.
//!
//! File layout (comma separated):
//!
//! ```text
//! d,m,h
//! lo_1,...,lo_d
//! n_1,...,n_d
//! x_1,...,x_d,b_1,...,b_d,sigma_11,...,sigma_1m,...,sigma_dm
//! ...                          (rows in row-major lattice order)
//! ```
//!
//! The leading coordinates are redundant but keep the files auditable;
//! they are validated against the declared lattice.

use super::{CoefficientField, EvalError, FieldDerivatives, FieldError};
use std::io::BufRead;
use std::sync::Arc;

struct GridData {
    dim: usize,
    noise_dim: usize,
    lo: Vec<f64>,
    h: f64,
    counts: Vec<usize>,
    /// per node: d drift values then d*m sigma values
    values: Vec<f64>,
}

impl GridData {
    fn node_stride(&self) -> usize {
        self.dim + self.dim * self.noise_dim
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for a in 0..self.dim {
            flat = flat * self.counts[a] + idx[a];
        }
        flat
    }

    /// Multilinear interpolation of the full value block at `x`.
    fn interpolate(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let d = self.dim;
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0f64; d];
        for a in 0..d {
            let t = (x[a] - self.lo[a]) / self.h;
            if t < -1e-9 || t > (self.counts[a] - 1) as f64 + 1e-9 {
                return Err(EvalError::OutOfDomain);
            }
            let i = t.floor().max(0.0) as usize;
            let i = i.min(self.counts[a] - 2);
            base[a] = i;
            frac[a] = (t - i as f64).clamp(0.0, 1.0);
        }
        let stride = self.node_stride();
        out.fill(0.0);
        let corners = 1usize << d;
        let mut idx = vec![0usize; d];
        for corner in 0..corners {
            let mut w = 1.0;
            for a in 0..d {
                if corner & (1 << a) != 0 {
                    idx[a] = base[a] + 1;
                    w *= frac[a];
                } else {
                    idx[a] = base[a];
                    w *= 1.0 - frac[a];
                }
            }
            let off = self.flat_index(&idx) * stride;
            for (o, v) in out.iter_mut().zip(&self.values[off..off + stride]) {
                *o += w * v;
            }
        }
        Ok(())
    }
}

/// Load a lattice-sampled field with multilinear interpolation between
/// nodes. Evaluations outside the lattice box fail with an out-of-domain
/// error (the flow integrator freezes such particles).
pub fn grid_field_from_csv<R: BufRead>(reader: R) -> Result<CoefficientField, FieldError> {
    let mut lines = reader.lines();
    let mut next_line = || -> Result<String, FieldError> {
        loop {
            match lines.next() {
                None => return Err(FieldError::Invalid("unexpected end of grid file".into())),
                Some(Ok(l)) => {
                    let t = l.trim().to_string();
                    if !t.is_empty() && !t.starts_with('#') {
                        return Ok(t);
                    }
                }
                Some(Err(e)) => return Err(FieldError::Invalid(format!("io error: {e}"))),
            }
        }
    };

    let header = next_line()?;
    let parts: Vec<&str> = header.split(',').collect();
    if parts.len() != 3 {
        return Err(FieldError::Invalid("header must be d,m,h".into()));
    }
    let dim: usize =
        parts[0].trim().parse().map_err(|_| FieldError::Invalid("bad d".into()))?;
    let noise_dim: usize =
        parts[1].trim().parse().map_err(|_| FieldError::Invalid("bad m".into()))?;
    let h: f64 = parts[2].trim().parse().map_err(|_| FieldError::Invalid("bad h".into()))?;
    if dim == 0 || noise_dim == 0 || !(h > 0.0) {
        return Err(FieldError::Invalid("d, m must be positive and h > 0".into()));
    }

    let lo: Vec<f64> = next_line()?
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| FieldError::Invalid("bad lo".into())))
        .collect::<Result<_, _>>()?;
    let counts: Vec<usize> = next_line()?
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| FieldError::Invalid("bad counts".into())))
        .collect::<Result<_, _>>()?;
    if lo.len() != dim || counts.len() != dim || counts.iter().any(|&c| c < 2) {
        return Err(FieldError::Invalid("lo/counts must have d entries, counts >= 2".into()));
    }

    let total: usize = counts.iter().product();
    let stride = dim + dim * noise_dim;
    let mut values = Vec::with_capacity(total * stride);
    for row in 0..total {
        let line = next_line()?;
        let nums: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| FieldError::Invalid(format!("bad value in row {row}"))))
            .collect::<Result<_, _>>()?;
        if nums.len() != dim + stride {
            return Err(FieldError::Invalid(format!(
                "row {row}: expected {} values, got {}",
                dim + stride,
                nums.len()
            )));
        }
        // validate coordinates against the declared lattice (row-major)
        let mut rem = row;
        let mut idx = vec![0usize; dim];
        for a in (0..dim).rev() {
            idx[a] = rem % counts[a];
            rem /= counts[a];
        }
        for a in 0..dim {
            let want = lo[a] + idx[a] as f64 * h;
            if (nums[a] - want).abs() > 1e-9 * h.max(1.0) {
                return Err(FieldError::Invalid(format!(
                    "row {row}: coordinate {a} is {} but the lattice expects {want}",
                    nums[a]
                )));
            }
        }
        values.extend_from_slice(&nums[dim..]);
    }

    let data = Arc::new(GridData { dim, noise_dim, lo, h, counts, values });
    let d1 = data.clone();
    let drift = Arc::new(move |x: &[f64], out: &mut [f64]| -> Result<(), EvalError> {
        let mut block = vec![0.0; d1.node_stride()];
        d1.interpolate(x, &mut block)?;
        out.copy_from_slice(&block[..d1.dim]);
        Ok(())
    });
    let d2 = data.clone();
    let diffusion = Arc::new(move |x: &[f64], out: &mut [f64]| -> Result<(), EvalError> {
        let mut block = vec![0.0; d2.node_stride()];
        d2.interpolate(x, &mut block)?;
        out.copy_from_slice(&block[d2.dim..]);
        Ok(())
    });
    CoefficientField::new(
        "user_grid",
        dim,
        noise_dim,
        drift,
        diffusion,
        FieldDerivatives::default(),
        vec![],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    fn sample_csv() -> String {
        // d=2, m=1, h=1.0, lattice 3x3 on [0,2]^2 sampling b(x) = (x1, -x2)
        // and the 2x1 diffusion column (x1+x2, x1-x2); everything linear, so
        // multilinear interpolation is exact.
        let mut s = String::from("2,1,1.0\n0,0\n3,3\n");
        for i in 0..3 {
            for j in 0..3 {
                let (x, y) = (i as f64, j as f64);
                s.push_str(&format!("{x},{y},{x},{},{},{}\n", -y, x + y, x - y));
            }
        }
        s
    }

    #[test]
    fn multilinear_interpolation_is_exact_on_linear_data() {
        let field = grid_field_from_csv(BufReader::new(sample_csv().as_bytes())).unwrap();
        let mut b = vec![0.0; 2];
        let mut s = vec![0.0; 2];
        field.drift(&[0.5, 1.25], &mut b).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] + 1.25).abs() < 1e-12);
        field.diffusion(&[1.5, 0.5], &mut s).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        // FD fallback derivatives work on the interpolant
        assert!((field.div_drift(&[0.5, 0.75]).unwrap() - 0.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_box_evaluation_is_rejected() {
        let field = grid_field_from_csv(BufReader::new(sample_csv().as_bytes())).unwrap();
        let mut b = vec![0.0; 2];
        assert!(matches!(
            field.drift(&[5.0, 0.0], &mut b),
            Err(FieldError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn malformed_files_are_rejected_with_context() {
        let bad = "2,1\n0,0\n3,3\n";
        assert!(grid_field_from_csv(BufReader::new(bad.as_bytes())).is_err());
        // first data row with a coordinate off the declared lattice
        let mut lines: Vec<String> = sample_csv().lines().map(String::from).collect();
        lines[3] = "9,0,0,0,0,0".into();
        let bad_coord = lines.join("\n");
        assert!(grid_field_from_csv(BufReader::new(bad_coord.as_bytes())).is_err());
    }
}
