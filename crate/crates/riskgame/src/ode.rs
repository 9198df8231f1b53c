//! Fixed-step classical fourth-order integration over flat state vectors,
//! with finite-escape detection and cubic Hermite interpolation from stored
//! derivatives. Deterministic by construction: no adaptive stepping.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Dense output of a fixed-step integration: states and right-hand-side
/// values at every node of an ascending time grid.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
}

/// Integrates dy/dt = rhs(t, y) from `t_start` to `t_end` (either direction)
/// in `steps` equal steps, applying `post_step` after every step (used to
/// re-symmetrize matrix blocks). Errors with the failure time on the first
/// non-finite state.
pub fn integrate_fixed<F, P>(
    rhs: F,
    post_step: P,
    t_start: f64,
    t_end: f64,
    y0: DVector<f64>,
    steps: usize,
) -> Result<OdeSolution>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    P: Fn(&mut DVector<f64>),
{
    assert!(steps >= 1, "need at least one step");
    let h = (t_end - t_start) / steps as f64;
    let mut t = t_start;
    let mut y = y0;

    let mut grid = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut derivs = Vec::with_capacity(steps + 1);

    grid.push(t);
    derivs.push(rhs(t, &y));
    states.push(y.clone());

    for i in 0..steps {
        let k1 = derivs.last().unwrap().clone();
        let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
        let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
        let k4 = rhs(t + h, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        post_step(&mut y);
        // Land exactly on the grid node to keep runs bit-reproducible.
        t = t_start + (i + 1) as f64 * h;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp { t });
        }
        grid.push(t);
        derivs.push(rhs(t, &y));
        states.push(y.clone());
    }

    // Present ascending in time regardless of integration direction.
    if h < 0.0 {
        grid.reverse();
        states.reverse();
        derivs.reverse();
    }
    Ok(OdeSolution {
        grid,
        states,
        derivs,
    })
}

impl OdeSolution {
    /// Locates the interval containing `t`; errors outside the grid span.
    fn interval(&self, t: f64) -> Result<usize> {
        let lo = self.grid[0];
        let hi = *self.grid.last().unwrap();
        if t < lo || t > hi {
            return Err(Error::TimeOutOfRange { t, horizon: hi });
        }
        let idx = self.grid.partition_point(|&g| g <= t);
        Ok(idx.saturating_sub(1).min(self.grid.len() - 2))
    }

    /// Cubic Hermite value at `t` built from the stored node derivatives.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let i = self.interval(t)?;
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let dt = t1 - t0;
        let s = (t - t0) / dt;
        let (h00, h10, h01, h11) = hermite_basis(s);
        Ok(&self.states[i] * h00
            + &self.derivs[i] * (h10 * dt)
            + &self.states[i + 1] * h01
            + &self.derivs[i + 1] * (h11 * dt))
    }

    /// Derivative of the Hermite interpolant at `t`.
    pub fn eval_deriv(&self, t: f64) -> Result<DVector<f64>> {
        let i = self.interval(t)?;
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let dt = t1 - t0;
        let s = (t - t0) / dt;
        let (d00, d10, d01, d11) = hermite_basis_deriv(s);
        Ok(&self.states[i] * (d00 / dt)
            + &self.derivs[i] * d10
            + &self.states[i + 1] * (d01 / dt)
            + &self.derivs[i + 1] * d11)
    }
}

fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    )
}

fn hermite_basis_deriv(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    (
        6.0 * s2 - 6.0 * s,
        3.0 * s2 - 4.0 * s + 1.0,
        -6.0 * s2 + 6.0 * s,
        3.0 * s2 - 2.0 * s,
    )
}
