//! Finite-difference WENO5-JS with global Lax-Friedrichs flux splitting and
//! third-order TVD Runge-Kutta time stepping.
//!
//! Only the `u` equation is advanced; `φ_t = 0` is kept exactly.

use log::debug;
use thiserror::Error;

use crate::flux::{self, Mobility};
use crate::harness::{CaseConfig, Form, Method, Sample, SolutionField};

pub const GHOST: usize = 3;
pub const WENO_EPS: f64 = 1e-6;
const LINEAR_WEIGHTS: [f64; 3] = [0.1, 0.6, 0.3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WenoError {
    #[error("CFL violation: alpha*dt/dx = {courant:.4} exceeds {limit}")]
    CflViolation { courant: f64, limit: f64 },
    #[error("the WENO5 reference solver only handles the conservative form")]
    NonConservativeUnsupported,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Riemann(#[from] crate::riemann::RiemannError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
    pub dx: f64,
    pub ghost: usize,
}

impl Grid1D {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN bounds too
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self, WenoError> {
        if !(x_max > x_min) || n_cells == 0 {
            return Err(WenoError::InvalidGrid(format!(
                "[{x_min}, {x_max}] with {n_cells} cells"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            n_cells,
            dx: (x_max - x_min) / n_cells as f64,
            ghost: GHOST,
        })
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    pub u: Vec<f64>,
    pub phi: Vec<f64>,
}

impl FieldPair {
    pub fn from_fn(grid: &Grid1D, init: impl Fn(f64) -> (f64, f64)) -> Self {
        let (u, phi) = grid.centers().into_iter().map(init).unzip();
        Self { u, phi }
    }

    pub fn mass(&self, dx: f64) -> f64 {
        self.u.iter().sum::<f64>() * dx
    }

    pub fn total_variation(&self) -> f64 {
        self.u.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }
}

/// Left-biased WENO5-JS value at the interface between `v[2]` and `v[3]`.
pub fn weno5_reconstruct(v: &[f64; 5]) -> f64 {
    let q0 = (2.0 * v[0] - 7.0 * v[1] + 11.0 * v[2]) / 6.0;
    let q1 = (-v[1] + 5.0 * v[2] + 2.0 * v[3]) / 6.0;
    let q2 = (2.0 * v[2] + 5.0 * v[3] - v[4]) / 6.0;

    let b0 = 13.0 / 12.0 * (v[0] - 2.0 * v[1] + v[2]).powi(2)
        + 0.25 * (v[0] - 4.0 * v[1] + 3.0 * v[2]).powi(2);
    let b1 = 13.0 / 12.0 * (v[1] - 2.0 * v[2] + v[3]).powi(2) + 0.25 * (v[1] - v[3]).powi(2);
    let b2 = 13.0 / 12.0 * (v[2] - 2.0 * v[3] + v[4]).powi(2)
        + 0.25 * (3.0 * v[2] - 4.0 * v[3] + v[4]).powi(2);

    let a0 = LINEAR_WEIGHTS[0] / (WENO_EPS + b0).powi(2);
    let a1 = LINEAR_WEIGHTS[1] / (WENO_EPS + b1).powi(2);
    let a2 = LINEAR_WEIGHTS[2] / (WENO_EPS + b2).powi(2);
    (a0 * q0 + a1 * q1 + a2 * q2) / (a0 + a1 + a2)
}

/// Numerical fluxes at the `n + 1` interfaces of `n` cells, from padded
/// point values of the split fluxes (`GHOST` cells on each side).
pub(crate) fn split_interface_fluxes(f_plus: &[f64], f_minus: &[f64], n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| {
            // interface between padded cells p and p+1
            let p = k + GHOST - 1;
            let plus = weno5_reconstruct(&[
                f_plus[p - 2],
                f_plus[p - 1],
                f_plus[p],
                f_plus[p + 1],
                f_plus[p + 2],
            ]);
            let minus = weno5_reconstruct(&[
                f_minus[p + 3],
                f_minus[p + 2],
                f_minus[p + 1],
                f_minus[p],
                f_minus[p - 1],
            ]);
            plus + minus
        })
        .collect()
}

/// One step of the Shu-Osher three-stage scheme for `dU/dt = L(U)`.
pub fn tvd_rk3<E>(
    u: &[f64],
    dt: f64,
    mut operator: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
) -> Result<Vec<f64>, E> {
    let l0 = operator(u)?;
    let u1: Vec<f64> = u.iter().zip(&l0).map(|(a, l)| a + dt * l).collect();
    let l1 = operator(&u1)?;
    let u2: Vec<f64> = u
        .iter()
        .zip(u1.iter().zip(&l1))
        .map(|(a, (b, l))| 0.75 * a + 0.25 * (b + dt * l))
        .collect();
    let l2 = operator(&u2)?;
    Ok(u
        .iter()
        .zip(u2.iter().zip(&l2))
        .map(|(a, (b, l))| a / 3.0 + 2.0 / 3.0 * (b + dt * l))
        .collect())
}

#[derive(Debug, Clone)]
pub struct WenoSolver {
    pub grid: Grid1D,
    pub mobility: Mobility,
    pub cfl: f64,
    /// Accumulated `Σ|clip|` applied to keep `0 ≤ u ≤ φ`.
    pub clipped: f64,
}

impl WenoSolver {
    pub fn new(grid: Grid1D, mobility: Mobility, cfl: f64) -> Self {
        Self {
            grid,
            mobility,
            cfl,
            clipped: 0.0,
        }
    }

    /// `max |f_u|` over the cells.
    pub fn max_speed(&self, fields: &FieldPair) -> f64 {
        fields
            .u
            .iter()
            .zip(&fields.phi)
            .map(|(&u, &p)| flux::flux_f_u(u, p, &self.mobility).unwrap_or(0.0).abs())
            .fold(0.0, f64::max)
    }

    fn interface_fluxes(&self, u: &[f64], phi: &[f64], alpha: f64) -> Vec<f64> {
        let n = u.len();
        let mut f_plus = Vec::with_capacity(n + 2 * GHOST);
        let mut f_minus = Vec::with_capacity(n + 2 * GHOST);
        for p in 0..n + 2 * GHOST {
            let i = p.saturating_sub(GHOST).min(n - 1);
            let f = flux::flux_f(u[i], phi[i], &self.mobility).unwrap_or(0.0);
            f_plus.push(0.5 * (f + alpha * u[i]));
            f_minus.push(0.5 * (f - alpha * u[i]));
        }
        split_interface_fluxes(&f_plus, &f_minus, n)
    }

    fn u_rate(&self, u: &[f64], phi: &[f64]) -> Vec<f64> {
        let alpha = self.max_speed_of(u, phi);
        let fhat = self.interface_fluxes(u, phi, alpha);
        let inv_dx = 1.0 / self.grid.dx;
        fhat.windows(2).map(|w| -(w[1] - w[0]) * inv_dx).collect()
    }

    fn max_speed_of(&self, u: &[f64], phi: &[f64]) -> f64 {
        u.iter()
            .zip(phi)
            .map(|(&u, &p)| flux::flux_f_u(u, p, &self.mobility).unwrap_or(0.0).abs())
            .fold(0.0, f64::max)
    }

    /// Time derivative `(−∂x F̂, 0)`; ghost cells use constant extrapolation.
    pub fn rhs(&self, fields: &FieldPair) -> FieldPair {
        FieldPair {
            u: self.u_rate(&fields.u, &fields.phi),
            phi: vec![0.0; fields.phi.len()],
        }
    }

    pub fn stable_dt(&self, fields: &FieldPair) -> f64 {
        let alpha = self.max_speed(fields);
        if alpha > 0.0 {
            self.cfl * self.grid.dx / alpha
        } else {
            f64::INFINITY
        }
    }

    /// Advances one TVD-RK3 step and clips `u` into `[0, φ]`.
    pub fn step_tvdrk3(&mut self, fields: &FieldPair, dt: f64) -> Result<FieldPair, WenoError> {
        let courant = self.max_speed(fields) * dt / self.grid.dx;
        if courant > self.cfl * (1.0 + 1e-9) {
            return Err(WenoError::CflViolation {
                courant,
                limit: self.cfl,
            });
        }
        let phi = &fields.phi;
        let mut u = tvd_rk3(&fields.u, dt, |v| {
            Ok::<_, WenoError>(self.u_rate(v, phi))
        })?;
        let mut clipped = 0.0;
        for (v, &p) in u.iter_mut().zip(phi) {
            let c = v.clamp(0.0, p);
            clipped += (c - *v).abs();
            *v = c;
        }
        if clipped > 0.0 {
            debug!("clipped {clipped:.3e} of u into [0, phi]");
        }
        self.clipped += clipped;
        Ok(FieldPair {
            u,
            phi: phi.clone(),
        })
    }

    /// Marches from `t0` to each of `times` (sorted ascending), returning the
    /// fields at every output time.
    pub fn march(
        &mut self,
        mut fields: FieldPair,
        t0: f64,
        times: &[f64],
    ) -> Result<Vec<FieldPair>, WenoError> {
        let mut t = t0;
        let mut out = Vec::with_capacity(times.len());
        for &target in times {
            while t < target - 1e-14 {
                let dt = self.stable_dt(&fields).min(target - t);
                fields = self.step_tvdrk3(&fields, dt)?;
                t += dt;
            }
            out.push(fields.clone());
        }
        Ok(out)
    }
}

/// Linear interpolation of cell-centre values; constant beyond the ends.
pub fn sample_cells(grid: &Grid1D, values: &[f64], x: f64) -> f64 {
    let s = (x - grid.x_min) / grid.dx - 0.5;
    if s <= 0.0 {
        return values[0];
    }
    let i = s.floor() as usize;
    if i + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let w = s - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

/// Result of a full WENO5 run: the sampled field plus run diagnostics.
#[derive(Debug, Clone)]
pub struct WenoRun {
    pub field: SolutionField,
    pub grid: Grid1D,
    pub final_fields: FieldPair,
    pub clipped: f64,
}

pub fn solve_weno(case: &CaseConfig) -> Result<WenoRun, WenoError> {
    if case.form != Form::Conservative {
        return Err(WenoError::NonConservativeUnsupported);
    }
    let data = case.riemann_data()?;
    let (x_min, x_max, _) = case.domain;
    let n_cells = case.weno.cells_for(x_max - x_min);
    let grid = Grid1D::new(x_min, x_max, n_cells)?;
    let fields = FieldPair::from_fn(&grid, |x| {
        let s = data.initial_state(x);
        (s.u, s.phi)
    });
    let mut solver = WenoSolver::new(grid, data.mobility.clone(), case.weno.cfl);
    let times = case.eval.times.clone();
    let snapshots = solver.march(fields, 0.0, &times)?;
    let xs = case.eval.xs(case.domain);
    let mut samples = Vec::with_capacity(xs.len() * times.len());
    for (t, snap) in times.iter().zip(&snapshots) {
        for &x in &xs {
            samples.push(Sample {
                x,
                t: *t,
                u: sample_cells(&grid, &snap.u, x),
                phi: sample_cells(&grid, &snap.phi, x),
            });
        }
    }
    Ok(WenoRun {
        field: SolutionField::new(&case.name, Method::Weno5, None, samples),
        grid,
        final_fields: snapshots.last().cloned().unwrap_or_else(|| FieldPair {
            u: vec![],
            phi: vec![],
        }),
        clipped: solver.clipped,
    })
}
