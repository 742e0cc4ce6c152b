//! Finite-difference reference solver for the linear backward PDE
//!
//! ```text
//! d_t phi + b(x,t) d_x phi + (eps/2) sigma(x,t)^2 d_xx phi = 0,
//! phi(x, T) = exp(-g(x)/eps),
//! ```
//!
//! whose solution evaluates the quantity of interest directly:
//! `rho = phi(x0, 0)`. The log transform `W = -eps log phi` is the value
//! function whose spatial gradient yields the optimal proposal drift, so one
//! solve provides both a ground-truth `rho` and a reference control for the
//! Monte Carlo pipeline.
//!
//! The march is Crank-Nicolson on a uniform grid (centered first and second
//! differences, tridiagonal solve per step) with homogeneous Neumann walls,
//! second order in both grid spacings.

use std::io::{self, Write};

use thiserror::Error;

use crate::basis::ControlModel;
use crate::sde::SdeProblem;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("grid needs nx >= 3 and nt >= 1, got nx = {nx}, nt = {nt}")]
    GridTooSmall { nx: usize, nt: usize },
    #[error("grid [{x_min}, {x_max}] must satisfy x_min < x_max")]
    EmptyDomain { x_min: f64, x_max: f64 },
    #[error("x0 = {x0} lies outside the grid [{x_min}, {x_max}]")]
    X0OutsideGrid { x0: f64, x_min: f64, x_max: f64 },
    #[error("x = {x} is outside the grid [{x_min}, {x_max}]")]
    Extrapolation { x: f64, x_min: f64, x_max: f64 },
    #[error(
        "positivity violated at t = {t}, x = {x}: phi = {value:.3e}; refine the grid (smaller dt or dx)"
    )]
    PositivityViolation { t: f64, x: f64, value: f64 },
    #[error("terminal data is not finite at x = {x}")]
    NonFiniteTerminal { x: f64 },
    #[error("tridiagonal solve broke down at row {row}")]
    SolveBreakdown { row: usize },
}

/// Uniform space-time grid: `nx` spatial nodes on `[x_min, x_max]`, `nt`
/// time steps covering `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
}

impl PdeGrid {
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    fn validate(&self, x0: f64) -> Result<(), PdeError> {
        if self.nx < 3 || self.nt < 1 {
            return Err(PdeError::GridTooSmall {
                nx: self.nx,
                nt: self.nt,
            });
        }
        if self.x_min >= self.x_max || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(PdeError::EmptyDomain {
                x_min: self.x_min,
                x_max: self.x_max,
            });
        }
        if !(self.x_min < x0 && x0 < self.x_max) {
            return Err(PdeError::X0OutsideGrid {
                x0,
                x_min: self.x_min,
                x_max: self.x_max,
            });
        }
        Ok(())
    }
}

/// Solution arrays on the full space-time grid. Row `k` of `phi`/`w` holds
/// the slice at time `t_k = k * T / nt`; row `nt` is the terminal data.
#[derive(Clone, Debug)]
pub struct PdeSolution {
    pub grid: PdeGrid,
    pub horizon: f64,
    pub epsilon: f64,
    pub phi: Vec<Vec<f64>>,
    /// Log-transformed value function `W = -eps log phi` (phi floored at
    /// 1e-300 so deep-tail nodes stay finite).
    pub w: Vec<Vec<f64>>,
    /// `rho = phi(x0, 0)`, linearly interpolated between grid nodes.
    pub rho_ref: f64,
    /// Reference proposal control at `t = 0`: `u*(x) = sigma d_x W`, the
    /// drift adjustment entering the controlled dynamics `b - u*`. Centered
    /// differences inside, one-sided at the walls.
    pub u_star: Vec<f64>,
}

const PHI_LOG_FLOOR: f64 = 1e-300;

/// Solves the backward equation with unit diffusion coefficient, the setting
/// of the simulation pipeline.
pub fn solve_feynman_kac(problem: &SdeProblem, grid: &PdeGrid) -> Result<PdeSolution, PdeError> {
    solve_feynman_kac_sigma(problem, |_x, _t| 1.0, grid)
}

/// Solves the backward equation with a general scalar diffusion coefficient
/// `sigma(x, t)`.
pub fn solve_feynman_kac_sigma(
    problem: &SdeProblem,
    sigma: impl Fn(f64, f64) -> f64,
    grid: &PdeGrid,
) -> Result<PdeSolution, PdeError> {
    grid.validate(problem.x0())?;
    let nx = grid.nx;
    let nt = grid.nt;
    let dx = grid.dx();
    let horizon = problem.horizon();
    let dtau = horizon / nt as f64;
    let eps = problem.epsilon();

    let xs: Vec<f64> = (0..nx).map(|i| grid.node(i)).collect();
    let mut terminal = Vec::with_capacity(nx);
    let mut term_min = f64::INFINITY;
    let mut term_max = f64::NEG_INFINITY;
    for &x in &xs {
        let v = (-problem.terminal_cost(x) / eps).exp();
        if !v.is_finite() {
            return Err(PdeError::NonFiniteTerminal { x });
        }
        term_min = term_min.min(v);
        term_max = term_max.max(v);
        terminal.push(v);
    }
    // Maximum-principle band with a small slack for rounding; anything below
    // the negative slack is a genuine loss of positivity.
    let range = (term_max - term_min).max(term_max.abs());
    let slack = 1e-10 * range.max(1e-300);

    let mut phi = vec![vec![0.0; nx]; nt + 1];
    phi[nt] = terminal;

    // Work arrays for the tridiagonal system (I - dtau/2 L) phi_new = rhs.
    let mut lower = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    let mut rhs = vec![0.0; nx];
    let mut scratch = vec![0.0; nx];

    for k in (0..nt).rev() {
        let t_mid = (k as f64 + 0.5) * dtau;
        let half = 0.5 * dtau;
        // L phi |_i = lo_i phi_{i-1} + di_i phi_i + up_i phi_{i+1} with
        // Neumann ghosts folded into the wall rows.
        let above = &phi[k + 1];
        for i in 0..nx {
            let x = xs[i];
            let s = sigma(x, t_mid);
            let c = eps * s * s / (2.0 * dx * dx);
            let d = problem.drift(x, t_mid) / (2.0 * dx);
            let (lo, di, up) = if i == 0 {
                (0.0, -2.0 * c, 2.0 * c)
            } else if i == nx - 1 {
                (2.0 * c, -2.0 * c, 0.0)
            } else {
                (c - d, -2.0 * c, c + d)
            };
            lower[i] = -half * lo;
            diag[i] = 1.0 - half * di;
            upper[i] = -half * up;
            let l_phi =
                lo * above[i.saturating_sub(1)] + di * above[i] + up * above[(i + 1).min(nx - 1)];
            rhs[i] = above[i] + half * l_phi;
        }
        thomas_solve(&lower, &diag, &upper, &mut rhs, &mut scratch)?;
        for (i, &v) in rhs.iter().enumerate() {
            if v < term_min - slack || v > term_max + slack || !v.is_finite() {
                return Err(PdeError::PositivityViolation {
                    t: k as f64 * dtau,
                    x: xs[i],
                    value: v,
                });
            }
        }
        phi[k].copy_from_slice(&rhs);
    }

    let w: Vec<Vec<f64>> = phi
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| -eps * v.max(PHI_LOG_FLOOR).ln())
                .collect()
        })
        .collect();

    let mut u_star = vec![0.0; nx];
    let w0 = &w[0];
    for i in 0..nx {
        let dw = if i == 0 {
            (w0[1] - w0[0]) / dx
        } else if i == nx - 1 {
            (w0[nx - 1] - w0[nx - 2]) / dx
        } else {
            (w0[i + 1] - w0[i - 1]) / (2.0 * dx)
        };
        u_star[i] = sigma(xs[i], 0.0) * dw;
    }

    // Interpolate in W rather than phi: the log-transformed solution is the
    // smooth object, so the interpolation error does not inflate deep-tail
    // values of rho.
    let rho_ref = (-interpolate(grid, w0, problem.x0())? / eps).exp();

    Ok(PdeSolution {
        grid: *grid,
        horizon,
        epsilon: eps,
        phi,
        w,
        rho_ref,
        u_star,
    })
}

/// Thomas algorithm; `rhs` is overwritten with the solution.
fn thomas_solve(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), PdeError> {
    let n = rhs.len();
    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err(PdeError::SolveBreakdown { row: 0 });
    }
    scratch[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * scratch[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(PdeError::SolveBreakdown { row: i });
        }
        scratch[i] = upper[i] / denom;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
    Ok(())
}

fn interpolate(grid: &PdeGrid, values: &[f64], x: f64) -> Result<f64, PdeError> {
    if !(grid.x_min <= x && x <= grid.x_max) {
        return Err(PdeError::Extrapolation {
            x,
            x_min: grid.x_min,
            x_max: grid.x_max,
        });
    }
    let dx = grid.dx();
    let pos = (x - grid.x_min) / dx;
    let i = (pos.floor() as usize).min(grid.nx - 2);
    let frac = pos - i as f64;
    Ok(values[i] * (1.0 - frac) + values[i + 1] * frac)
}

impl PdeSolution {
    /// Reference control at `x`, linearly interpolated from the `t = 0`
    /// slice. Errors outside the grid.
    pub fn reference_control(&self, x: f64) -> Result<f64, PdeError> {
        interpolate(&self.grid, &self.u_star, x)
    }

    /// `phi(x, 0)`, interpolated linearly in `W` and mapped back.
    pub fn value_at_start(&self, x: f64) -> Result<f64, PdeError> {
        Ok((-interpolate(&self.grid, &self.w[0], x)? / self.epsilon).exp())
    }

    /// Max over `x_samples` of `|u_theta(x) - u*(x)|`: how far a fitted
    /// control sits from the reference.
    pub fn control_distance(
        &self,
        model: &ControlModel,
        x_samples: &[f64],
    ) -> Result<f64, PdeError> {
        let mut max = 0.0f64;
        for &x in x_samples {
            let diff = (model.value(x) - self.reference_control(x)?).abs();
            max = max.max(diff);
        }
        Ok(max)
    }

    /// CSV export of the `t = 0` slices with a metadata header line:
    /// `x,phi_t0,w_t0,u_star_t0`.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(
            out,
            "# x_min={:.16e} x_max={:.16e} nx={} nt={} epsilon={:.16e} horizon={:.16e} rho_ref={:.16e}",
            self.grid.x_min, self.grid.x_max, self.grid.nx, self.grid.nt,
            self.epsilon, self.horizon, self.rho_ref
        )?;
        writeln!(out, "x,phi_t0,w_t0,u_star_t0")?;
        for i in 0..self.grid.nx {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.grid.node(i),
                self.phi[0][i],
                self.w[0][i],
                self.u_star[i]
            )?;
        }
        Ok(())
    }
}
