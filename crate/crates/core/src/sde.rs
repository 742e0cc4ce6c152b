//! Diffusion problem definition and Euler-Maruyama path simulation.
//!
//! The base dynamics are `dX = b(X,t) dt + sqrt(eps) dW` with unit diffusion
//! coefficient; a proposal drift `u` turns this into `dX = (b - u) dt + sqrt(eps) dW`.
//! Trajectories are integrated on a fixed uniform grid so that downstream
//! likelihood sums line up node for node.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::basis::ControlModel;

/// State- and time-dependent scalar coefficient, e.g. the drift `b(x, t)`.
pub type ScalarField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Terminal cost `g(x)`.
pub type TerminalCost = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A trajectory is aborted (and frozen at its last state) once |X| exceeds
/// this bound. The double-well drift is only locally Lipschitz and a runaway
/// path would otherwise poison every weighted sum it enters.
pub const STATE_EXPLOSION_BOUND: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("horizon/dt = {ratio} is not an integer step count; adjust dt so the grid closes")]
    GridMismatch { ratio: f64 },
    #[error("integration diverged: non-finite state after the step at t = {t} from x = {x}")]
    IntegrationDiverged { t: f64, x: f64 },
    #[error("a batch needs at least one trajectory")]
    EmptyBatch,
    #[error("trajectory needs exactly num_steps + 1 states, got {got} for {expected} steps")]
    StateCountMismatch { got: usize, expected: usize },
}

/// The small-noise diffusion problem: drift, noise level, terminal cost and
/// the discretization used for every simulation of it.
#[derive(Clone)]
pub struct SdeProblem {
    drift: ScalarField,
    epsilon: f64,
    terminal_cost: TerminalCost,
    x0: f64,
    horizon: f64,
    dt: f64,
    num_steps: usize,
}

impl SdeProblem {
    /// Validates positivity of `epsilon`, `horizon`, `dt` and that
    /// `horizon/dt` is an integer step count (non-integer ratios are
    /// rejected, not rounded).
    pub fn new(
        drift: ScalarField,
        epsilon: f64,
        terminal_cost: TerminalCost,
        x0: f64,
        horizon: f64,
        dt: f64,
    ) -> Result<Self, SimError> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(SimError::NonPositiveEpsilon(epsilon));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(SimError::NonPositiveHorizon(horizon));
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(SimError::NonPositiveDt(dt));
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(SimError::GridMismatch { ratio });
        }
        Ok(Self {
            drift,
            epsilon,
            terminal_cost,
            x0,
            horizon,
            dt,
            num_steps: steps as usize,
        })
    }

    pub fn drift(&self, x: f64, t: f64) -> f64 {
        (self.drift)(x, t)
    }

    pub fn terminal_cost(&self, x: f64) -> f64 {
        (self.terminal_cost)(x)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            t0: 0.0,
            dt: self.dt,
            num_steps: self.num_steps,
        }
    }

    /// Same problem at a different noise level (used by efficiency sweeps).
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, SimError> {
        Self::new(
            Arc::clone(&self.drift),
            epsilon,
            Arc::clone(&self.terminal_cost),
            self.x0,
            self.horizon,
            self.dt,
        )
    }
}

impl std::fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeProblem")
            .field("epsilon", &self.epsilon)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("dt", &self.dt)
            .field("num_steps", &self.num_steps)
            .finish()
    }
}

/// Uniform time grid; node `n` sits at `t0 + n * dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub num_steps: usize,
}

impl TimeGrid {
    pub fn node(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }
}

/// One discretized path. `states` has `num_steps + 1` entries; increments are
/// derived on demand so `increment(n) == states[n+1] - states[n]` holds
/// exactly by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<f64>,
    exploded_at: Option<usize>,
}

impl Trajectory {
    pub fn from_states(grid: TimeGrid, states: Vec<f64>) -> Result<Self, SimError> {
        if states.len() != grid.num_steps + 1 {
            return Err(SimError::StateCountMismatch {
                got: states.len(),
                expected: grid.num_steps,
            });
        }
        Ok(Self {
            grid,
            states,
            exploded_at: None,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, n: usize) -> f64 {
        self.states[n]
    }

    pub fn terminal_state(&self) -> f64 {
        *self
            .states
            .last()
            .expect("trajectory has at least one state")
    }

    pub fn increment(&self, n: usize) -> f64 {
        self.states[n + 1] - self.states[n]
    }

    pub fn increments(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.windows(2).map(|w| w[1] - w[0])
    }

    /// Step index at which the explosion guard tripped, if it did.
    pub fn exploded_at(&self) -> Option<usize> {
        self.exploded_at
    }

    pub fn is_exploded(&self) -> bool {
        self.exploded_at.is_some()
    }
}

/// A batch of trajectories simulated on one shared grid, with the seed that
/// produced it. Equal `(problem, control, n_paths, seed)` reproduce the batch
/// bit for bit; every trajectory draws from its own RNG stream keyed by
/// `(seed, index)`, so the batch does not depend on evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub control_tag: String,
}

impl TrajectoryBatch {
    pub fn n_paths(&self) -> usize {
        self.trajectories.len()
    }

    pub fn grid(&self) -> TimeGrid {
        self.trajectories[0].grid()
    }

    pub fn exploded_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_exploded()).count()
    }

    /// CSV export: header `t,path_0,...,path_{N-1}`, one row per grid node.
    /// `max_paths` truncates to the first k paths for plotting-sized output.
    pub fn write_csv(&self, out: &mut impl Write, max_paths: Option<usize>) -> io::Result<()> {
        let n = max_paths.unwrap_or(usize::MAX).min(self.n_paths());
        write!(out, "t")?;
        for i in 0..n {
            write!(out, ",path_{i}")?;
        }
        writeln!(out)?;
        let grid = self.grid();
        for node in 0..=grid.num_steps {
            write!(out, "{:.16e}", grid.node(node))?;
            for traj in &self.trajectories[..n] {
                write!(out, ",{:.16e}", traj.state(node))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// One Euler-Maruyama update:
/// `x + (b(x,t) - u) dt + sqrt(eps) sqrt(dt) xi` for a standard normal draw `xi`.
pub fn euler_step(
    x: f64,
    t: f64,
    problem: &SdeProblem,
    control_value: f64,
    gaussian_draw: f64,
) -> Result<f64, SimError> {
    let dt = problem.dt;
    let next = x
        + (problem.drift(x, t) - control_value) * dt
        + (problem.epsilon * dt).sqrt() * gaussian_draw;
    if next.is_finite() {
        Ok(next)
    } else {
        Err(SimError::IntegrationDiverged { t, x })
    }
}

/// Simulates `n_paths` trajectories from `x0`. With `control = None` the
/// paths follow the base dynamics (`u = 0`); otherwise the proposal drift is
/// `b - u_theta`. All integer seeds are accepted.
pub fn simulate_batch(
    problem: &SdeProblem,
    control: Option<&ControlModel>,
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryBatch, SimError> {
    if n_paths == 0 {
        return Err(SimError::EmptyBatch);
    }
    let grid = problem.grid();
    let mut trajectories = Vec::with_capacity(n_paths);
    for index in 0..n_paths {
        trajectories.push(simulate_one(problem, control, grid, seed, index as u64)?);
    }
    Ok(TrajectoryBatch {
        trajectories,
        seed,
        control_tag: match control {
            Some(_) => "controlled".to_owned(),
            None => "none".to_owned(),
        },
    })
}

fn simulate_one(
    problem: &SdeProblem,
    control: Option<&ControlModel>,
    grid: TimeGrid,
    seed: u64,
    index: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut states = Vec::with_capacity(grid.num_steps + 1);
    let mut x = problem.x0;
    states.push(x);
    let mut exploded_at = None;
    for n in 0..grid.num_steps {
        let t = grid.node(n);
        let draw: f64 = StandardNormal.sample(&mut rng);
        let u = control.map_or(0.0, |c| c.value(x));
        x = euler_step(x, t, problem, u, draw)?;
        states.push(x);
        if x.abs() > STATE_EXPLOSION_BOUND {
            exploded_at = Some(n + 1);
            // Freeze the remaining nodes at the last state; the weight layer
            // assigns this path zero mass.
            states.resize(grid.num_steps + 1, x);
            break;
        }
    }
    Ok(Trajectory {
        grid,
        states,
        exploded_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn constant_problem(drift: f64, epsilon: f64, dt: f64, horizon: f64) -> SdeProblem {
        SdeProblem::new(
            Arc::new(move |_x, _t| drift),
            epsilon,
            Arc::new(|_x| 0.0),
            0.0,
            horizon,
            dt,
        )
        .unwrap()
    }

    #[test]
    fn euler_step_zero_drift_zero_draw_stays_put() {
        let p = constant_problem(0.0, 0.3, 0.1, 1.0);
        assert_eq!(euler_step(0.0, 0.0, &p, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn euler_step_deterministic_linear_drift() {
        let p =
            SdeProblem::new(Arc::new(|x, _t| -x), 0.3, Arc::new(|_x| 0.0), 1.0, 1.0, 0.1).unwrap();
        let next = euler_step(1.0, 0.0, &p, 0.0, 0.0).unwrap();
        assert_relative_eq!(next, 0.9, max_relative = 1e-15);
    }

    #[test]
    fn euler_step_noise_scale() {
        // sqrt(0.04) * sqrt(0.25) * 1 = 0.1
        let p = constant_problem(0.0, 0.04, 0.25, 1.0);
        let next = euler_step(0.0, 0.0, &p, 0.0, 1.0).unwrap();
        assert_relative_eq!(next, 0.1, max_relative = 1e-15);
    }

    #[test]
    fn euler_step_rejects_non_finite() {
        let p = SdeProblem::new(
            Arc::new(|_x, _t| f64::INFINITY),
            0.1,
            Arc::new(|_x| 0.0),
            0.0,
            1.0,
            0.1,
        )
        .unwrap();
        assert!(matches!(
            euler_step(0.0, 0.0, &p, 0.0, 0.0),
            Err(SimError::IntegrationDiverged { .. })
        ));
    }

    #[test]
    fn construction_rejects_open_grid() {
        let bad = SdeProblem::new(
            Arc::new(|_x, _t| 0.0),
            0.1,
            Arc::new(|_x| 0.0),
            0.0,
            1.0,
            0.3,
        );
        assert!(matches!(bad, Err(SimError::GridMismatch { .. })));
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        let drift: ScalarField = Arc::new(|_x, _t| 0.0);
        let g: TerminalCost = Arc::new(|_x| 0.0);
        assert!(SdeProblem::new(drift.clone(), -1.0, g.clone(), 0.0, 1.0, 0.1).is_err());
        assert!(SdeProblem::new(drift.clone(), 0.1, g.clone(), 0.0, -1.0, 0.1).is_err());
        assert!(SdeProblem::new(drift, 0.1, g, 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn grid_reaches_horizon_within_one_ulp() {
        for (horizon, dt) in [(1.0, 0.001), (1.0, 0.25), (2.5, 0.005), (0.7, 0.007)] {
            let p = constant_problem(0.0, 0.1, dt, horizon);
            let t_end = p.grid().node(p.num_steps());
            let ulp = f64::EPSILON * horizon;
            assert!(
                (t_end - horizon).abs() <= ulp,
                "t_M = {t_end} vs T = {horizon}"
            );
        }
    }

    #[test]
    fn same_seed_reproduces_batch_bitwise() {
        let p = SdeProblem::new(
            Arc::new(|x, _t| -4.0 * x * (x * x - 1.0)),
            0.05,
            Arc::new(|x: f64| (x - 1.0) * (x - 1.0)),
            -1.0,
            1.0,
            0.05,
        )
        .unwrap();
        let a = simulate_batch(&p, None, 3, 42).unwrap();
        let b = simulate_batch(&p, None, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_batch(&p, None, 3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_matches_explicit_euler_ode() {
        // With all gaussian draws forced to zero the path is the explicit
        // Euler solution of x' = b(x) - u. Independent loop as oracle.
        let p = SdeProblem::new(
            Arc::new(|x, _t| f64::sin(x) - 0.3 * x),
            0.2,
            Arc::new(|_x| 0.0),
            0.7,
            1.0,
            0.01,
        )
        .unwrap();
        let mut x = p.x0();
        let mut path = vec![x];
        for n in 0..p.num_steps() {
            let t = p.grid().node(n);
            x = euler_step(x, t, &p, 0.0, 0.0).unwrap();
            path.push(x);
        }
        let mut y = p.x0();
        for _ in 0..p.num_steps() {
            y += (f64::sin(y) - 0.3 * y) * p.dt();
        }
        assert_relative_eq!(*path.last().unwrap(), y, max_relative = 1e-14);
    }

    #[test]
    fn brownian_terminal_moments() {
        // b == 0, u == 0: X_T ~ N(x0, eps*T) exactly for any dt.
        let epsilon = 0.2;
        let n = 100_000;
        let p = SdeProblem::new(
            Arc::new(|_x, _t| 0.0),
            epsilon,
            Arc::new(|_x| 0.0),
            0.5,
            1.0,
            0.05,
        )
        .unwrap();
        let batch = simulate_batch(&p, None, n, 7).unwrap();
        let terminals: Vec<f64> = batch
            .trajectories
            .iter()
            .map(|t| t.terminal_state())
            .collect();
        let mean = terminals.iter().sum::<f64>() / n as f64;
        let var = terminals
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let se_mean = (epsilon / n as f64).sqrt();
        assert!(
            (mean - 0.5).abs() < 3.0 * se_mean,
            "mean {mean} vs 0.5 (3 se = {})",
            3.0 * se_mean
        );
        assert!(
            (var - epsilon).abs() < 0.1 * epsilon,
            "var {var} vs {epsilon}"
        );
    }

    #[test]
    fn double_well_rarely_crosses_without_control() {
        let p = SdeProblem::new(
            Arc::new(|x, _t| -4.0 * x * (x * x - 1.0)),
            0.05,
            Arc::new(|x: f64| (x - 1.0) * (x - 1.0)),
            -1.0,
            1.0,
            0.01,
        )
        .unwrap();
        let n = 2000;
        let batch = simulate_batch(&p, None, n, 11).unwrap();
        let crossed = batch
            .trajectories
            .iter()
            .filter(|t| t.terminal_state() > 0.0)
            .count();
        assert!(
            (crossed as f64) < 0.01 * n as f64,
            "{crossed}/{n} paths crossed"
        );
    }

    #[test]
    fn explosion_guard_freezes_path() {
        let p = constant_problem(1e9, 0.1, 0.1, 1.0);
        let batch = simulate_batch(&p, None, 2, 0).unwrap();
        assert_eq!(batch.exploded_count(), 2);
        let traj = &batch.trajectories[0];
        assert_eq!(traj.exploded_at(), Some(1));
        assert_eq!(traj.states().len(), p.num_steps() + 1);
        let frozen = traj.state(1);
        assert!(traj.states()[1..].iter().all(|&x| x == frozen));
    }

    #[test]
    fn increments_match_state_differences() {
        let p = constant_problem(0.3, 0.1, 0.25, 1.0);
        let batch = simulate_batch(&p, None, 1, 5).unwrap();
        let traj = &batch.trajectories[0];
        for n in 0..p.num_steps() {
            assert_eq!(traj.increment(n), traj.state(n + 1) - traj.state(n));
        }
        let collected: Vec<f64> = traj.increments().collect();
        assert_eq!(collected.len(), p.num_steps());
        assert_eq!(collected[0], traj.increment(0));
    }

    #[test]
    fn csv_export_shape() {
        let p = constant_problem(0.0, 0.1, 0.5, 1.0);
        let batch = simulate_batch(&p, None, 3, 1).unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf, Some(2)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,path_0,path_1");
        assert_eq!(lines.count(), 3); // nodes 0, 1, 2
    }
}
