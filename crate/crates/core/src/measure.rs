//! Discrete Girsanov likelihood ratios and self-normalized importance weights.
//!
//! All weight arithmetic stays in log space: at the parameter ranges this
//! library targets, raw weights like `exp(-80)` are representable but their
//! products and second moments are not, and self-normalization through
//! log-sum-exp sidesteps the unknown normalizing constant entirely.

use std::io::{self, Write};

use thiserror::Error;

use crate::basis::ControlModel;
use crate::sde::{SdeProblem, Trajectory, TrajectoryBatch};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("weight overflow: non-finite log-likelihood accumulation")]
    NonFiniteLikelihood,
    #[error("weight overflow: non-finite log-likelihood on trajectory {trajectory}")]
    WeightOverflow { trajectory: usize },
    #[error("degenerate weights: no trajectory carries mass")]
    DegenerateWeights,
    #[error("invalid log-weight at index {index}: {value}")]
    InvalidLogWeight { index: usize, value: f64 },
}

/// Per-trajectory log-weights of a batch toward the zero-variance measure,
/// plus their self-normalized form and effective sample size.
///
/// `log_raw = log_target - log_proposal` equals the log-importance-weight up
/// to the additive constant `-log rho`, which cancels under normalization.
/// Exploded trajectories carry `log_raw = -inf` (zero mass).
#[derive(Clone, Debug)]
pub struct WeightSet {
    pub log_target: Vec<f64>,
    pub log_proposal: Vec<f64>,
    pub log_raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub ess: f64,
}

/// Log-weight of the unnormalized zero-variance target: `-g(X_T) / eps`.
pub fn log_target_weight(traj: &Trajectory, problem: &SdeProblem) -> f64 {
    -problem.terminal_cost(traj.terminal_state()) / problem.epsilon()
}

/// Discrete Girsanov log-likelihood `log L_T^theta` of the proposal measure
/// with respect to the base path measure, evaluated along a path with
/// left-endpoint sums:
///
/// ```text
/// -(1/eps) sum u(X_n) dX_n + (1/eps) sum u(X_n) b(X_n, t_n) dt
///                          - (1/(2 eps)) sum u(X_n)^2 dt
/// ```
pub fn log_proposal_likelihood(
    traj: &Trajectory,
    model: &ControlModel,
    problem: &SdeProblem,
) -> Result<f64, MeasureError> {
    log_likelihood_with(traj, problem, |x, _t| model.value(x))
}

/// Likelihood sum for an arbitrary control function; the public entry point
/// fixes the control to a [`ControlModel`].
pub(crate) fn log_likelihood_with(
    traj: &Trajectory,
    problem: &SdeProblem,
    control: impl Fn(f64, f64) -> f64,
) -> Result<f64, MeasureError> {
    let grid = traj.grid();
    let dt = grid.dt;
    let eps = problem.epsilon();
    let mut sum_u_dx = 0.0;
    let mut sum_u_b = 0.0;
    let mut sum_u_sq = 0.0;
    for n in 0..grid.num_steps {
        let x = traj.state(n);
        let t = grid.node(n);
        let u = control(x, t);
        sum_u_dx += u * traj.increment(n);
        sum_u_b += u * problem.drift(x, t);
        sum_u_sq += u * u;
    }
    let log_l = (-sum_u_dx + sum_u_b * dt - 0.5 * sum_u_sq * dt) / eps;
    if log_l.is_finite() {
        Ok(log_l)
    } else {
        Err(MeasureError::NonFiniteLikelihood)
    }
}

/// Self-normalizes log-weights via log-sum-exp:
/// `w_i = exp(l_i - max) / sum_j exp(l_j - max)`, and reports the effective
/// sample size `1 / sum w_i^2`. `-inf` entries are allowed and get zero
/// weight; if nothing is finite the weights are degenerate.
pub fn self_normalize(log_raw: &[f64]) -> Result<(Vec<f64>, f64), MeasureError> {
    for (index, &value) in log_raw.iter().enumerate() {
        if value.is_nan() || value == f64::INFINITY {
            return Err(MeasureError::InvalidLogWeight { index, value });
        }
    }
    let max = log_raw
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MeasureError::DegenerateWeights);
    }
    let unnormalized: Vec<f64> = log_raw.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    let normalized: Vec<f64> = unnormalized.iter().map(|w| w / total).collect();
    let ess = 1.0 / normalized.iter().map(|w| w * w).sum::<f64>();
    Ok((normalized, ess))
}

impl WeightSet {
    /// Computes all weight components for a batch simulated under `control`
    /// (`None` means the base measure, `log_proposal = 0`). Exploded
    /// trajectories are assigned `-inf` raw log-weight.
    pub fn for_batch(
        batch: &TrajectoryBatch,
        control: Option<&ControlModel>,
        problem: &SdeProblem,
    ) -> Result<Self, MeasureError> {
        let n = batch.n_paths();
        let mut log_target = Vec::with_capacity(n);
        let mut log_proposal = Vec::with_capacity(n);
        let mut log_raw = Vec::with_capacity(n);
        for (index, traj) in batch.trajectories.iter().enumerate() {
            if traj.is_exploded() {
                log_target.push(f64::NEG_INFINITY);
                log_proposal.push(0.0);
                log_raw.push(f64::NEG_INFINITY);
                continue;
            }
            let target = log_target_weight(traj, problem);
            let proposal = match control {
                Some(model) => log_proposal_likelihood(traj, model, problem)
                    .map_err(|_| MeasureError::WeightOverflow { trajectory: index })?,
                None => 0.0,
            };
            log_target.push(target);
            log_proposal.push(proposal);
            log_raw.push(target - proposal);
        }
        let (normalized, ess) = self_normalize(&log_raw)?;
        Ok(Self {
            log_target,
            log_proposal,
            log_raw,
            normalized,
            ess,
        })
    }

    pub fn len(&self) -> usize {
        self.log_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_raw.is_empty()
    }

    /// CSV export: `index,log_target,log_proposal,log_raw,normalized`.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "index,log_target,log_proposal,log_raw,normalized")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{i},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.log_target[i], self.log_proposal[i], self.log_raw[i], self.normalized[i]
            )?;
        }
        Ok(())
    }
}
