//! Crude Monte Carlo and importance-sampling estimators of
//! `rho = E[exp(-g(X_T)/eps)]` with variance, coefficient-of-variation and
//! log-efficiency diagnostics.
//!
//! Every mean and second moment is accumulated in log space so that
//! estimates on the `1e-12` scale (and their second moments) never pass
//! through an underflowing intermediate.

use std::io::{self, Write};

use crate::basis::{ControlModel, RbfDictionary};
use crate::cross_entropy::{ce_run, CeConfig};
use crate::measure::{log_proposal_likelihood, log_target_weight, self_normalize, MeasureError};
use crate::sde::{simulate_batch, SdeProblem, TrajectoryBatch};

/// A single estimate of `rho` with its sampling diagnostics.
///
/// `log_rho_hat` is always meaningful; `rho_hat = exp(log_rho_hat)` may
/// underflow to zero for extremely rare events, in which case the estimate
/// is flagged `degenerate` and `std_error`/`cov` are NaN.
#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub rho_hat: f64,
    pub log_rho_hat: f64,
    pub std_error: f64,
    /// Coefficient of variation `std_error / rho_hat`.
    pub cov: f64,
    pub n_samples: usize,
    /// Log of the empirical second moment of the integrand.
    pub second_moment_log: f64,
    /// Effective sample size of the self-normalized integrand weights.
    pub ess: f64,
    pub degenerate: bool,
}

impl EstimateReport {
    /// Log of the empirical second-moment ratio `R = M2 / rho^2`.
    pub fn log_ratio(&self) -> f64 {
        self.second_moment_log - 2.0 * self.log_rho_hat
    }
}

/// One entry of an efficiency sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub epsilon: f64,
    /// `eps * log R_hat` for the trained control; zero means log-efficient.
    pub eps_log_ratio: f64,
    /// Same quantity for the crude estimator (`theta = 0`), which blows up
    /// as the noise shrinks.
    pub eps_log_ratio_mc: f64,
    /// `-eps * log rho_hat`, the empirical rate proxy.
    pub gamma1_hat: f64,
    pub cov_is: f64,
    pub cov_mc: f64,
    pub ess: f64,
    pub error: Option<String>,
}

/// Per-epsilon log-efficiency diagnostics for a trained proposal.
#[derive(Clone, Debug)]
pub struct EfficiencyReport {
    pub points: Vec<SweepPoint>,
}

impl EfficiencyReport {
    pub fn epsilons(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.epsilon).collect()
    }

    pub fn ratio_log(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.eps_log_ratio).collect()
    }

    pub fn gamma1_hat(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.gamma1_hat).collect()
    }
}

/// Stable `log(sum(exp(l)))` over entries that may be `-inf`.
fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = logs.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

/// Shared estimator core: given per-trajectory log-integrands, form the mean,
/// second moment, standard error and weight diagnostics in log space.
fn estimate_from_logs(logs: &[f64]) -> EstimateReport {
    let n = logs.len();
    let n_f = n as f64;
    let log_rho = log_sum_exp(logs) - n_f.ln();
    let doubled: Vec<f64> = logs.iter().map(|&l| 2.0 * l).collect();
    let second_moment_log = log_sum_exp(&doubled) - n_f.ln();

    let rho_hat = log_rho.exp();
    let degenerate = rho_hat == 0.0 || rho_hat.is_nan();
    if degenerate {
        return EstimateReport {
            rho_hat: 0.0,
            log_rho_hat: log_rho,
            std_error: f64::NAN,
            cov: f64::NAN,
            n_samples: n,
            second_moment_log,
            ess: f64::NAN,
            degenerate: true,
        };
    }

    // Var = (M2 - rho^2) / N, computed as M2 * (1 - exp(2 log rho - log M2)).
    // The exponent is <= 0 up to rounding because M2 >= rho^2 empirically.
    let gap = 2.0 * log_rho - second_moment_log;
    let variance_log = if gap >= 0.0 {
        f64::NEG_INFINITY
    } else {
        second_moment_log + (-gap.exp()).ln_1p() - n_f.ln()
    };
    let std_error = (0.5 * variance_log).exp();
    let cov = (0.5 * variance_log - log_rho).exp();
    let ess = match self_normalize(logs) {
        Ok((_, ess)) => ess,
        Err(_) => f64::NAN,
    };
    EstimateReport {
        rho_hat,
        log_rho_hat: log_rho,
        std_error,
        cov,
        n_samples: n,
        second_moment_log,
        ess,
        degenerate: false,
    }
}

/// Crude Monte Carlo estimator on a batch simulated under the base measure:
/// `rho_hat = mean(exp(-g(X_T)/eps))`. Exploded trajectories contribute zero.
pub fn mc_estimate(batch: &TrajectoryBatch, problem: &SdeProblem) -> EstimateReport {
    let logs: Vec<f64> = batch
        .trajectories
        .iter()
        .map(|traj| {
            if traj.is_exploded() {
                f64::NEG_INFINITY
            } else {
                log_target_weight(traj, problem)
            }
        })
        .collect();
    estimate_from_logs(&logs)
}

/// Importance-sampling estimator on a batch simulated under the proposal
/// `Q^theta`: `rho_hat = mean(exp(-g(X_T)/eps - log L^theta))`. With the
/// zero control this reduces bit for bit to [`mc_estimate`].
pub fn is_estimate(
    batch: &TrajectoryBatch,
    model: &ControlModel,
    problem: &SdeProblem,
) -> Result<EstimateReport, MeasureError> {
    let mut logs = Vec::with_capacity(batch.n_paths());
    for (index, traj) in batch.trajectories.iter().enumerate() {
        if traj.is_exploded() {
            logs.push(f64::NEG_INFINITY);
            continue;
        }
        let log_l = log_proposal_likelihood(traj, model, problem)
            .map_err(|_| MeasureError::WeightOverflow { trajectory: index })?;
        logs.push(log_target_weight(traj, problem) - log_l);
    }
    Ok(estimate_from_logs(&logs))
}

/// For each noise level: train a control by cross-entropy, estimate `rho`
/// under the trained proposal and under the base measure with `n_estimate`
/// fresh paths each, and record `eps log R_hat` plus the rate proxy
/// `-eps log rho_hat`. Failures are recorded per entry and the sweep
/// continues.
pub fn efficiency_sweep(
    template: &SdeProblem,
    dictionary: &RbfDictionary,
    ce_config: &CeConfig,
    n_estimate: usize,
    epsilons: &[f64],
) -> EfficiencyReport {
    let points = epsilons
        .iter()
        .map(
            |&epsilon| match sweep_point(template, dictionary, ce_config, n_estimate, epsilon) {
                Ok(point) => point,
                Err(message) => SweepPoint {
                    epsilon,
                    eps_log_ratio: f64::NAN,
                    eps_log_ratio_mc: f64::NAN,
                    gamma1_hat: f64::NAN,
                    cov_is: f64::NAN,
                    cov_mc: f64::NAN,
                    ess: f64::NAN,
                    error: Some(message),
                },
            },
        )
        .collect();
    EfficiencyReport { points }
}

/// Seed offsets separating the estimation batches from the training batches.
pub const MC_ESTIMATE_SEED_OFFSET: u64 = 1_000_000;
pub const IS_ESTIMATE_SEED_OFFSET: u64 = 2_000_000;

fn sweep_point(
    template: &SdeProblem,
    dictionary: &RbfDictionary,
    ce_config: &CeConfig,
    n_estimate: usize,
    epsilon: f64,
) -> Result<SweepPoint, String> {
    let problem = template.with_epsilon(epsilon).map_err(|e| e.to_string())?;
    let report = ce_run(&problem, dictionary, ce_config);
    if let Some(error) = report.error {
        return Err(format!("cross-entropy failed: {error}"));
    }
    let model = ControlModel::new(dictionary.clone(), report.final_theta().to_vec())
        .map_err(|e| e.to_string())?;
    let is_batch = simulate_batch(
        &problem,
        Some(&model),
        n_estimate,
        ce_config.seed.wrapping_add(IS_ESTIMATE_SEED_OFFSET),
    )
    .map_err(|e| e.to_string())?;
    let is_report = is_estimate(&is_batch, &model, &problem).map_err(|e| e.to_string())?;
    let mc_batch = simulate_batch(
        &problem,
        None,
        n_estimate,
        ce_config.seed.wrapping_add(MC_ESTIMATE_SEED_OFFSET),
    )
    .map_err(|e| e.to_string())?;
    let mc_report = mc_estimate(&mc_batch, &problem);
    Ok(SweepPoint {
        epsilon,
        eps_log_ratio: epsilon * is_report.log_ratio(),
        eps_log_ratio_mc: epsilon * mc_report.log_ratio(),
        gamma1_hat: -epsilon * is_report.log_rho_hat,
        cov_is: is_report.cov,
        cov_mc: mc_report.cov,
        ess: is_report.ess,
        error: None,
    })
}

/// Structured text record of an estimate (JSON object, one per line usage).
/// Non-finite diagnostics are emitted as `null`.
pub fn write_estimate_record(
    out: &mut impl Write,
    report: &EstimateReport,
    epsilon: f64,
    control_tag: &str,
) -> io::Result<()> {
    fn field(value: f64) -> String {
        if value.is_finite() {
            format!("{value:.16e}")
        } else {
            "null".to_owned()
        }
    }
    writeln!(
        out,
        concat!(
            "{{\"rho_hat\": {}, \"log_rho_hat\": {}, \"std_error\": {}, \"cov\": {}, ",
            "\"n\": {}, \"ess\": {}, \"epsilon\": {}, \"degenerate\": {}, \"control_tag\": \"{}\"}}"
        ),
        field(report.rho_hat),
        field(report.log_rho_hat),
        field(report.std_error),
        field(report.cov),
        report.n_samples,
        field(report.ess),
        field(epsilon),
        report.degenerate,
        control_tag,
    )
}
