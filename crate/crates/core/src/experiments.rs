//! Configuration-driven experiment harness.
//!
//! Three ready-made studies share one flat TOML config: the double-well
//! rare-event run, a zero-drift Gaussian benchmark with a closed-form answer,
//! and a noise-level sweep tracking log-efficiency of the trained proposal.
//! Each runner writes CSV / JSON artifacts suitable for external plotting and
//! returns the in-memory results for programmatic use.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::basis::{ControlModel, RbfDictionary};
use crate::cross_entropy::{ce_run, CeConfig, CeReport, Ridge};
use crate::estimators::{
    efficiency_sweep, is_estimate, mc_estimate, write_estimate_record, EfficiencyReport,
    EstimateReport, IS_ESTIMATE_SEED_OFFSET, MC_ESTIMATE_SEED_OFFSET,
};
use crate::pde::{solve_feynman_kac, PdeGrid, PdeSolution};
use crate::sde::{simulate_batch, ScalarField, SdeProblem, TerminalCost, TrajectoryBatch};

/// Paths are counted as having reached the favored well when the terminal
/// state exceeds this threshold.
pub const CROSSING_THRESHOLD: f64 = 0.5;

/// Number of paths kept in trajectory CSV exports.
pub const TRAJECTORY_EXPORT_PATHS: usize = 100;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> ExperimentError {
    move |err| ExperimentError::Stage {
        stage,
        message: err.to_string(),
    }
}

/// Flat experiment configuration. Unknown keys are rejected; every field has
/// a documented default matching the double-well study.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Noise level.
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    /// Integrator step.
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    /// Time horizon.
    #[serde(rename = "T", default = "defaults::horizon")]
    pub horizon: f64,
    /// Initial state.
    #[serde(default = "defaults::x0")]
    pub x0: f64,
    /// Double-well strength; the drift is `-4 kappa x (x^2 - 1)` (zero
    /// drift when `kappa = 0`).
    #[serde(default = "defaults::one")]
    pub kappa: f64,
    /// Terminal cost strength; `g(x) = nu (x - 1)^2`.
    #[serde(default = "defaults::one")]
    pub nu: f64,
    /// Trajectories per cross-entropy iteration.
    #[serde(rename = "N_ce", default = "defaults::n_ce")]
    pub n_ce: usize,
    /// Trajectories for the final estimators.
    #[serde(rename = "N_estimate", default = "defaults::n_estimate")]
    pub n_estimate: usize,
    /// Dictionary size.
    #[serde(rename = "J", default = "defaults::n_bases")]
    pub n_bases: usize,
    /// Centers follow `c_m = center_start + center_step * m`, `m = 1..=J`.
    #[serde(default = "defaults::center_start")]
    pub center_start: f64,
    #[serde(default = "defaults::center_step")]
    pub center_step: f64,
    /// Common RBF width.
    #[serde(default = "defaults::width")]
    pub width: f64,
    /// Relative ridge factor; the solve uses `lambda = ridge * trace(A) / J`.
    #[serde(default = "defaults::ridge")]
    pub ridge: f64,
    /// Convergence tolerance on the coefficient update (max-norm).
    #[serde(default = "defaults::tol")]
    pub tol: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    /// Any integer is a valid seed; negative values wrap.
    #[serde(default)]
    pub seed: i64,
    /// Reference PDE domain and resolution.
    #[serde(default = "defaults::x_min")]
    pub x_min: f64,
    #[serde(default = "defaults::x_max")]
    pub x_max: f64,
    #[serde(default = "defaults::nx")]
    pub nx: usize,
    #[serde(default = "defaults::nt")]
    pub nt: usize,
    /// Artifact directory.
    #[serde(default = "defaults::out_dir")]
    pub out_dir: String,
    /// Noise levels for the sweep subcommand.
    #[serde(default = "defaults::epsilons")]
    pub epsilons: Vec<f64>,
}

mod defaults {
    pub fn epsilon() -> f64 {
        0.05
    }
    pub fn dt() -> f64 {
        0.001
    }
    pub fn horizon() -> f64 {
        1.0
    }
    pub fn x0() -> f64 {
        -1.0
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn n_ce() -> usize {
        30_000
    }
    pub fn n_estimate() -> usize {
        30_000
    }
    pub fn n_bases() -> usize {
        17
    }
    pub fn center_start() -> f64 {
        -1.5
    }
    pub fn center_step() -> f64 {
        0.1
    }
    pub fn width() -> f64 {
        0.5
    }
    pub fn ridge() -> f64 {
        1e-3
    }
    pub fn tol() -> f64 {
        1e-2
    }
    pub fn max_iters() -> usize {
        10
    }
    pub fn x_min() -> f64 {
        -6.0
    }
    pub fn x_max() -> f64 {
        6.0
    }
    pub fn nx() -> usize {
        4001
    }
    pub fn nt() -> usize {
        2000
    }
    pub fn out_dir() -> String {
        "out".to_owned()
    }
    pub fn epsilons() -> Vec<f64> {
        vec![0.4, 0.2, 0.1, 0.05]
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config("").expect("empty config uses defaults")
    }
}

/// Parses a flat TOML document, filling documented defaults. Unknown keys,
/// type mismatches and constraint violations are errors naming the key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config_from_table(table)
}

/// Builds a config from an optional file body plus two layers of `key=value`
/// overrides: `pre` sits below the file (subcommand baselines), `post` above
/// it (command-line `--override`s).
pub fn build_config(
    file_text: Option<&str>,
    pre: &[&str],
    post: &[&str],
) -> Result<ExperimentConfig, ConfigError> {
    let mut table = toml::Table::new();
    for entry in pre {
        merge_override(&mut table, entry)?;
    }
    if let Some(text) = file_text {
        let file_table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, value) in file_table {
            table.insert(key, value);
        }
    }
    for entry in post {
        merge_override(&mut table, entry)?;
    }
    config_from_table(table)
}

fn merge_override(table: &mut toml::Table, entry: &str) -> Result<(), ConfigError> {
    let parsed: toml::Table = toml::from_str(entry).map_err(|e| {
        ConfigError::Parse(format!("override `{entry}` is not a key=value pair: {e}"))
    })?;
    if parsed.is_empty() {
        return Err(ConfigError::Parse(format!(
            "override `{entry}` does not set any key"
        )));
    }
    for (key, value) in parsed {
        table.insert(key, value);
    }
    Ok(())
}

fn config_from_table(table: toml::Table) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(key: &'static str, value: f64) -> Result<(), ConfigError> {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    message: format!("must be positive, got {value}"),
                })
            }
        }
        positive("epsilon", self.epsilon)?;
        positive("dt", self.dt)?;
        positive("T", self.horizon)?;
        positive("width", self.width)?;
        positive("tol", self.tol)?;
        let ratio = self.horizon / self.dt;
        if (ratio.round() * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0)
            || ratio.round() < 1.0
        {
            return Err(ConfigError::Invalid {
                key: "dt",
                message: format!("T/dt = {ratio} is not an integer number of steps"),
            });
        }
        for (key, value) in [
            ("kappa", self.kappa),
            ("nu", self.nu),
            ("ridge", self.ridge),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::Invalid {
                    key,
                    message: format!("must be nonnegative, got {value}"),
                });
            }
        }
        if self.n_ce < 2 {
            return Err(ConfigError::Invalid {
                key: "N_ce",
                message: format!("needs at least 2 trajectories, got {}", self.n_ce),
            });
        }
        if self.n_estimate < 1 {
            return Err(ConfigError::Invalid {
                key: "N_estimate",
                message: "needs at least 1 trajectory".to_owned(),
            });
        }
        if self.n_bases == 0 {
            return Err(ConfigError::Invalid {
                key: "J",
                message: "dictionary cannot be empty".to_owned(),
            });
        }
        if !(self.x_min < self.x0 && self.x0 < self.x_max) {
            return Err(ConfigError::Invalid {
                key: "x0",
                message: format!(
                    "x0 = {} must lie inside the PDE domain [{}, {}]",
                    self.x0, self.x_min, self.x_max
                ),
            });
        }
        if self.nx < 3 || self.nt < 1 {
            return Err(ConfigError::Invalid {
                key: "nx",
                message: format!(
                    "PDE grid needs nx >= 3 and nt >= 1, got {}, {}",
                    self.nx, self.nt
                ),
            });
        }
        if self.epsilons.iter().any(|&e| !e.is_finite() || e <= 0.0) {
            return Err(ConfigError::Invalid {
                key: "epsilons",
                message: "every entry must be positive".to_owned(),
            });
        }
        Ok(())
    }

    /// The diffusion problem described by this config: drift
    /// `-4 kappa x (x^2 - 1)` and terminal cost `nu (x - 1)^2`.
    pub fn problem(&self) -> Result<SdeProblem, ConfigError> {
        SdeProblem::new(
            double_well_drift(self.kappa),
            self.epsilon,
            quadratic_cost(self.nu),
            self.x0,
            self.horizon,
            self.dt,
        )
        .map_err(|e| ConfigError::Invalid {
            key: "dt",
            message: e.to_string(),
        })
    }

    pub fn dictionary(&self) -> Result<RbfDictionary, ConfigError> {
        RbfDictionary::uniform(
            self.center_start,
            self.center_step,
            self.n_bases,
            self.width,
        )
        .map_err(|e| ConfigError::Invalid {
            key: "J",
            message: e.to_string(),
        })
    }

    /// The seed as consumed by the generators (negative config values wrap).
    pub fn seed(&self) -> u64 {
        self.seed as u64
    }

    pub fn ce_config(&self) -> CeConfig {
        CeConfig {
            n_paths: self.n_ce,
            max_iters: self.max_iters,
            ridge: Ridge::Relative(self.ridge),
            tol: self.tol,
            seed: self.seed(),
        }
    }

    pub fn pde_grid(&self) -> PdeGrid {
        PdeGrid {
            x_min: self.x_min,
            x_max: self.x_max,
            nx: self.nx,
            nt: self.nt,
        }
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }
}

/// Gradient drift of the double-well potential `kappa (x^2 - 1)^2`.
pub fn double_well_drift(kappa: f64) -> ScalarField {
    Arc::new(move |x, _t| -4.0 * kappa * x * (x * x - 1.0))
}

/// `g(x) = nu (x - 1)^2`.
pub fn quadratic_cost(nu: f64) -> TerminalCost {
    Arc::new(move |x| nu * (x - 1.0) * (x - 1.0))
}

/// `V(x) = kappa (x^2 - 1)^2`.
pub fn double_well_potential(kappa: f64, x: f64) -> f64 {
    let q = x * x - 1.0;
    kappa * q * q
}

/// Closed form of `E[exp(-nu (X_T - 1)^2 / eps)]` for the zero-drift problem,
/// where `X_T ~ N(x0, eps T)`:
/// `(1 + 2 nu T)^{-1/2} exp(-nu (x0 - 1)^2 / (eps (1 + 2 nu T)))`.
pub fn gaussian_closed_form(nu: f64, x0: f64, horizon: f64, epsilon: f64) -> f64 {
    let scale = 1.0 + 2.0 * nu * horizon;
    scale.powf(-0.5) * (-nu * (x0 - 1.0) * (x0 - 1.0) / (epsilon * scale)).exp()
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

/// Results of the double-well study.
#[derive(Debug)]
pub struct DoubleWellOutcome {
    pub mc: EstimateReport,
    pub is: EstimateReport,
    pub ce: CeReport,
    pub pde: PdeSolution,
    pub log_rho_ref: f64,
    pub frac_uncontrolled_above: f64,
    pub frac_controlled_above: f64,
    /// Max |u_theta - u*| over the well-to-well corridor [-1.3, 1.3].
    pub control_distance: f64,
}

/// Results of the Gaussian benchmark.
#[derive(Debug)]
pub struct GaussianOutcome {
    pub closed_form: f64,
    pub mc: EstimateReport,
    pub is: EstimateReport,
    pub ce: CeReport,
    pub rho_ref: f64,
}

fn crossing_fraction(batch: &TrajectoryBatch) -> f64 {
    let above = batch
        .trajectories
        .iter()
        .filter(|t| t.terminal_state() > CROSSING_THRESHOLD)
        .count();
    above as f64 / batch.n_paths() as f64
}

fn create_out_dir(config: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    let dir = config.out_path();
    fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

fn write_artifact(
    dir: &Path,
    name: &str,
    write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    let to_err = |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(&path).map_err(to_err)?;
    let mut out = BufWriter::new(file);
    write(&mut out).and_then(|()| out.flush()).map_err(to_err)
}

fn json_number(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else {
        "null".to_owned()
    }
}

/// Full double-well pipeline: crude MC, cross-entropy training, importance
/// sampling under the trained control, the PDE reference, and the plotting
/// tables. Artifacts land in `config.out_dir`.
pub fn run_doublewell(config: &ExperimentConfig) -> Result<DoubleWellOutcome, ExperimentError> {
    let dir = create_out_dir(config)?;
    let problem = config.problem()?;
    let dictionary = config.dictionary()?;

    // Crude Monte Carlo under the base dynamics.
    let mc_batch = simulate_batch(
        &problem,
        None,
        config.n_estimate,
        config.seed().wrapping_add(MC_ESTIMATE_SEED_OFFSET),
    )
    .map_err(stage_err("mc"))?;
    let mc = mc_estimate(&mc_batch, &problem);
    write_artifact(&dir, "trajectories_uncontrolled.csv", |out| {
        mc_batch.write_csv(out, Some(TRAJECTORY_EXPORT_PATHS))
    })?;
    write_artifact(&dir, "estimate_mc.json", |out| {
        write_estimate_record(out, &mc, config.epsilon, "none")
    })?;
    let frac_uncontrolled_above = crossing_fraction(&mc_batch);
    drop(mc_batch);

    // Cross-entropy training.
    let ce = ce_run(&problem, &dictionary, &config.ce_config());
    write_artifact(&dir, "theta_history.csv", |out| ce.write_csv(out))?;
    if let Some(error) = &ce.error {
        return Err(ExperimentError::Stage {
            stage: "ce",
            message: error.clone(),
        });
    }
    let model = ControlModel::new(dictionary.clone(), ce.final_theta().to_vec())
        .map_err(stage_err("ce"))?;

    // Importance sampling under the trained proposal.
    let is_batch = simulate_batch(
        &problem,
        Some(&model),
        config.n_estimate,
        config.seed().wrapping_add(IS_ESTIMATE_SEED_OFFSET),
    )
    .map_err(stage_err("is"))?;
    let is = is_estimate(&is_batch, &model, &problem).map_err(stage_err("is"))?;
    write_artifact(&dir, "trajectories_controlled.csv", |out| {
        is_batch.write_csv(out, Some(TRAJECTORY_EXPORT_PATHS))
    })?;
    write_artifact(&dir, "estimate_is.json", |out| {
        write_estimate_record(out, &is, config.epsilon, &is_batch.control_tag)
    })?;
    let frac_controlled_above = crossing_fraction(&is_batch);
    drop(is_batch);

    // PDE reference.
    let pde = solve_feynman_kac(&problem, &config.pde_grid()).map_err(stage_err("pde"))?;
    let log_rho_ref = pde.rho_ref.max(1e-300).ln();
    write_artifact(&dir, "pde_reference.json", |out| {
        writeln!(
            out,
            "{{\"rho_ref\": {}, \"log_rho_ref\": {}, \"epsilon\": {}, \"nx\": {}, \"nt\": {}, \"x_min\": {}, \"x_max\": {}}}",
            json_number(pde.rho_ref),
            json_number(log_rho_ref),
            json_number(config.epsilon),
            config.nx,
            config.nt,
            json_number(config.x_min),
            json_number(config.x_max),
        )
    })?;

    // Potential / control table.
    write_artifact(&dir, "potential_control.csv", |out| {
        write_potential_control_table(out, config.kappa, &model, &pde)
    })?;

    let distance_samples: Vec<f64> = (0..=260).map(|k| -1.3 + 0.01 * k as f64).collect();
    let control_distance = pde
        .control_distance(&model, &distance_samples)
        .map_err(stage_err("pde"))?;

    let outcome = DoubleWellOutcome {
        mc,
        is,
        ce,
        pde,
        log_rho_ref,
        frac_uncontrolled_above,
        frac_controlled_above,
        control_distance,
    };
    write_artifact(&dir, "summary.json", |out| {
        write_doublewell_summary(out, config, &outcome)
    })?;
    Ok(outcome)
}

fn write_doublewell_summary(
    out: &mut impl Write,
    config: &ExperimentConfig,
    outcome: &DoubleWellOutcome,
) -> io::Result<()> {
    let ce_error = match &outcome.ce.error {
        Some(e) => format!("\"{}\"", e.replace('"', "'")),
        None => "null".to_owned(),
    };
    writeln!(
        out,
        concat!(
            "{{\"epsilon\": {}, \"seed\": {}, ",
            "\"rho_mc\": {}, \"log_rho_mc\": {}, \"cov_mc\": {}, \"mc_degenerate\": {}, ",
            "\"rho_is\": {}, \"log_rho_is\": {}, \"cov_is\": {}, \"ess_is\": {}, ",
            "\"rho_ref\": {}, \"log_rho_ref\": {}, ",
            "\"ce_converged\": {}, \"ce_iterations\": {}, \"ce_error\": {}, ",
            "\"frac_uncontrolled_above\": {}, \"frac_controlled_above\": {}, ",
            "\"control_distance\": {}}}"
        ),
        json_number(config.epsilon),
        config.seed,
        json_number(outcome.mc.rho_hat),
        json_number(outcome.mc.log_rho_hat),
        json_number(outcome.mc.cov),
        outcome.mc.degenerate,
        json_number(outcome.is.rho_hat),
        json_number(outcome.is.log_rho_hat),
        json_number(outcome.is.cov),
        json_number(outcome.is.ess),
        json_number(outcome.pde.rho_ref),
        json_number(outcome.log_rho_ref),
        outcome.ce.converged,
        outcome.ce.iterations_used,
        ce_error,
        json_number(outcome.frac_uncontrolled_above),
        json_number(outcome.frac_controlled_above),
        json_number(outcome.control_distance),
    )
}

/// Table backing the potential / control figure:
/// `x,V(x),V_modified(x),u_theta(x),u_star(x)` on a uniform grid over
/// [-2, 2]. The modified potential integrates the learned control so that
/// `-V_modified' = b - u_theta` up to quadrature:
/// `V_mod(x) = V(x) + int_0^x u_theta(s) ds` (trapezoid).
pub fn write_potential_control_table(
    out: &mut impl Write,
    kappa: f64,
    model: &ControlModel,
    pde: &PdeSolution,
) -> io::Result<()> {
    const STEP: f64 = 0.01;
    const COUNT: usize = 401; // [-2, 2]
    let xs: Vec<f64> = (0..COUNT).map(|i| -2.0 + STEP * i as f64).collect();
    let u: Vec<f64> = xs.iter().map(|&x| model.value(x)).collect();
    // Cumulative trapezoid from the left edge, then anchored at x = 0.
    let mut cumulative = vec![0.0; COUNT];
    for i in 1..COUNT {
        cumulative[i] = cumulative[i - 1] + 0.5 * (u[i - 1] + u[i]) * STEP;
    }
    let anchor = cumulative[COUNT / 2]; // x = 0 sits in the middle
    writeln!(out, "x,V(x),V_modified(x),u_theta(x),u_star(x)")?;
    for i in 0..COUNT {
        let v = double_well_potential(kappa, xs[i]);
        let v_mod = v + cumulative[i] - anchor;
        let u_star = pde.reference_control(xs[i]).unwrap_or(f64::NAN);
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            xs[i], v, v_mod, u[i], u_star
        )?;
    }
    Ok(())
}

/// Zero-drift Gaussian benchmark: requires `kappa = 0` so the closed form
/// applies, then compares crude MC, trained IS and the PDE reference against
/// it. Artifacts: the two estimate records, the training history, the PDE
/// record and a comparison summary.
pub fn run_gaussian_oracle(config: &ExperimentConfig) -> Result<GaussianOutcome, ExperimentError> {
    if config.kappa != 0.0 {
        return Err(ExperimentError::Config(ConfigError::Invalid {
            key: "kappa",
            message: format!(
                "the Gaussian benchmark needs zero drift (kappa = 0), got {}",
                config.kappa
            ),
        }));
    }
    let dir = create_out_dir(config)?;
    let problem = config.problem()?;
    let dictionary = config.dictionary()?;
    let closed_form = gaussian_closed_form(config.nu, config.x0, config.horizon, config.epsilon);

    let mc_batch = simulate_batch(
        &problem,
        None,
        config.n_estimate,
        config.seed().wrapping_add(MC_ESTIMATE_SEED_OFFSET),
    )
    .map_err(stage_err("mc"))?;
    let mc = mc_estimate(&mc_batch, &problem);
    write_artifact(&dir, "estimate_mc.json", |out| {
        write_estimate_record(out, &mc, config.epsilon, "none")
    })?;
    drop(mc_batch);

    let ce = ce_run(&problem, &dictionary, &config.ce_config());
    write_artifact(&dir, "theta_history.csv", |out| ce.write_csv(out))?;
    if let Some(error) = &ce.error {
        return Err(ExperimentError::Stage {
            stage: "ce",
            message: error.clone(),
        });
    }
    let model =
        ControlModel::new(dictionary, ce.final_theta().to_vec()).map_err(stage_err("ce"))?;
    let is_batch = simulate_batch(
        &problem,
        Some(&model),
        config.n_estimate,
        config.seed().wrapping_add(IS_ESTIMATE_SEED_OFFSET),
    )
    .map_err(stage_err("is"))?;
    let is = is_estimate(&is_batch, &model, &problem).map_err(stage_err("is"))?;
    write_artifact(&dir, "estimate_is.json", |out| {
        write_estimate_record(out, &is, config.epsilon, &is_batch.control_tag)
    })?;
    drop(is_batch);

    let pde = solve_feynman_kac(&problem, &config.pde_grid()).map_err(stage_err("pde"))?;
    write_artifact(&dir, "pde_reference.json", |out| {
        writeln!(
            out,
            "{{\"rho_ref\": {}, \"epsilon\": {}, \"nx\": {}, \"nt\": {}}}",
            json_number(pde.rho_ref),
            json_number(config.epsilon),
            config.nx,
            config.nt,
        )
    })?;

    let rel = |value: f64| (value - closed_form).abs() / closed_form;
    write_artifact(&dir, "comparison.json", |out| {
        writeln!(
            out,
            concat!(
                "{{\"closed_form\": {}, ",
                "\"rho_mc\": {}, \"rel_err_mc\": {}, \"mc_degenerate\": {}, ",
                "\"rho_is\": {}, \"rel_err_is\": {}, ",
                "\"rho_ref\": {}, \"rel_err_ref\": {}}}"
            ),
            json_number(closed_form),
            json_number(mc.rho_hat),
            json_number(rel(mc.rho_hat)),
            mc.degenerate,
            json_number(is.rho_hat),
            json_number(rel(is.rho_hat)),
            json_number(pde.rho_ref),
            json_number(rel(pde.rho_ref)),
        )
    })?;

    Ok(GaussianOutcome {
        closed_form,
        mc,
        is,
        ce,
        rho_ref: pde.rho_ref,
    })
}

/// Noise-level sweep. Writes `sweep.csv` with one row per epsilon and
/// succeeds when at least one entry did.
pub fn run_sweep(
    config: &ExperimentConfig,
    epsilons: &[f64],
) -> Result<EfficiencyReport, ExperimentError> {
    if epsilons.is_empty() {
        return Err(ExperimentError::Config(ConfigError::Invalid {
            key: "epsilons",
            message: "the sweep needs at least one noise level".to_owned(),
        }));
    }
    let dir = create_out_dir(config)?;
    let template = config.problem()?;
    let dictionary = config.dictionary()?;
    let report = efficiency_sweep(
        &template,
        &dictionary,
        &config.ce_config(),
        config.n_estimate,
        epsilons,
    );
    write_artifact(&dir, "sweep.csv", |out| {
        writeln!(out, "epsilon,eps_log_R,gamma1_hat,cov_is,cov_mc,ess,error")?;
        for point in &report.points {
            let mut row = String::new();
            let _ = write!(row, "{:.16e}", point.epsilon);
            for value in [
                point.eps_log_ratio,
                point.gamma1_hat,
                point.cov_is,
                point.cov_mc,
                point.ess,
            ] {
                if value.is_finite() {
                    let _ = write!(row, ",{value:.16e}");
                } else {
                    let _ = write!(row, ",");
                }
            }
            match &point.error {
                Some(e) => writeln!(out, "{row},\"{}\"", e.replace('"', "'"))?,
                None => writeln!(out, "{row},")?,
            }
        }
        Ok(())
    })?;
    if report.points.iter().all(|p| p.error.is_some()) {
        return Err(ExperimentError::Stage {
            stage: "sweep",
            message: "every noise level failed".to_owned(),
        });
    }
    Ok(report)
}

/// Standalone PDE solve: writes the solution CSV and the reference record.
pub fn run_pde(config: &ExperimentConfig) -> Result<PdeSolution, ExperimentError> {
    let dir = create_out_dir(config)?;
    let problem = config.problem()?;
    let pde = solve_feynman_kac(&problem, &config.pde_grid()).map_err(stage_err("pde"))?;
    write_artifact(&dir, "pde_solution.csv", |out| pde.write_csv(out))?;
    write_artifact(&dir, "pde_reference.json", |out| {
        writeln!(
            out,
            "{{\"rho_ref\": {}, \"epsilon\": {}, \"nx\": {}, \"nt\": {}}}",
            json_number(pde.rho_ref),
            json_number(config.epsilon),
            config.nx,
            config.nt,
        )
    })?;
    Ok(pde)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn minimal_document_applies_defaults() {
        let config = parse_config("epsilon = 0.05").unwrap();
        assert_eq!(config.epsilon, 0.05);
        assert_eq!(config.dt, 0.001);
        assert_eq!(config.horizon, 1.0);
        assert_eq!(config.n_ce, 30_000);
        assert_eq!(config.n_estimate, 30_000);
        assert_eq!(config.n_bases, 17);
        assert_eq!(config.x0, -1.0);
        assert_eq!(config.kappa, 1.0);
        assert_eq!(config.nu, 1.0);
        assert_eq!(config.ridge, 1e-3);
        assert_eq!(config.tol, 1e-2);
        assert_eq!(config.max_iters, 10);
        let dict = config.dictionary().unwrap();
        assert_relative_eq!(dict.centers()[0], -1.4, max_relative = 1e-12);
        assert_relative_eq!(dict.centers()[16], 0.2, max_relative = 1e-12);
    }

    #[test]
    fn rejects_nonpositive_dt() {
        let err = parse_config("dt = -0.1").unwrap_err();
        let message = err.to_string();
        assert!(message.contains("dt"), "{message}");
        assert!(message.contains("positive"), "{message}");
    }

    #[test]
    fn rejects_open_time_grid() {
        let err = parse_config("T = 1.0\ndt = 0.3").unwrap_err();
        let message = err.to_string();
        assert!(message.contains("integer"), "{message}");
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = parse_config("epsilonn = 0.05").unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
    }

    #[test]
    fn overrides_layer_in_order() {
        let config = build_config(
            Some("epsilon = 0.2\nseed = 5"),
            &["kappa = 0"],
            &["epsilon = 0.1", "seed = 9"],
        )
        .unwrap();
        assert_eq!(config.kappa, 0.0);
        assert_eq!(config.epsilon, 0.1);
        assert_eq!(config.seed, 9);
        // file overrides the pre-layer
        let config = build_config(Some("kappa = 2.0"), &["kappa = 0"], &[]).unwrap();
        assert_eq!(config.kappa, 2.0);
        assert!(build_config(None, &[], &["not an override"]).is_err());
    }

    #[test]
    fn closed_form_matches_quadrature_oracle() {
        // Simpson's rule on exp(-nu (x-1)^2/eps) N(x; x0, eps T) dx.
        let cases: [(f64, f64, f64, f64); 4] = [
            (1.0, -1.0, 1.0, 0.25),
            (1.0, -1.0, 1.0, 0.05),
            (2.0, -0.5, 0.5, 0.1),
            (0.3, 0.0, 2.0, 0.4),
        ];
        for (nu, x0, horizon, epsilon) in cases {
            let sigma = (epsilon * horizon).sqrt();
            let lo = x0 - 12.0 * sigma;
            let hi = (x0 + 12.0 * sigma).max(1.0 + 12.0 * sigma);
            let n = 40_000usize; // even
            let h = (hi - lo) / n as f64;
            let integrand = |x: f64| {
                let density = (-((x - x0) * (x - x0)) / (2.0 * sigma * sigma)).exp()
                    / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                (-nu * (x - 1.0) * (x - 1.0) / epsilon).exp() * density
            };
            let mut total = integrand(lo) + integrand(hi);
            for i in 1..n {
                let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
                total += weight * integrand(lo + i as f64 * h);
            }
            let quadrature = total * h / 3.0;
            let closed = gaussian_closed_form(nu, x0, horizon, epsilon);
            assert_relative_eq!(closed, quadrature, max_relative = 1e-9);
        }
    }

    #[test]
    fn gaussian_runner_requires_zero_drift() {
        let config = parse_config("").unwrap();
        assert!(matches!(
            run_gaussian_oracle(&config),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn sweep_rejects_empty_epsilon_list() {
        let config = parse_config("").unwrap();
        assert!(run_sweep(&config, &[]).is_err());
    }

    #[test]
    fn modified_potential_differentiates_back_to_drift() {
        // -V_mod' should equal b - u_theta up to the trapezoid quadrature
        // error O(step^2).
        let config = parse_config("epsilon = 0.25\ndt = 0.05\nnx = 201\nnt = 100").unwrap();
        let dict = config.dictionary().unwrap();
        let theta: Vec<f64> = (0..17).map(|m| 0.1 * ((m % 5) as f64 - 2.0)).collect();
        let model = ControlModel::new(dict, theta).unwrap();
        let problem = config.problem().unwrap();
        let pde = solve_feynman_kac(&problem, &config.pde_grid()).unwrap();
        let mut buf = Vec::new();
        write_potential_control_table(&mut buf, config.kappa, &model, &pde).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|line| line.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 401);
        let step = 0.01;
        // V_mod - V vanishes at x = 0 (anchor).
        let mid = &rows[200];
        assert!(mid[0].abs() < 1e-12);
        assert!((mid[2] - mid[1]).abs() < 1e-12);
        for window in rows.windows(3) {
            let (prev, here, next) = (&window[0], &window[1], &window[2]);
            let x = here[0];
            let numeric = -(next[2] - prev[2]) / (2.0 * step);
            let expected = -4.0 * config.kappa * x * (x * x - 1.0) - here[3];
            assert!(
                (numeric - expected).abs() < 5e-3,
                "at x = {x}: -V_mod' = {numeric}, b - u = {expected}"
            );
        }
    }
}
