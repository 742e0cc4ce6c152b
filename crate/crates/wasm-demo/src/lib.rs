//! Browser bindings for the double-well rare-event pipeline.
//!
//! Three operations back the static demo page in `www/`:
//! [`simulate_paths`] draws trajectory bundles (optionally under a fitted
//! control), [`train_control`] runs the cross-entropy iteration and returns
//! the fitted control curve plus a quick importance-sampling estimate, and
//! [`reference_curves`] solves the backward PDE for the ground-truth value
//! and reference control. All three take and return JSON strings so the page
//! needs no generated glue beyond `JSON.parse`.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use smallnoise::basis::{ControlModel, RbfDictionary};
use smallnoise::cross_entropy::{ce_run, CeConfig, Ridge};
use smallnoise::estimators::is_estimate;
use smallnoise::experiments::{double_well_drift, double_well_potential, quadratic_cost};
use smallnoise::pde::{solve_feynman_kac, PdeGrid};
use smallnoise::sde::{simulate_batch, SdeProblem};

const DEMO_DT: f64 = 0.005;
const DEMO_HORIZON: f64 = 1.0;
const DEMO_X0: f64 = -1.0;

fn demo_problem(epsilon: f64) -> Result<SdeProblem, String> {
    SdeProblem::new(
        double_well_drift(1.0),
        epsilon,
        quadratic_cost(1.0),
        DEMO_X0,
        DEMO_HORIZON,
        DEMO_DT,
    )
    .map_err(|e| e.to_string())
}

fn demo_dictionary() -> RbfDictionary {
    RbfDictionary::uniform(-1.5, 0.1, 17, 0.5).expect("static dictionary layout")
}

fn default_epsilon() -> f64 {
    0.05
}

fn default_paths() -> usize {
    40
}

fn default_train_paths() -> usize {
    8_000
}

fn default_iters() -> usize {
    6
}

fn default_nx() -> usize {
    801
}

fn default_nt() -> usize {
    400
}

#[derive(Deserialize)]
struct SimulateParams {
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_paths")]
    n_paths: usize,
    #[serde(default)]
    seed: u64,
    /// Control coefficients from a previous training call; absent means the
    /// uncontrolled dynamics.
    #[serde(default)]
    theta: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SimulateResponse {
    t: Vec<f64>,
    paths: Vec<Vec<f64>>,
    frac_above: f64,
    exploded: usize,
}

#[derive(Deserialize)]
struct TrainParams {
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_train_paths")]
    n_paths: usize,
    #[serde(default = "default_iters")]
    max_iters: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct TrainResponse {
    theta: Vec<f64>,
    ess_history: Vec<f64>,
    converged: bool,
    iterations_used: usize,
    rho_is: f64,
    log_rho_is: f64,
    cov_is: f64,
    /// Control and potential curves on a uniform x grid.
    x: Vec<f64>,
    u_theta: Vec<f64>,
    potential: Vec<f64>,
    potential_modified: Vec<f64>,
}

#[derive(Deserialize)]
struct ReferenceParams {
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_nx")]
    nx: usize,
    #[serde(default = "default_nt")]
    nt: usize,
}

#[derive(Serialize)]
struct ReferenceResponse {
    rho_ref: f64,
    log_rho_ref: f64,
    x: Vec<f64>,
    value_function: Vec<f64>,
    u_star: Vec<f64>,
}

fn simulate_paths_impl(params: &str) -> Result<String, String> {
    let params: SimulateParams = serde_json::from_str(params).map_err(|e| e.to_string())?;
    let problem = demo_problem(params.epsilon)?;
    let n = params.n_paths.clamp(1, 200);
    let model = match params.theta {
        Some(theta) => {
            Some(ControlModel::new(demo_dictionary(), theta).map_err(|e| e.to_string())?)
        }
        None => None,
    };
    let batch =
        simulate_batch(&problem, model.as_ref(), n, params.seed).map_err(|e| e.to_string())?;
    let num_steps = problem.num_steps();
    // Thin the time axis to keep the payload canvas-sized.
    let stride = (num_steps / 200).max(1);
    let nodes: Vec<usize> = (0..=num_steps).step_by(stride).collect();
    let grid = batch.grid();
    let t: Vec<f64> = nodes.iter().map(|&k| grid.node(k)).collect();
    let paths: Vec<Vec<f64>> = batch
        .trajectories
        .iter()
        .map(|traj| nodes.iter().map(|&k| traj.state(k)).collect())
        .collect();
    let frac_above = batch
        .trajectories
        .iter()
        .filter(|traj| traj.terminal_state() > 0.5)
        .count() as f64
        / n as f64;
    let response = SimulateResponse {
        t,
        paths,
        frac_above,
        exploded: batch.exploded_count(),
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

fn train_control_impl(params: &str) -> Result<String, String> {
    let params: TrainParams = serde_json::from_str(params).map_err(|e| e.to_string())?;
    let problem = demo_problem(params.epsilon)?;
    let dictionary = demo_dictionary();
    let config = CeConfig {
        n_paths: params.n_paths.clamp(100, 50_000),
        max_iters: params.max_iters.min(25),
        ridge: Ridge::default(),
        tol: 1e-2,
        seed: params.seed,
    };
    let report = ce_run(&problem, &dictionary, &config);
    if let Some(error) = &report.error {
        return Err(format!("training failed: {error}"));
    }
    let theta = report.final_theta().to_vec();
    let model = ControlModel::new(dictionary, theta.clone()).map_err(|e| e.to_string())?;
    let batch = simulate_batch(
        &problem,
        Some(&model),
        config.n_paths.min(10_000),
        params.seed.wrapping_add(2_000_000),
    )
    .map_err(|e| e.to_string())?;
    let estimate = is_estimate(&batch, &model, &problem).map_err(|e| e.to_string())?;

    let count = 321;
    let step = 4.0 / (count - 1) as f64;
    let x: Vec<f64> = (0..count).map(|i| -2.0 + step * i as f64).collect();
    let u_theta: Vec<f64> = x.iter().map(|&xi| model.value(xi)).collect();
    let potential: Vec<f64> = x.iter().map(|&xi| double_well_potential(1.0, xi)).collect();
    let mut cumulative = vec![0.0; count];
    for i in 1..count {
        cumulative[i] = cumulative[i - 1] + 0.5 * (u_theta[i - 1] + u_theta[i]) * step;
    }
    let anchor = cumulative[count / 2];
    let potential_modified: Vec<f64> = potential
        .iter()
        .zip(&cumulative)
        .map(|(v, c)| v + c - anchor)
        .collect();

    let response = TrainResponse {
        theta,
        ess_history: report.ess_history.clone(),
        converged: report.converged,
        iterations_used: report.iterations_used,
        rho_is: estimate.rho_hat,
        log_rho_is: estimate.log_rho_hat,
        cov_is: estimate.cov,
        x,
        u_theta,
        potential,
        potential_modified,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

fn reference_curves_impl(params: &str) -> Result<String, String> {
    let params: ReferenceParams = serde_json::from_str(params).map_err(|e| e.to_string())?;
    let problem = demo_problem(params.epsilon)?;
    let grid = PdeGrid {
        x_min: -4.0,
        x_max: 4.0,
        nx: params.nx.clamp(201, 4001),
        nt: params.nt.clamp(50, 4000),
    };
    let solution = solve_feynman_kac(&problem, &grid).map_err(|e| e.to_string())?;
    let stride = ((grid.nx - 1) / 400).max(1);
    let mut x = Vec::new();
    let mut value_function = Vec::new();
    let mut u_star = Vec::new();
    let mut i = 0;
    while i < grid.nx {
        x.push(grid.node(i));
        value_function.push(solution.w[0][i]);
        u_star.push(solution.u_star[i]);
        i += stride;
    }
    let response = ReferenceResponse {
        rho_ref: solution.rho_ref,
        log_rho_ref: solution.rho_ref.max(1e-300).ln(),
        x,
        value_function,
        u_star,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

/// Simulates a bundle of double-well trajectories; pass `theta` from
/// [`train_control`] to simulate under the fitted proposal.
#[wasm_bindgen]
pub fn simulate_paths(params: &str) -> Result<String, JsError> {
    simulate_paths_impl(params).map_err(|e| JsError::new(&e))
}

/// Runs the cross-entropy iteration and returns the fitted coefficients,
/// diagnostics, an importance-sampling estimate and plotting curves.
#[wasm_bindgen]
pub fn train_control(params: &str) -> Result<String, JsError> {
    train_control_impl(params).map_err(|e| JsError::new(&e))
}

/// Solves the backward reference PDE and returns the value function and
/// reference control at t = 0.
#[wasm_bindgen]
pub fn reference_curves(params: &str) -> Result<String, JsError> {
    reference_curves_impl(params).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_defaults_produce_plot_sized_payload() {
        let response = simulate_paths_impl("{}").unwrap();
        let value: serde_json::Value = serde_json::from_str(&response).unwrap();
        let t = value["t"].as_array().unwrap();
        let paths = value["paths"].as_array().unwrap();
        assert_eq!(paths.len(), 40);
        assert!(t.len() <= 201);
        assert_eq!(paths[0].as_array().unwrap().len(), t.len());
        assert!(value["frac_above"].as_f64().unwrap() < 0.05);
    }

    #[test]
    fn train_then_simulate_controlled_crosses() {
        let trained =
            train_control_impl(r#"{"epsilon": 0.05, "n_paths": 3000, "max_iters": 6, "seed": 4}"#)
                .unwrap();
        let value: serde_json::Value = serde_json::from_str(&trained).unwrap();
        let theta = value["theta"].as_array().unwrap();
        assert_eq!(theta.len(), 17);
        assert!(value["rho_is"].as_f64().unwrap() > 0.0);
        assert_eq!(
            value["x"].as_array().unwrap().len(),
            value["u_theta"].as_array().unwrap().len()
        );

        let params = format!(
            "{{\"epsilon\": 0.05, \"n_paths\": 60, \"seed\": 9, \"theta\": {}}}",
            serde_json::to_string(&value["theta"]).unwrap()
        );
        let simulated = simulate_paths_impl(&params).unwrap();
        let sim: serde_json::Value = serde_json::from_str(&simulated).unwrap();
        assert!(
            sim["frac_above"].as_f64().unwrap() > 0.5,
            "controlled paths should mostly cross: {}",
            sim["frac_above"]
        );
    }

    #[test]
    fn reference_solve_reports_value_and_control() {
        let response = reference_curves_impl(r#"{"epsilon": 0.05, "nx": 801, "nt": 400}"#).unwrap();
        let value: serde_json::Value = serde_json::from_str(&response).unwrap();
        let rho = value["rho_ref"].as_f64().unwrap();
        assert!(rho > 0.0 && rho < 1e-15, "rho_ref {rho}");
        let xs = value["x"].as_array().unwrap();
        assert_eq!(xs.len(), value["u_star"].as_array().unwrap().len());
        assert_eq!(xs.len(), value["value_function"].as_array().unwrap().len());
    }

    #[test]
    fn malformed_parameters_are_reported() {
        assert!(simulate_paths_impl("{not json").is_err());
        assert!(train_control_impl(r#"{"epsilon": -0.1}"#).is_err());
    }
}
