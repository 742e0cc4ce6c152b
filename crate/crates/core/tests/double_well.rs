//! Double-well behavior checks that complement the acceptance suite on a
//! cheaper time grid (dt = 5e-3 instead of 1e-3).

use smallnoise::basis::{ControlModel, RbfDictionary};
use smallnoise::cross_entropy::{ce_run, CeConfig, Ridge};
use smallnoise::experiments::{double_well_drift, quadratic_cost};
use smallnoise::pde::{solve_feynman_kac, PdeGrid};
use smallnoise::sde::SdeProblem;

fn problem() -> SdeProblem {
    SdeProblem::new(
        double_well_drift(1.0),
        0.05,
        quadratic_cost(1.0),
        -1.0,
        1.0,
        0.005,
    )
    .unwrap()
}

fn dictionary() -> RbfDictionary {
    RbfDictionary::uniform(-1.5, 0.1, 17, 0.5).unwrap()
}

#[test]
fn cold_start_ess_is_tiny_and_recovers_by_convergence() {
    // Under the uncontrolled proposal almost no path reaches the favored
    // well, so the initial effective sample size is a sliver of N. Once
    // training homes in, the weights spread over most of the batch. The
    // recovery is dramatic but not monotone iteration by iteration: the
    // first fits come from a handful of effective samples and can overshoot
    // before settling (observed in 6 of 10 seeds on this configuration).
    let config = CeConfig {
        n_paths: 30_000,
        max_iters: 8,
        ridge: Ridge::default(),
        tol: 1e-2,
        seed: 304,
    };
    let report = ce_run(&problem(), &dictionary(), &config);
    assert!(report.error.is_none(), "{:?}", report.error);
    let ess = &report.ess_history;
    assert!(
        ess[0] < 0.05 * 30_000.0,
        "initial ess {} should be a small fraction of N",
        ess[0]
    );
    let final_ess = *ess.last().unwrap();
    assert!(
        final_ess > 0.3 * 30_000.0,
        "final ess {final_ess} should cover a large share of the batch"
    );
    assert!(report.converged, "ess history: {ess:?}");
}

#[test]
fn trained_control_tracks_reference_shape_not_initial_slice() {
    // The reference control is the t = 0 slice of the value-function
    // gradient; the fitted control is state-only and therefore matches an
    // occupation-weighted average over times instead. The two stay within a
    // few units of each other over the crossing corridor (measured max gap
    // ~2.3) while agreeing in sign and shape; a tighter pointwise match is
    // not achievable for a state-only parameterization because the true
    // control strengthens substantially as t -> T.
    let p = problem();
    let config = CeConfig {
        n_paths: 30_000,
        max_iters: 8,
        ridge: Ridge::default(),
        tol: 1e-2,
        seed: 304,
    };
    let report = ce_run(&p, &dictionary(), &config);
    assert!(report.error.is_none(), "{:?}", report.error);
    let model = ControlModel::new(dictionary(), report.final_theta().to_vec()).unwrap();
    let grid = PdeGrid {
        x_min: -6.0,
        x_max: 6.0,
        nx: 2001,
        nt: 1000,
    };
    let solution = solve_feynman_kac(&p, &grid).unwrap();
    let samples: Vec<f64> = (0..=260).map(|k| -1.3 + 0.01 * k as f64).collect();
    let distance = solution.control_distance(&model, &samples).unwrap();
    assert!(
        distance < 3.0,
        "control distance {distance} out of the measured envelope"
    );
    // Sign agreement where the reference is substantial and the proposal
    // actually occupies the region (paths start at -1 and cross rightward;
    // left of the start the fit is unconstrained by data).
    let mut checked = 0;
    for &x in &samples {
        if x < -1.0 {
            continue;
        }
        let reference = solution.reference_control(x).unwrap();
        if reference.abs() > 0.5 {
            assert!(
                reference * model.value(x) > 0.0,
                "sign mismatch at x = {x}: reference {reference}, fitted {}",
                model.value(x)
            );
            checked += 1;
        }
    }
    assert!(
        checked > 50,
        "only {checked} sample points had strong reference control"
    );
}
