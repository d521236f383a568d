//! End-to-end checks that chain several modules together: mesh refinement
//! against the closed-form gait, period doubling, slope generator
//! identities, the penalized surrogate, and the quadratic-cost regime.

mod common;

use crawlopt::crawler::{CrawlerModel, ModelConfig, OneLink};
use crawlopt::stationarity::{
    extract_multipliers, CertificateRequest, MultiplierMode, ReferenceCost,
};
use crawlopt::sweeping::{periodic_orbit, ControlGrid};
use crawlopt::transcription::{build_pm, ProcessProblem, RunningCost, SpeedFn};
use nalgebra::DVector;

fn v1(a: f64) -> DVector<f64> {
    DVector::from_column_slice(&[a])
}

fn homog3(plus: f64, minus: f64) -> CrawlerModel {
    CrawlerModel::build(ModelConfig {
        blocks: 3,
        k: 1.0,
        mu_plus: vec![plus; 3],
        mu_minus: vec![minus; 3],
        horizon: 4.0,
        control_box: vec![1.0, 1.0],
    })
    .unwrap()
}

#[test]
fn mesh_refinement_tightens_the_reference_value() {
    // Period 3 with a unit interval leaves the phase switches strictly
    // between nodes at every dyadic mesh, so the discretization error is
    // visible and shrinks linearly with the step.
    let problem = ProcessProblem::one_link(&OneLink::new(0.0, 1.0, 3.0).unwrap(), RunningCost::Zero);
    let mut errors = Vec::new();
    for m in [4u32, 6, 8, 10] {
        let (grid, x0, exact, _) =
            crawlopt::stationarity::one_link_reference(0.0, 1.0, 3.0, ReferenceCost::Zero, m)
                .unwrap();
        assert!((exact - 0.5).abs() <= 1e-15);
        let (jm, _) = problem.objective(&grid, &x0);
        let h = 3.0 / (1u64 << m) as f64;
        let err = (jm - exact).abs();
        println!("m = {m:2}: J_m = {jm:.10}, error = {err:.3e}, h = {h:.3e}");
        assert!(err <= 4.0 * h, "error {err:.3e} exceeds 4h = {:.3e}", 4.0 * h);
        errors.push(err);
    }
    for k in 1..errors.len() {
        assert!(
            errors[k] < errors[k - 1] - 1e-12,
            "error did not decrease: {:?}",
            errors
        );
    }
    // The switch misalignment fraction is the same at every even level, so
    // quadrupling the interval count divides the error by four.
    for k in 1..errors.len() {
        let ratio = errors[k - 1] / errors[k];
        assert!(
            (3.5..=4.5).contains(&ratio),
            "refinement ratio {ratio} escaped the linear regime"
        );
    }
}

#[test]
fn repeated_period_doubles_the_reward_and_the_trajectory() {
    let problem = ProcessProblem::one_link(&OneLink::new(0.0, 1.0, 4.0).unwrap(), RunningCost::Zero);
    let grid = ControlGrid::new(5, 4.0, common::four_phase_values(32)).unwrap();
    let x0 = v1(1.0);
    let (j1, traj1) = problem.objective(&grid, &x0);

    let long_problem =
        ProcessProblem::one_link(&OneLink::new(0.0, 1.0, 8.0).unwrap(), RunningCost::Zero);
    let double = common::repeat_gait(&grid);
    let (j2, traj2) = long_problem.objective(&double, &x0);

    assert!((j2 - 2.0 * j1).abs() <= 1e-9 * (1.0 + 2.0 * j1.abs()));
    for i in 0..=32 {
        assert_eq!(
            traj2.states[i][0].to_bits(),
            traj1.states[i][0].to_bits(),
            "first period diverged at node {i}"
        );
    }
    for i in 0..=32 {
        assert!(
            (traj2.states[32 + i][0] - traj1.states[i][0]).abs() <= 1e-9,
            "second period diverged at node {i}"
        );
    }
}

#[test]
fn slope_generators_satisfy_the_scaling_identity() {
    // Every generator is the gradient of a linear piece through the
    // origin, so pairing it with its own argument recovers the value.
    use rand::Rng;
    let mut r = common::rng(41);
    for _ in 0..25 {
        let blocks = 2 + (r.random::<u32>() as usize) % 3;
        let model = common::random_model(&mut r, blocks);
        let w = common::random_point(&mut r, blocks - 1, 2.0);
        let f1 = SpeedFn::Crawler(std::sync::Arc::new(model.clone()));
        let value = f1.eval(&w);
        let oracle = common::vm_oracle(&model, &w);
        assert!((value - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
        let gens = f1.generators(&w);
        assert!(!gens.is_empty());
        for g in &gens {
            let pair = g.dot(&w);
            assert!(
                (pair - value).abs() <= 1e-7 * (1.0 + value.abs()),
                "generator pairing {pair} vs value {value}"
            );
        }
    }
    let f1 = SpeedFn::HalfAbs;
    for w in [v1(0.7), v1(-1.3)] {
        for g in f1.generators(&w) {
            assert!((g.dot(&w) - f1.eval(&w)).abs() <= 1e-12);
        }
    }
}

#[test]
fn penalized_surrogate_matches_the_plain_reward_at_its_reference() {
    use rand::Rng;
    let model = homog3(1.0, 3.0);
    let problem = ProcessProblem::crawler(&model, RunningCost::Zero);

    // Square waves switching at odd fine nodes, so the coarse averages
    // genuinely differ from the fine reference and the penalty weight is
    // finite.
    let mm = 64usize;
    let vals: Vec<DVector<f64>> = (0..mm)
        .map(|i| {
            let a = if (1..33).contains(&i) { 0.8 } else { -0.8 };
            let b = if (2..34).contains(&i) { 0.5 } else { -0.5 };
            DVector::from_column_slice(&[a, b])
        })
        .collect();
    let grid = ControlGrid::new(6, 4.0, vals).unwrap();
    let guess = DVector::zeros(2);
    let (_x0, traj) = periodic_orbit(&problem.set, &problem.dynamics, &grid, &guess, 1e-9, 2000)
        .expect("period map settles");

    let pm = build_pm(&problem, (&traj, &grid), 4, 2.0).unwrap();
    assert!(pm.alpha() > 0.0);
    assert!(pm.kappa().is_finite());

    let eval = pm
        .evaluate(&pm.reference_nodes()[0].clone(), pm.reference_controls())
        .expect("reference is admissible for its own surrogate");
    // Running the shifted dynamics from the reference start reproduces the
    // coarse nodes, so the deviation is exactly the averaging defect.
    assert!((eval.deviation - pm.alpha()).abs() <= 1e-12 * (1.0 + pm.alpha()));
    let penalty = eval.plain - eval.value;
    assert!((penalty - 0.5 * pm.kappa() * eval.deviation).abs() <= 1e-12);
    assert!(eval.slack_excess <= 1e-9, "slack excess {}", eval.slack_excess);

    // A jittered candidate inside the box pays a strictly larger penalty.
    let mut r = common::rng(7);
    let mut w = pm.reference_controls().to_vec();
    let shift: f64 = 0.05 + 0.05 * r.random::<f64>();
    let k = w.len() / 2;
    w[0][0] -= shift;
    w[k][0] += shift;
    let jittered = pm.score(&pm.reference_nodes()[0].clone(), &w);
    assert!(jittered.deviation > eval.deviation);
}

#[test]
fn quadratic_cost_prefers_rest() {
    // Zero-mean controls force equal sweep mass at both walls, so any
    // contact reward drags the full traverse cost along; at unit cost
    // weight that trade always loses and the optimum is rest.
    let problem = ProcessProblem::one_link(
        &OneLink::new(0.0, 1.0, 4.0).unwrap(),
        RunningCost::Quadratic { weight: 1.0 },
    );
    let cfg = crawlopt::optimizer::SolverConfig {
        starts: 4,
        max_iters: 120,
        stall_iters: 40,
        seed: 11,
        ..Default::default()
    };
    let report = crawlopt::optimizer::optimize(&problem, 4, &cfg).unwrap();
    assert!(report.value.abs() <= 1e-6, "optimal value {}", report.value);

    // The rest process carries a full-cost-weight certificate.
    let grid = ControlGrid::zeros(4, 4.0, 1);
    let x0 = v1(0.5);
    let (_, traj) = problem.objective(&grid, &x0);
    let cert = extract_multipliers(
        &problem,
        &grid,
        &traj,
        MultiplierMode::Plain,
        CertificateRequest::Lambda(1.0),
    )
    .expect("rest is stationary at full cost weight");
    let worst = cert.residuals.values().cloned().fold(0.0, f64::max);
    assert!(worst <= 1e-7, "residuals {:?}", cert.residuals);
}
