use wro_imop::cli::{problem, run_repetition, Experiment, RunConfig};
use wro_imop::erm::fit_erm;
use wro_imop::loss::empirical_risk;
use wro_imop::model::{
    build_portfolio_instance, build_synthetic_instance, portfolio_theta_spec, synthetic_theta_spec, InstanceDocument,
    MqpInstance, WroConfig,
};
use wro_imop::pareto::{generate_observations, sample_weight_grid, NoiseModel};
use wro_imop::wro::{fit_wro, worst_case_objective};

const NOISE: NoiseModel = NoiseModel::Uniform { half_width: 0.25 };

#[test]
fn robust_fit_brackets_the_worst_case_objective() {
    let inst = build_synthetic_instance();
    let spec = synthetic_theta_spec();
    let grid = sample_weight_grid(2, 6, false).unwrap();
    let obs = generate_observations(&inst, 7, 12, NOISE).unwrap();
    let cfg = WroConfig { epsilon: 0.1, ..Default::default() };
    let res = fit_wro(&inst, &spec, &grid, &obs, &cfg).unwrap();
    assert!(res.converged);
    assert!(spec.contains(&res.theta_hat));
    let j = worst_case_objective(&res.theta_hat, &inst, &spec, &grid, &obs, &cfg, 1e-6).unwrap();
    // The master value relaxes the constraints; the repaired value is feasible.
    assert!(res.objective <= j + 1e-6, "{} > {j}", res.objective);
    assert!(res.feasible_objective >= j - 1e-6, "{} < {j}", res.feasible_objective);
    // The worst case never falls below the empirical risk.
    let risk = empirical_risk(&res.theta_hat, &inst, &spec, &grid, &obs).unwrap();
    assert!(j >= risk - 1e-9);
}

#[test]
fn empirical_fit_beats_the_true_parameters_in_sample() {
    let inst = build_synthetic_instance();
    let spec = synthetic_theta_spec();
    let grid = sample_weight_grid(2, 6, false).unwrap();
    let truth = spec.current_values(&inst);
    for seed in 0..3 {
        let obs = generate_observations(&inst, seed, 15, NOISE).unwrap();
        let fit = fit_erm(&inst, &spec, &grid, &obs, &WroConfig::default()).unwrap();
        let at_truth = empirical_risk(&truth, &inst, &spec, &grid, &obs).unwrap();
        assert!(fit.objective <= at_truth + 1e-12, "seed {seed}: {} > {at_truth}", fit.objective);
    }
}

#[test]
fn exported_instance_reproduces_the_fit() {
    let inst = build_portfolio_instance();
    let spec = portfolio_theta_spec(4, 0.3);
    let json = serde_json::to_string(&inst.to_document(Some(&spec))).unwrap();
    let doc: InstanceDocument = serde_json::from_str(&json).unwrap();
    let (back, back_spec) = MqpInstance::from_document(&doc).unwrap();
    let back_spec = back_spec.unwrap();
    let grid = sample_weight_grid(2, 6, true).unwrap();
    let obs = generate_observations(&inst, 2, 10, NoiseModel::Rounding { places: 3 }).unwrap();
    let cfg = WroConfig::default();
    let a = fit_erm(&inst, &spec, &grid, &obs, &cfg).unwrap();
    let b = fit_erm(&back, &back_spec, &grid, &obs, &cfg).unwrap();
    assert_eq!(a.theta_hat, b.theta_hat);
    assert_eq!(a.objective, b.objective);
}

#[test]
fn portfolio_repetition_is_consistent() {
    let config = RunConfig {
        n_list: Some(vec![10]),
        radii: vec![0.01, 0.1],
        validation_size: 500,
        ..RunConfig::for_experiment(Experiment::Portfolio)
    }
    .resolved();
    config.validate().unwrap();
    let prob = problem(&config).unwrap();
    let rec = run_repetition(&prob, &config, 10, 0).unwrap();
    assert_eq!(rec.theta_erm.len(), 4);
    assert!(prob.spec.contains(&rec.theta_erm) && prob.spec.contains(&rec.theta_wro));
    assert!(rec.converged);
    assert_eq!(rec.radius_table.len(), 2);
    let best = rec.radius_table.iter().map(|r| r.prediction_error).fold(f64::INFINITY, f64::min);
    assert_eq!(rec.error_wro, best);
    assert_eq!(rec.iterations, rec.history.len());
    assert!(rec.frontier_msd_erm.is_finite() && rec.frontier_msd_wro.is_finite());
}
