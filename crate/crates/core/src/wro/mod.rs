//! The Wasserstein distributionally robust estimator.
//!
//! The semi-infinite program
//! `min ε v_{N+1} + (1/N) Σ v_i  s.t.  l_K(ỹ, θ) − v_{N+1}‖ỹ − y_i‖ ≤ v_i  ∀ỹ ∈ 𝒴`
//! is solved by an exchange method: a finite master problem over the current
//! cut sets, then one maximum-violation subproblem per observation, whose
//! maximizers become new cuts. The master is solved by decomposition: a
//! pattern search over θ with the exact piecewise-linear solve over `v`.

mod inner;
mod subproblem;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use inner::{inner_v_solve_values, objective_at, CutValue};
pub use subproblem::{max_violation_box, violation_at, ScanOptions, Violation};

use crate::erm::{fit_erm, qp_options, search_theta};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{prediction_error, Frontier};
use crate::model::{CutPolicy, MqpInstance, ObservationSet, ThetaSpec, VBounds, WroConfig};
use crate::pareto::WeightGrid;
use crate::search::TracePoint;

/// Witnesses closer than this to an existing cut of the same observation are dropped.
pub const DEDUP_TOL: f64 = 1e-8;
/// Consecutive iterations without a new cut before the loop gives up.
pub const STAGNATION_LIMIT: usize = 3;
/// Previous incumbents reused as master search starts.
const WARM_STARTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub master_objective: f64,
    pub max_cv: f64,
    pub cuts_added: usize,
    pub cuts_dropped: usize,
    pub master_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutRecord {
    pub i: usize,
    pub iteration: usize,
    pub cv: f64,
    pub witness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuttingPlaneState {
    pub cut_sets: Vec<Vec<Vec<f64>>>,
    /// `‖ỹ_ij − y_i‖`, parallel to `cut_sets`.
    pub cut_dists: Vec<Vec<f64>>,
    pub incumbent_theta: Vec<f64>,
    pub incumbent_v: Vec<f64>,
    pub cv: Vec<f64>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    pub cuts: Vec<CutRecord>,
    pub previous_thetas: Vec<Vec<f64>>,
}

impl CuttingPlaneState {
    pub fn new(n_obs: usize) -> Self {
        Self {
            cut_sets: vec![vec![]; n_obs],
            cut_dists: vec![vec![]; n_obs],
            incumbent_theta: vec![],
            incumbent_v: vec![0.0; n_obs + 1],
            cv: vec![0.0; n_obs],
            iteration: 0,
            history: vec![],
            cuts: vec![],
            previous_thetas: vec![],
        }
    }

    pub fn total_cuts(&self) -> usize {
        self.cut_sets.iter().map(Vec::len).sum()
    }

    /// Adds `witness` to the cut set of observation `i` unless it duplicates
    /// an existing cut. Returns whether it was added.
    pub fn push_cut(&mut self, i: usize, witness: Vec<f64>, y_i: &[f64], cv: f64) -> bool {
        if self.cut_sets[i].iter().any(|c| linalg::dist(c, &witness) <= DEDUP_TOL) {
            return false;
        }
        self.cut_dists[i].push(linalg::dist(&witness, y_i));
        self.cuts.push(CutRecord { i, iteration: self.iteration, cv, witness: witness.clone() });
        self.cut_sets[i].push(witness);
        true
    }

    /// Cut values at the frontier of the current θ.
    pub fn cut_values(&self, frontier: &Frontier) -> Vec<Vec<CutValue>> {
        self.cut_sets
            .iter()
            .zip(&self.cut_dists)
            .map(|(cuts, dists)| {
                cuts.iter().zip(dists).map(|(c, &dist)| CutValue { loss: frontier.loss(c), dist }).collect()
            })
            .collect()
    }

    /// True when the master objective never decreased (beyond `tol`).
    pub fn master_monotone(&self, tol: f64) -> bool {
        self.history.windows(2).all(|w| w[1].master_objective >= w[0].master_objective - tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationCap,
    Stagnation,
    /// `ε = 0`: the estimator coincides with empirical risk minimization.
    ErmBypass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WroResult {
    pub epsilon: f64,
    pub theta_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    /// `ε v_{N+1} + (1/N) Σ v_i` of the last master problem.
    pub objective: f64,
    /// The objective after raising each `v_i` by its remaining violation, a
    /// feasible value of the semi-infinite program at `θ̂`.
    pub feasible_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub state: CuttingPlaneState,
    pub notes: Vec<String>,
}

impl WroResult {
    /// Errors with `IterationCapReached` unless the loop converged.
    pub fn into_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::IterationCapReached(self.iterations))
        }
    }

    pub fn max_cv(&self) -> f64 {
        self.state.cv.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterSolution {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
    pub trace: Vec<TracePoint>,
}

/// The finite master problem at fixed θ: `(v, objective)`.
pub fn master_at(
    theta: &[f64],
    state: &CuttingPlaneState,
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    vb: &VBounds,
    config: &WroConfig,
) -> Result<(Vec<f64>, f64)> {
    let frontier = Frontier::solve_with(instance, spec, grid, theta, &qp_options(config))?;
    inner_v_solve_values(&state.cut_values(&frontier), vb, config.epsilon)
}

/// Exact `v`-minimization for fixed θ given as a frontier.
pub fn inner_v_solve(
    state: &CuttingPlaneState,
    frontier: &Frontier,
    vb: &VBounds,
    epsilon: f64,
) -> Result<(Vec<f64>, f64)> {
    inner_v_solve_values(&state.cut_values(frontier), vb, epsilon)
}

/// Minimizes the master objective over θ by multi-start pattern search,
/// also starting from recent incumbents.
pub fn solve_master(
    state: &CuttingPlaneState,
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    vb: &VBounds,
    config: &WroConfig,
) -> Result<MasterSolution> {
    let f = |theta: &[f64]| -> Result<f64> { Ok(master_at(theta, state, instance, spec, grid, vb, config)?.1) };
    let skip = state.previous_thetas.len().saturating_sub(WARM_STARTS);
    let res = search_theta(spec, config, &state.previous_thetas[skip..], &f)?;
    let (v, objective) = master_at(&res.x, state, instance, spec, grid, vb, config)?;
    Ok(MasterSolution { theta: res.x, v, objective, evaluations: res.evaluations, trace: res.trace })
}

/// `CV_i` at `(θ, v)` for observation `i`, with `frontier` solved at θ.
pub fn max_violation(
    v: &[f64],
    i: usize,
    frontier: &Frontier,
    obs: &ObservationSet,
    scan: &ScanOptions,
) -> Violation {
    let t = *v.last().expect("v has N+1 entries");
    max_violation_box(frontier, &obs.points[i], t, v[i], &obs.support_lo, &obs.support_hi, scan)
}

fn scan_options(config: &WroConfig, iteration: usize, i: usize) -> ScanOptions {
    ScanOptions {
        grid_resolution: config.grid_resolution,
        seed: config.seed ^ ((iteration as u64) << 32) ^ (i as u64).wrapping_mul(0x9e37_79b9),
    }
}

/// All `CV_i` at `(θ, v)`, computed concurrently.
pub fn all_violations(
    v: &[f64],
    frontier: &Frontier,
    obs: &ObservationSet,
    config: &WroConfig,
    iteration: usize,
) -> Vec<Violation> {
    (0..obs.len())
        .into_par_iter()
        .map(|i| max_violation(v, i, frontier, obs, &scan_options(config, iteration, i)))
        .collect()
}

/// The cutting-plane (exchange) method for the robust estimator.
pub fn fit_wro(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
    config: &WroConfig,
) -> Result<WroResult> {
    config.validate()?;
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    spec.validate_against(instance)?;
    let n_obs = obs.len();

    if config.epsilon == 0.0 {
        let erm = fit_erm(instance, spec, grid, obs, config)?;
        return Ok(WroResult {
            epsilon: 0.0,
            theta_hat: erm.theta_hat,
            v_hat: vec![],
            objective: erm.objective,
            feasible_objective: erm.objective,
            iterations: 0,
            converged: true,
            termination: Termination::ErmBypass,
            state: CuttingPlaneState::new(n_obs),
            notes: vec!["epsilon = 0: fitted by empirical risk minimization".into()],
        });
    }

    let vb = VBounds::new(instance.norm_bound(), obs.radius, config.m, config.epsilon)?;
    let mut state = CuttingPlaneState::new(n_obs);
    let mut termination = Termination::IterationCap;
    let mut stagnant = 0;
    let mut last_objective = 0.0;
    let mut notes = Vec::new();

    for it in 1..=config.max_iterations {
        state.iteration = it;
        let master = solve_master(&state, instance, spec, grid, &vb, config)?;
        let frontier = Frontier::solve_with(instance, spec, grid, &master.theta, &qp_options(config))?;
        let viol = all_violations(&master.v, &frontier, obs, config, it);
        state.cv = viol.iter().map(|v| v.cv).collect();
        state.incumbent_theta = master.theta.clone();
        state.incumbent_v = master.v.clone();
        state.previous_thetas.push(master.theta.clone());
        last_objective = master.objective;
        let max_cv = state.cv.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let mut record = IterationRecord {
            iteration: it,
            master_objective: master.objective,
            max_cv,
            cuts_added: 0,
            cuts_dropped: 0,
            master_evaluations: master.evaluations,
        };
        if max_cv <= config.delta {
            state.history.push(record);
            termination = Termination::Converged;
            break;
        }

        let selected: Vec<usize> = match config.cut_policy {
            CutPolicy::AllViolated => (0..n_obs).filter(|&i| state.cv[i] > 0.0).collect(),
            CutPolicy::MaxOnly => {
                let mut best = 0;
                for i in 1..n_obs {
                    if state.cv[i] > state.cv[best] {
                        best = i;
                    }
                }
                vec![best]
            }
        };
        for i in selected {
            let v = &viol[i];
            if state.push_cut(i, v.witness.clone(), &obs.points[i], v.cv) {
                record.cuts_added += 1;
            } else {
                record.cuts_dropped += 1;
            }
        }
        let added = record.cuts_added;
        state.history.push(record);
        if added == 0 {
            stagnant += 1;
            if stagnant >= STAGNATION_LIMIT {
                termination = Termination::Stagnation;
                notes.push(format!("no new cut in {STAGNATION_LIMIT} consecutive iterations"));
                break;
            }
        } else {
            stagnant = 0;
        }
    }

    if termination == Termination::IterationCap {
        notes.push(format!("iteration cap {} reached before max CV <= delta", config.max_iterations));
    }
    let slack: f64 = state.cv.iter().map(|c| c.max(0.0)).sum::<f64>() / n_obs as f64;
    Ok(WroResult {
        epsilon: config.epsilon,
        theta_hat: state.incumbent_theta.clone(),
        v_hat: state.incumbent_v.clone(),
        objective: last_objective,
        feasible_objective: last_objective + slack,
        iterations: state.iteration,
        converged: termination == Termination::Converged,
        termination,
        state,
        notes,
    })
}

/// Worst-case expected loss over the Wasserstein ball at a fixed θ, by an
/// exchange loop over `v` alone. Returns a feasible (upper) value that is
/// within `tol` of the optimum.
pub fn worst_case_objective(
    theta: &[f64],
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
    config: &WroConfig,
    tol: f64,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    let vb = VBounds::new(instance.norm_bound(), obs.radius, config.m, config.epsilon)?;
    let frontier = Frontier::solve_with(instance, spec, grid, theta, &qp_options(config))?;
    let mut state = CuttingPlaneState::new(obs.len());
    for i in 0..obs.len() {
        state.push_cut(i, obs.points[i].clone(), &obs.points[i], 0.0);
    }
    let mut best_upper = f64::INFINITY;
    for it in 1..=config.max_iterations.max(200) {
        state.iteration = it;
        let (v, obj) = inner_v_solve(&state, &frontier, &vb, config.epsilon)?;
        let viol = all_violations(&v, &frontier, obs, config, it);
        let slack: f64 = viol.iter().map(|x| x.cv.max(0.0)).sum::<f64>() / obs.len() as f64;
        best_upper = best_upper.min(obj + slack);
        if best_upper - obj <= tol {
            return Ok(best_upper);
        }
        let mut added = 0;
        for (i, x) in viol.into_iter().enumerate() {
            if x.cv > 0.0 && state.push_cut(i, x.witness, &obs.points[i], x.cv) {
                added += 1;
            }
        }
        if added == 0 {
            break;
        }
    }
    Ok(best_upper)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusRow {
    pub epsilon: f64,
    pub prediction_error: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusSelection {
    pub best_epsilon: f64,
    pub best_index: usize,
    pub table: Vec<RadiusRow>,
    pub results: Vec<WroResult>,
}

impl RadiusSelection {
    pub fn best(&self) -> &WroResult {
        &self.results[self.best_index]
    }
}

/// Fits once per radius and keeps the one with the lowest validation
/// prediction error (ties to the smaller radius).
pub fn select_radius(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
    radii: &[f64],
    validation: &ObservationSet,
    config: &WroConfig,
) -> Result<RadiusSelection> {
    if radii.is_empty() {
        return Err(Error::InvalidConfig("radius list is empty".into()));
    }
    let fits: Vec<(WroResult, f64)> = radii
        .par_iter()
        .map(|&eps| {
            let cfg = WroConfig { epsilon: eps, ..config.clone() };
            let res = fit_wro(instance, spec, grid, obs, &cfg)?;
            let err = prediction_error(&res.theta_hat, instance, spec, grid, validation)?;
            Ok((res, err))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (m, (res, err)) in fits.iter().enumerate() {
        let (b_res, b_err) = (&fits[best].0, fits[best].1);
        if *err < b_err || (*err == b_err && res.epsilon < b_res.epsilon) {
            best = m;
        }
    }
    let table = fits
        .iter()
        .map(|(r, e)| RadiusRow {
            epsilon: r.epsilon,
            prediction_error: *e,
            objective: r.objective,
            iterations: r.iterations,
            converged: r.converged,
        })
        .collect();
    let results: Vec<WroResult> = fits.into_iter().map(|(r, _)| r).collect();
    Ok(RadiusSelection { best_epsilon: results[best].epsilon, best_index: best, table, results })
}

/// `iteration,max_cv,objective,cuts_added` rows.
pub fn write_convergence_csv<W: Write>(history: &[IterationRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["iteration", "max_cv", "objective", "cuts_added"])?;
    for r in history {
        wtr.write_record([
            r.iteration.to_string(),
            format!("{:.12}", r.max_cv),
            format!("{:.12}", r.master_objective),
            r.cuts_added.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// The finite master problem with its current cuts, written as a
/// mixed-binary program for an external solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterFormulation {
    pub epsilon: f64,
    pub objective: String,
    pub v_bounds: VBounds,
    pub big_m: f64,
    pub kkt: crate::erm::KktFormulation,
    pub cut_rows: Vec<MasterCutRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterCutRow {
    pub i: usize,
    pub j: usize,
    pub witness: Vec<f64>,
    pub dist: f64,
    pub constraints: Vec<String>,
}

pub fn emit_master_formulation(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
    state: &CuttingPlaneState,
    config: &WroConfig,
) -> Result<MasterFormulation> {
    let vb = VBounds::new(instance.norm_bound(), obs.radius, config.m, config.epsilon)?;
    let mut kkt = crate::erm::emit_kkt_formulation(instance, spec, grid, obs);
    kkt.kind = "robust master problem single-level KKT reformulation".into();
    kkt.linearization_blocks.clear();
    kkt.assignment_rows.clear();
    kkt.variables.retain(|v| v.name != "vartheta_ik" && v.name != "z_ik");
    let big_m = vb.v2;
    let mut cut_rows = Vec::new();
    for (i, (cuts, dists)) in state.cut_sets.iter().zip(&state.cut_dists).enumerate() {
        for (j, (c, &d)) in cuts.iter().zip(dists).enumerate() {
            let mut constraints: Vec<String> = (0..grid.len())
                .map(|k| format!("||ytilde_{i}_{j} - x_{k}||^2 - {d:.12} * v_last - v_{i} <= M * z_{i}_{j}_{k}"))
                .collect();
            constraints.push(format!("sum_k z_{i}_{j}_k = {}", grid.len().saturating_sub(1)));
            cut_rows.push(MasterCutRow { i, j, witness: c.clone(), dist: d, constraints });
        }
    }
    Ok(MasterFormulation {
        epsilon: config.epsilon,
        objective: "epsilon * v_last + (1/N) sum_i v_i".into(),
        v_bounds: vb,
        big_m,
        kkt,
        cut_rows,
    })
}
