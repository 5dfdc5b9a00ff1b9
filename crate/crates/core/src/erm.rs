//! Empirical risk minimization over the parameter box, and the exported
//! single-level KKT formulation of the same problem.
//!
//! The estimator is solved by decomposition: a derivative-free multi-start
//! search over θ, with the frontier at each θ obtained by exact QP solves.
//! The mixed-binary single-level program is only emitted as a document.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::Frontier;
use crate::model::{MqpInstance, ObservationSet, ThetaSpec, WroConfig};
use crate::pareto::WeightGrid;
use crate::qp::QpOptions;
use crate::search::{multi_start_search_with_steps, stratified_starts, SearchOptions, SearchResult, TracePoint};

/// Points per axis of the coarse scan that seeds extra starts.
const COARSE_PER_AXIS: usize = 33;
/// Coarse-scan points used as starts.
const COARSE_STARTS: usize = 8;
/// Initial step (fraction of the box) for starts that are already local:
/// warm starts and coarse-scan points. Half the coarse spacing.
const LOCAL_STEP: f64 = 0.5 / (COARSE_PER_AXIS - 1) as f64;
/// The coarse scan is used up to this many parameters.
const COARSE_MAX_DIM: usize = 2;
/// Default big-M for KKT multipliers in the exported formulation.
pub const DEFAULT_DUAL_BIG_M: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmResult {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub trace: Vec<TracePoint>,
    pub restarts_used: usize,
    pub evaluations: usize,
}

pub fn qp_options(config: &WroConfig) -> QpOptions {
    QpOptions { ridge_tie_break: config.ridge_tie_break }
}

pub fn search_options(config: &WroConfig) -> SearchOptions {
    SearchOptions { max_evaluations: config.max_evaluations, ..Default::default() }
}

/// Multi-start pattern search of `f` over the θ box. Starts are the
/// stratified points from `config.seed`, then `extra` points, then the best
/// points of a coarse scan (both polished with a small initial step) for low-dimensional boxes.
pub fn search_theta<F>(spec: &ThetaSpec, config: &WroConfig, extra: &[Vec<f64>], f: &F) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let opts = search_options(config);
    let mut starts = stratified_starts(&spec.lower, &spec.upper, config.restarts, config.seed);
    let mut steps = vec![opts.initial_step; starts.len()];
    starts.extend(extra.iter().cloned());
    steps.resize(starts.len(), LOCAL_STEP);
    let mut coarse_evals = 0;
    if spec.n_theta() <= COARSE_MAX_DIM {
        let (best, evals) = coarse_scan(spec, f)?;
        coarse_evals = evals;
        starts.extend(best);
        steps.resize(starts.len(), LOCAL_STEP);
    }
    let mut res = multi_start_search_with_steps(&spec.lower, &spec.upper, &starts, &steps, &opts, f)?;
    res.evaluations += coarse_evals;
    Ok(res)
}

/// The `COARSE_STARTS` lowest points of a regular grid over the box, best first.
fn coarse_scan<F>(spec: &ThetaSpec, f: &F) -> Result<(Vec<Vec<f64>>, usize)>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let d = spec.n_theta();
    let total = COARSE_PER_AXIS.pow(d as u32);
    let point = |idx: usize| -> Vec<f64> {
        let mut rem = idx;
        (0..d)
            .map(|j| {
                let i = rem % COARSE_PER_AXIS;
                rem /= COARSE_PER_AXIS;
                spec.lower[j] + spec.width(j) * i as f64 / (COARSE_PER_AXIS - 1) as f64
            })
            .collect()
    };
    let mut values: Vec<(f64, usize)> = (0..total)
        .into_par_iter()
        .map(|idx| Ok((f(&point(idx))?, idx)))
        .collect::<Result<Vec<_>>>()?;
    values.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let best = values.iter().take(COARSE_STARTS).map(|&(_, idx)| point(idx)).collect();
    Ok((best, total))
}

/// Minimizes the mean surrogate loss of `obs` over the θ box.
pub fn fit_erm(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
    config: &WroConfig,
) -> Result<ErmResult> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    spec.validate_against(instance)?;
    let opts = qp_options(config);
    let objective = |theta: &[f64]| -> Result<f64> {
        Ok(Frontier::solve_with(instance, spec, grid, theta, &opts)?.mean_loss(&obs.points))
    };
    if spec.n_theta() == 0 {
        let value = objective(&[])?;
        return Ok(ErmResult {
            theta_hat: vec![],
            objective: value,
            trace: vec![TracePoint { theta: vec![], value }],
            restarts_used: 0,
            evaluations: 1,
        });
    }
    let res = search_theta(spec, config, &[], &objective)?;
    Ok(ErmResult {
        theta_hat: res.x,
        objective: res.value,
        trace: res.trace,
        restarts_used: res.starts_used,
        evaluations: res.evaluations,
    })
}

/// One named variable family of the exported program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableBlock {
    pub name: String,
    pub count: usize,
    pub dim: usize,
    pub domain: String,
}

/// Big-M constants of the exported program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigM {
    /// Bound on `‖y_i - x_k‖²`, i.e. `(B + R)²`.
    pub loss_bound: f64,
    /// Bound on each component of the selected decision, `M_{i,k} = B`.
    pub selection: f64,
    /// Per inequality row, the largest slack `b_r - A_r x` over the region box.
    pub row_slack: Vec<f64>,
    /// Per coordinate, the largest value of `x_j` over the region.
    pub coordinate: Vec<f64>,
    /// Bound on every KKT multiplier.
    pub dual: f64,
}

/// KKT conditions of the weighting problem at grid weight `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktBlock {
    pub k: usize,
    pub weight: Vec<f64>,
    /// `H_k = Σ_l w_kl Q_l`.
    pub hessian: Vec<Vec<f64>>,
    /// The θ-independent part of `Σ_l w_kl c_l`.
    pub linear_fixed: Vec<f64>,
    /// `G_k` (n × n_θ) with `Σ_l w_kl c_l(θ) = linear_fixed + G_k θ`.
    pub linear_theta: Vec<Vec<f64>>,
    pub stationarity_rows: usize,
    pub equality_rows: Vec<usize>,
    pub inequality_rows: Vec<usize>,
    pub constraints: Vec<String>,
}

/// Selection of the nearest frontier point for observation `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationBlock {
    pub i: usize,
    pub k: usize,
    pub big_m: f64,
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub i: usize,
    pub expression: String,
}

/// The single-level mixed-binary program of the inverse problem, written in
/// the canonical form `A x <= b` (rows flagged as equalities), `x >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktFormulation {
    pub kind: String,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub n_obs: usize,
    pub n_theta: usize,
    pub objective: String,
    pub variables: Vec<VariableBlock>,
    pub theta: ThetaSpec,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub eq_rows: Vec<bool>,
    pub observations: Vec<Vec<f64>>,
    pub big_m: BigM,
    pub kkt_blocks: Vec<KktBlock>,
    pub linearization_blocks: Vec<LinearizationBlock>,
    pub assignment_rows: Vec<AssignmentRow>,
}

impl KktFormulation {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.kind);
        let _ = writeln!(
            s,
            "n = {}, p = {}, q = {}, K = {}, N = {}, n_theta = {}",
            self.n, self.p, self.q, self.k, self.n_obs, self.n_theta
        );
        let _ = writeln!(s, "\nminimize {}", self.objective);
        let _ = writeln!(s, "\nvariables:");
        for v in &self.variables {
            let _ = writeln!(s, "  {} [{} x {}] in {}", v.name, v.count, v.dim, v.domain);
        }
        let _ = writeln!(s, "\ntheta box:");
        for (j, e) in self.theta.layout.iter().enumerate() {
            let _ = writeln!(
                s,
                "  theta[{j}] -> c_{}[{}] (scale {}) in [{}, {}]",
                e.objective, e.coord, e.scale, self.theta.lower[j], self.theta.upper[j]
            );
        }
        let _ = writeln!(
            s,
            "\nbig-M: loss {:.6}, selection {:.6}, dual {:.6}",
            self.big_m.loss_bound, self.big_m.selection, self.big_m.dual
        );
        for blk in &self.kkt_blocks {
            let _ = writeln!(s, "\nKKT block k = {} (w = {:?})", blk.k, blk.weight);
            for c in &blk.constraints {
                let _ = writeln!(s, "  {c}");
            }
        }
        for blk in &self.linearization_blocks {
            let _ = writeln!(s, "\nselection i = {}, k = {} (M = {:.6})", blk.i, blk.k, blk.big_m);
            for c in &blk.constraints {
                let _ = writeln!(s, "  {c}");
            }
        }
        let _ = writeln!(s);
        for row in &self.assignment_rows {
            let _ = writeln!(s, "assignment i = {}: {}", row.i, row.expression);
        }
        s
    }
}

pub fn emit_kkt_formulation(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
) -> KktFormulation {
    emit_kkt_formulation_with(instance, spec, grid, obs, DEFAULT_DUAL_BIG_M)
}

pub fn emit_kkt_formulation_with(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
    dual_big_m: f64,
) -> KktFormulation {
    let (n, p, q) = (instance.n(), instance.p(), instance.q());
    let k_count = grid.len();
    let n_obs = obs.len();
    let n_theta = spec.n_theta();
    let region = instance.region();
    let b_norm = instance.norm_bound();
    let eq_rows = instance.eq_rows().to_vec();
    let ineq: Vec<usize> = (0..q).filter(|&r| !eq_rows[r]).collect();
    let eqs: Vec<usize> = (0..q).filter(|&r| eq_rows[r]).collect();
    let a = linalg::matrix_to_rows(instance.a());
    let b: Vec<f64> = instance.b().iter().copied().collect();

    let row_slack = ineq
        .iter()
        .map(|&r| {
            let min_ax: f64 = (0..n)
                .map(|j| {
                    let v = a[r][j];
                    (v * region.lower[j]).min(v * region.upper[j])
                })
                .sum();
            (b[r] - min_ax).max(0.0)
        })
        .collect();
    let big_m = BigM {
        loss_bound: (b_norm + obs.radius).powi(2),
        selection: b_norm,
        row_slack,
        coordinate: region.upper.clone(),
        dual: dual_big_m,
    };

    let mut variables = vec![
        VariableBlock { name: "theta".into(), count: 1, dim: n_theta, domain: "box".into() },
        VariableBlock { name: "x_k".into(), count: k_count, dim: n, domain: "R^n_+".into() },
        VariableBlock { name: "u_k".into(), count: k_count, dim: q, domain: "R^q (free on equality rows)".into() },
        VariableBlock { name: "mu_k".into(), count: k_count, dim: n, domain: "R^n_+".into() },
        VariableBlock { name: "t_k".into(), count: k_count, dim: ineq.len() + n, domain: "{0,1}".into() },
        VariableBlock { name: "vartheta_ik".into(), count: n_obs * k_count, dim: n, domain: "R^n".into() },
        VariableBlock { name: "z_ik".into(), count: n_obs * k_count, dim: 1, domain: "{0,1}".into() },
    ];
    variables.retain(|v| v.count > 0);

    let mut kkt_blocks = Vec::with_capacity(k_count);
    for (k, w) in grid.weights.iter().enumerate() {
        let w = w.as_slice();
        let h = linalg::matrix_to_rows(&instance.weighted_hessian(w));
        let mut fixed: Vec<f64> = instance.weighted_linear(w).iter().copied().collect();
        let mut g_theta = vec![vec![0.0; n_theta]; n];
        for (e_idx, e) in spec.layout.iter().enumerate() {
            fixed[e.coord] -= w[e.objective] * instance.linear(e.objective)[e.coord];
            g_theta[e.coord][e_idx] += w[e.objective] * e.scale;
        }
        let mut constraints = vec![
            format!("H_{k} x_{k} + linear_fixed + G_{k} theta + A^T u_{k} - mu_{k} = 0   ({n} rows)"),
        ];
        for &r in &eqs {
            constraints.push(format!("A[{r}] x_{k} = {}", b[r]));
        }
        for (slot, &r) in ineq.iter().enumerate() {
            constraints.push(format!("A[{r}] x_{k} <= {}", b[r]));
            constraints.push(format!("u_{k}[{r}] >= 0, u_{k}[{r}] <= M_dual * t_{k}[{slot}]"));
            constraints.push(format!("{} - A[{r}] x_{k} <= {:.12} * (1 - t_{k}[{slot}])", b[r], big_m.row_slack[slot]));
        }
        for j in 0..n {
            let slot = ineq.len() + j;
            constraints.push(format!("mu_{k}[{j}] <= M_dual * t_{k}[{slot}]"));
            constraints.push(format!("x_{k}[{j}] <= {:.12} * (1 - t_{k}[{slot}])", region.upper[j]));
        }
        kkt_blocks.push(KktBlock {
            k,
            weight: w.to_vec(),
            hessian: h,
            linear_fixed: fixed,
            linear_theta: g_theta,
            stationarity_rows: n,
            equality_rows: eqs.clone(),
            inequality_rows: ineq.clone(),
            constraints,
        });
    }

    let mut linearization_blocks = Vec::with_capacity(n_obs * k_count);
    let mut assignment_rows = Vec::with_capacity(n_obs);
    for i in 0..n_obs {
        for k in 0..k_count {
            linearization_blocks.push(LinearizationBlock {
                i,
                k,
                big_m: b_norm,
                constraints: vec![
                    format!("0 <= vartheta_{i}_{k} <= M * z_{i}_{k}"),
                    format!("x_{k} - M * (1 - z_{i}_{k}) <= vartheta_{i}_{k} <= x_{k}"),
                ],
            });
        }
        assignment_rows.push(AssignmentRow {
            i,
            expression: format!("sum_k z_{i}_k = 1"),
        });
    }

    KktFormulation {
        kind: "inverse-multiobjective-qp single-level KKT reformulation".into(),
        n,
        p,
        q,
        k: k_count,
        n_obs,
        n_theta,
        objective: "(1/N) sum_i || y_i - sum_k vartheta_ik ||^2".into(),
        variables,
        theta: spec.clone(),
        a,
        b,
        eq_rows,
        observations: obs.points.clone(),
        big_m,
        kkt_blocks,
        linearization_blocks,
        assignment_rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::empirical_risk;
    use crate::model::{build_portfolio_instance, build_synthetic_instance, portfolio_theta_spec, synthetic_theta_spec};
    use crate::pareto::{generate_observations, sample_weight_grid, NoiseModel};
    use crate::qp::WeightVector;

    fn clean_synthetic() -> (MqpInstance, ThetaSpec, WeightGrid, ObservationSet) {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        let grid = sample_weight_grid(2, 6, false).unwrap();
        let f = Frontier::solve(&inst, &spec, &grid, &[-1.0, -2.5]).unwrap();
        let obs = ObservationSet::new(f.points, vec![0.0; 2], vec![3.0; 2]).unwrap();
        (inst, spec, grid, obs)
    }

    #[test]
    fn recovers_true_theta_from_clean_frontier() {
        let (inst, spec, grid, obs) = clean_synthetic();
        let res = fit_erm(&inst, &spec, &grid, &obs, &WroConfig::default()).unwrap();
        assert!(res.objective < 1e-6, "{}", res.objective);
        assert!((res.theta_hat[0] + 1.0).abs() < 1e-3, "{:?}", res.theta_hat);
        assert!((res.theta_hat[1] + 2.5).abs() < 1e-3, "{:?}", res.theta_hat);
        let direct = empirical_risk(&res.theta_hat, &inst, &spec, &grid, &obs).unwrap();
        assert!((direct - res.objective).abs() <= 1e-9);
        assert!(spec.contains(&res.theta_hat));
    }

    #[test]
    fn single_frontier_point_is_fit_exactly() {
        let (inst, spec, grid, obs) = clean_synthetic();
        let one = obs.with_points(vec![obs.points[2].clone()]).unwrap();
        let res = fit_erm(&inst, &spec, &grid, &one, &WroConfig::default()).unwrap();
        assert!(res.objective < 1e-6);
    }

    #[test]
    fn trace_monotone_and_deterministic() {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        let grid = sample_weight_grid(2, 6, false).unwrap();
        let obs = generate_observations(&inst, 21, 15, NoiseModel::Uniform { half_width: 0.25 }).unwrap();
        let cfg = WroConfig { seed: 5, ..Default::default() };
        let a = fit_erm(&inst, &spec, &grid, &obs, &cfg).unwrap();
        let b = fit_erm(&inst, &spec, &grid, &obs, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.trace.windows(2) {
            assert!(w[1].value <= w[0].value);
        }
        // Stencil optimality at the final radius.
        let f = |t: &[f64]| empirical_risk(t, &inst, &spec, &grid, &obs).unwrap();
        for j in 0..2 {
            for s in [-1.0, 1.0] {
                let mut t = a.theta_hat.clone();
                t[j] = (t[j] + s * 1e-4 * spec.width(j)).clamp(spec.lower[j], spec.upper[j]);
                assert!(f(&t) >= a.objective - 1e-12);
            }
        }
    }

    #[test]
    fn empty_observations_rejected() {
        let (inst, spec, grid, obs) = clean_synthetic();
        let empty = ObservationSet { points: vec![], ..obs };
        assert!(matches!(fit_erm(&inst, &spec, &grid, &empty, &WroConfig::default()), Err(Error::NoObservations)));
    }

    #[test]
    fn nothing_to_learn() {
        let (inst, _, grid, obs) = clean_synthetic();
        let spec = ThetaSpec::new(vec![], vec![], vec![]).unwrap();
        let res = fit_erm(&inst, &spec, &grid, &obs, &WroConfig::default()).unwrap();
        assert!(res.theta_hat.is_empty());
        assert!(res.objective < 1e-20);
    }

    #[test]
    fn formulation_block_counts() {
        let (inst, spec, grid, obs) = clean_synthetic();
        let two = obs.with_points(obs.points[..2].to_vec()).unwrap();
        let doc = emit_kkt_formulation(&inst, &spec, &grid, &two);
        assert_eq!(doc.kkt_blocks.len(), 6);
        assert_eq!(doc.linearization_blocks.len(), 12);
        assert_eq!(doc.assignment_rows.len(), 2);
        assert!(doc.assignment_rows.iter().all(|r| r.expression.contains("= 1")));
        assert!((doc.big_m.loss_bound - (3.0 * 2f64.sqrt() * 2.0).powi(2)).abs() < 1e-8);
        let text = doc.to_text();
        assert!(text.contains("KKT block k = 5"));
        let back: KktFormulation = serde_json::from_str(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn formulation_linear_map_reproduces_weighted_linear_term() {
        let (inst, spec, grid, obs) = clean_synthetic();
        let doc = emit_kkt_formulation(&inst, &spec, &grid, &obs);
        let theta = [-4.0, -0.5];
        let applied = crate::model::apply_theta(&inst, &spec, &theta).unwrap();
        for blk in &doc.kkt_blocks {
            let expect = applied.weighted_linear(&blk.weight);
            for j in 0..2 {
                let got = blk.linear_fixed[j] + linalg::dot(&blk.linear_theta[j], &theta);
                assert!((got - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn minimal_formulation() {
        let (inst, spec, _, obs) = clean_synthetic();
        let grid = WeightGrid::new(vec![WeightVector::new(vec![0.5, 0.5]).unwrap()], false).unwrap();
        let one = obs.with_points(vec![obs.points[0].clone()]).unwrap();
        let doc = emit_kkt_formulation(&inst, &spec, &grid, &one);
        assert_eq!(doc.kkt_blocks.len(), 1);
        assert_eq!(doc.kkt_blocks[0].stationarity_rows, 2);
        assert_eq!(doc.linearization_blocks.len(), 1);
    }

    #[test]
    fn portfolio_formulation_keeps_budget_row() {
        let inst = build_portfolio_instance();
        let spec = portfolio_theta_spec(4, 0.3);
        let grid = sample_weight_grid(2, 6, true).unwrap();
        let obs = generate_observations(&inst, 1, 20, NoiseModel::Rounding { places: 3 }).unwrap();
        let doc = emit_kkt_formulation(&inst, &spec, &grid, &obs);
        let budget: Vec<usize> = (0..inst.q()).filter(|&r| inst.eq_rows()[r]).collect();
        assert_eq!(budget.len(), 1);
        for blk in &doc.kkt_blocks {
            assert_eq!(blk.equality_rows, budget);
            assert!(blk.constraints.iter().any(|c| c.starts_with(&format!("A[{}] x_{} = 1", budget[0], blk.k))));
        }
        assert_eq!(doc.linearization_blocks.len(), 120);
    }
}
