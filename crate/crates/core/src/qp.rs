//! Exact solver for the weighting problem `min w' f(x) s.t. x in X`.
//!
//! Primal active-set method on
//!
//! ```text
//!     min  1/2 x' H x + g' x
//!     s.t. a_k' x <= b_k   (k in A rows; equality rows always in the working set)
//!          -x_j <= 0
//! ```
//!
//! with `H = sum_l w_l Q_l` and `g = sum_l w_l c_l`. The feasible region is
//! fixed per instance, so every solve starts from a known feasible point (the
//! region's centre, or the previous solution when warm-started).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::MqpInstance;

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-9;
/// Bound on the reported KKT residual of a successful solve.
pub const KKT_TOL: f64 = 1e-8;
/// Ridge added to singular Hessians when the tie-break is enabled.
pub const RIDGE: f64 = 1e-8;

const STEP_TOL: f64 = 1e-13;
const MULT_TOL: f64 = 1e-12;

/// A weight on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidWeight("empty weight".into()));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidWeight(format!("negative or non-finite component in {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeight(format!("components sum to {s}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min_component(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Regularize singular weighted Hessians with `RIDGE * I` instead of failing.
    pub ridge_tie_break: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { ridge_tie_break: false }
    }
}

/// Minimizer of the weighting problem with its KKT certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers: one per row of `A`, then one per sign bound `-x_j <= 0`.
    pub u: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Working set at termination (same indexing as `u`).
    pub active_set: Vec<usize>,
    /// True when the ridge tie-break was applied (solution not unique).
    pub regularized: bool,
}

/// Row `k` of the stacked constraint system and its right-hand side.
fn constraint_row(inst: &MqpInstance, k: usize, out: &mut [f64]) -> f64 {
    let q = inst.q();
    if k < q {
        for (j, o) in out.iter_mut().enumerate() {
            *o = inst.a()[(k, j)];
        }
        inst.b()[k]
    } else {
        out.fill(0.0);
        out[k - q] = -1.0;
        0.0
    }
}

/// Solves the weighting problem for `w` on an instance whose parameters are
/// already applied.
pub fn solve_wp(inst: &MqpInstance, w: &WeightVector, opts: &QpOptions) -> Result<QpSolution> {
    solve_wp_warm(inst, w, opts, None)
}

/// As [`solve_wp`], starting from a previous solution on the same region.
pub fn solve_wp_warm(
    inst: &MqpInstance,
    w: &WeightVector,
    opts: &QpOptions,
    warm: Option<&QpSolution>,
) -> Result<QpSolution> {
    if w.len() != inst.p() {
        return Err(Error::DimensionMismatch { what: "weight", expected: inst.p(), actual: w.len() });
    }
    let n = inst.n();
    let q = inst.q();
    let m = q + n;
    let mut h = inst.weighted_hessian(w.as_slice());
    let g = inst.weighted_linear(w.as_slice());

    // Weyl: lambda_min(sum w_l Q_l) >= sum w_l lambda_min(Q_l).
    let lower: f64 = w.as_slice().iter().zip(inst.lambdas()).map(|(w, l)| w * l).sum();
    let scale = h.amax().max(1.0);
    let mut regularized = false;
    if lower <= 1e-10 * scale {
        let lam = linalg::min_eigenvalue(&h);
        if lam <= 1e-10 * scale {
            if !opts.ridge_tie_break {
                return Err(Error::DegenerateHessian { min_eigenvalue: lam });
            }
            for i in 0..n {
                h[(i, i)] += RIDGE;
            }
            regularized = true;
        }
    }

    let rows: Vec<(Vec<f64>, f64)> = (0..m)
        .map(|k| {
            let mut r = vec![0.0; n];
            let rhs = constraint_row(inst, k, &mut r);
            (r, rhs)
        })
        .collect();
    let is_eq = |k: usize| k < q && inst.eq_rows()[k];

    let mut x: Vec<f64>;
    let mut working: Vec<usize> = (0..q).filter(|&k| is_eq(k)).collect();
    match warm.filter(|s| s.x.len() == n && inst.is_feasible(&s.x, FEAS_TOL)) {
        Some(s) => {
            x = s.x.clone();
            for &k in &s.active_set {
                if k < m && !is_eq(k) {
                    let slack = rows[k].1 - linalg::dot(&rows[k].0, &x);
                    if slack.abs() <= FEAS_TOL {
                        working.push(k);
                    }
                }
            }
        }
        None => x = inst.region().feasible_point.clone(),
    }

    let max_iter = 50 * (n + q);
    let mut iterations = 0;
    let multipliers: Vec<f64>;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::QpNotConverged { iterations: max_iter });
        }
        let (x_eq, mult) = match solve_eqp(&h, &g, &rows, &working) {
            Some(sol) => sol,
            None if !working.is_empty() && warm.is_some() => {
                // Dependent warm working set: restart cold.
                return solve_wp_warm(inst, w, opts, None);
            }
            None => return Err(Error::QpNotConverged { iterations }),
        };
        let step: Vec<f64> = x_eq.iter().zip(&x).map(|(a, b)| a - b).collect();
        let step_size = step.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let x_scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if step_size <= STEP_TOL * x_scale {
            // Stationary on the working set: check inequality multipliers.
            let mut worst: Option<(usize, f64)> = None;
            for (pos, &k) in working.iter().enumerate() {
                if is_eq(k) {
                    continue;
                }
                if mult[pos] < -MULT_TOL && worst.map_or(true, |(_, v)| mult[pos] < v) {
                    worst = Some((pos, mult[pos]));
                }
            }
            match worst {
                Some((pos, _)) => {
                    working.remove(pos);
                }
                None => {
                    x = x_eq;
                    multipliers = mult;
                    break;
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, (row, rhs)) in rows.iter().enumerate() {
            if is_eq(k) || working.contains(&k) {
                continue;
            }
            let ap = linalg::dot(row, &step);
            if ap > 1e-14 * x_scale {
                let slack = (rhs - linalg::dot(row, &x)).max(0.0);
                let ratio = slack / ap;
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(k);
                }
            }
        }
        match blocking {
            Some(k) => {
                for (xi, si) in x.iter_mut().zip(&step) {
                    *xi += alpha * si;
                }
                working.push(k);
            }
            None => x = x_eq,
        }
    }

    let mut u = vec![0.0; m];
    for (pos, &k) in working.iter().enumerate() {
        u[k] = multipliers[pos];
    }
    for xi in x.iter_mut() {
        // Sign bounds that are active hold exactly.
        if xi.abs() < 1e-15 {
            *xi = 0.0;
        }
    }
    let objective = inst.weighted_value(w.as_slice(), &x);
    let kkt_residual = kkt_residual(&h, &g, &rows, q, inst.eq_rows(), &x, &u);
    let mut active_set = working;
    active_set.sort_unstable();
    Ok(QpSolution { x, u, objective, kkt_residual, iterations, active_set, regularized })
}

/// Solves `[H W'; W 0][x; u] = [-g; b_W]`.
fn solve_eqp(h: &DMatrix<f64>, g: &DVector<f64>, rows: &[(Vec<f64>, f64)], working: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = h.nrows();
    let s = working.len();
    let dim = n + s;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for i in 0..n {
        rhs[i] = -g[i];
    }
    for (pos, &k) in working.iter().enumerate() {
        let (row, b) = &rows[k];
        for j in 0..n {
            kkt[(n + pos, j)] = row[j];
            kkt[(j, n + pos)] = row[j];
        }
        rhs[n + pos] = *b;
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).iter().copied().collect(), sol.rows(n, s).iter().copied().collect()))
}

/// Max of the stationarity, complementarity, primal and dual feasibility residuals.
fn kkt_residual(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    rows: &[(Vec<f64>, f64)],
    q: usize,
    eq_rows: &[bool],
    x: &[f64],
    u: &[f64],
) -> f64 {
    let n = x.len();
    let mut grad: Vec<f64> = (0..n).map(|i| g[i] + (0..n).map(|j| h[(i, j)] * x[j]).sum::<f64>()).collect();
    for (k, (row, _)) in rows.iter().enumerate() {
        if u[k] != 0.0 {
            for j in 0..n {
                grad[j] += u[k] * row[j];
            }
        }
    }
    let mut res = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for (k, (row, rhs)) in rows.iter().enumerate() {
        let gk = linalg::dot(row, x) - rhs;
        let eq = k < q && eq_rows[k];
        if eq {
            res = res.max(gk.abs());
        } else {
            res = res.max(gk.max(0.0)).max((-u[k]).max(0.0)).max((u[k] * gk).abs());
        }
    }
    res
}

/// Solves one weighting problem per weight, warm-starting each from the
/// previous solution. Errors carry the offending weight index.
pub fn solve_frontier(inst: &MqpInstance, weights: &[WeightVector], opts: &QpOptions) -> Result<Vec<QpSolution>> {
    let mut out: Vec<QpSolution> = Vec::with_capacity(weights.len());
    for (index, w) in weights.iter().enumerate() {
        let sol = solve_wp_warm(inst, w, opts, out.last())
            .map_err(|e| Error::AtWeight { index, source: Box::new(e) })?;
        out.push(sol);
    }
    Ok(out)
}
