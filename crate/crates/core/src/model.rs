//! Problem instances, parameter spaces, observations and estimator configuration.
//!
//! An [`MqpInstance`] is a multiobjective quadratic program
//!
//! ```text
//!     min  { f_l(x) = 1/2 x' Q_l x + c_l' x }_{l = 1..p}
//!     s.t. A x <= b   (rows flagged in `eq_rows` hold with equality)
//!          x >= 0
//! ```
//!
//! The feasible region never depends on the learnable parameters, so its
//! geometry (coordinate bounds, the norm bound `B`, a feasible point) is
//! computed once at construction and shared by every parametrized copy.

use std::sync::Arc;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Symmetry tolerance for the quadratic terms.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues above `-PSD_TOL` are accepted as nonnegative.
pub const PSD_TOL: f64 = 1e-10;
/// Feasibility tolerance used for vertex enumeration and containment checks.
pub const FEAS_TOL: f64 = 1e-9;
/// Vertex enumeration is skipped above this many candidate bases.
const MAX_VERTEX_BASES: u64 = 200_000;

/// One quadratic objective `1/2 x' Q x + c' x`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Objective {
    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.c.len();
        let mut quad = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.q[(i, j)] * x[j];
            }
            quad += x[i] * row;
        }
        0.5 * quad + linalg::dot(self.c.as_slice(), x)
    }
}

/// Geometry of the (parameter independent) feasible region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    /// Componentwise minimum of `x_j` over the region.
    pub lower: Vec<f64>,
    /// Componentwise maximum of `x_j` over the region.
    pub upper: Vec<f64>,
    /// `B`: the maximum of `||x||_2` over the region (an upper bound when
    /// vertex enumeration was too large).
    pub norm_bound: f64,
    /// Whether `norm_bound` was attained at an enumerated vertex.
    pub norm_bound_exact: bool,
    /// A strictly feasible (when the region has interior) starting point.
    pub feasible_point: Vec<f64>,
}

#[derive(Debug)]
struct Structure {
    quads: Vec<DMatrix<f64>>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    eq_rows: Vec<bool>,
    lambdas: Vec<f64>,
    region: Region,
}

/// A parametrized multiobjective quadratic program with validated invariants.
///
/// Cloning is cheap: the quadratic terms, constraints and region geometry are
/// shared, only the linear terms are owned.
#[derive(Debug, Clone)]
pub struct MqpInstance {
    structure: Arc<Structure>,
    linear: Vec<DVector<f64>>,
}

impl MqpInstance {
    /// Validates the data and computes `lambda_l`, the coordinate bounds and `B`.
    pub fn new(objectives: Vec<Objective>, a: DMatrix<f64>, b: DVector<f64>, eq_rows: Vec<bool>) -> Result<Self> {
        let p = objectives.len();
        if p < 2 {
            return Err(Error::BadArity(p));
        }
        let n = objectives[0].c.len();
        if n == 0 {
            return Err(Error::InvalidInstance("decision dimension is zero".into()));
        }
        let mut lambdas = Vec::with_capacity(p);
        for (l, obj) in objectives.iter().enumerate() {
            if obj.q.nrows() != n || obj.q.ncols() != n {
                return Err(Error::DimensionMismatch { what: "Q_l", expected: n, actual: obj.q.nrows() });
            }
            if obj.c.len() != n {
                return Err(Error::DimensionMismatch { what: "c_l", expected: n, actual: obj.c.len() });
            }
            let asym = linalg::max_asymmetry(&obj.q);
            if asym > SYMMETRY_TOL {
                return Err(Error::InvalidInstance(format!("Q_{l} is not symmetric (max |Q - Q'| = {asym:e})")));
            }
            let lam = linalg::min_eigenvalue(&obj.q);
            if lam < -PSD_TOL {
                return Err(Error::InvalidInstance(format!("Q_{l} is not positive semidefinite (min eigenvalue {lam:e})")));
            }
            lambdas.push(lam.max(0.0));
        }
        if a.ncols() != n {
            return Err(Error::DimensionMismatch { what: "A columns", expected: n, actual: a.ncols() });
        }
        if b.len() != a.nrows() {
            return Err(Error::DimensionMismatch { what: "b", expected: a.nrows(), actual: b.len() });
        }
        if eq_rows.len() != a.nrows() {
            return Err(Error::DimensionMismatch { what: "eq_rows", expected: a.nrows(), actual: eq_rows.len() });
        }
        let region = compute_region(&a, &b, &eq_rows)?;
        let (quads, linear): (Vec<_>, Vec<_>) = objectives.into_iter().map(|o| (o.q, o.c)).unzip();
        Ok(Self {
            structure: Arc::new(Structure { quads, a, b, eq_rows, lambdas, region }),
            linear,
        })
    }

    pub fn p(&self) -> usize {
        self.linear.len()
    }

    pub fn n(&self) -> usize {
        self.linear[0].len()
    }

    /// Number of rows of `A` (equality rows included, sign bounds excluded).
    pub fn q(&self) -> usize {
        self.structure.a.nrows()
    }

    pub fn quad(&self, l: usize) -> &DMatrix<f64> {
        &self.structure.quads[l]
    }

    pub fn linear(&self, l: usize) -> &DVector<f64> {
        &self.linear[l]
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.structure.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.structure.b
    }

    pub fn eq_rows(&self) -> &[bool] {
        &self.structure.eq_rows
    }

    pub fn region(&self) -> &Region {
        &self.structure.region
    }

    /// Smallest eigenvalue of each `Q_l`.
    pub fn lambdas(&self) -> &[f64] {
        &self.structure.lambdas
    }

    /// `lambda = min_l lambda_l`.
    pub fn lambda(&self) -> f64 {
        self.structure.lambdas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn strongly_convex(&self) -> bool {
        self.lambda() > 0.0
    }

    /// `B`, the bound on `||x||_2` over the feasible region.
    pub fn norm_bound(&self) -> f64 {
        self.structure.region.norm_bound
    }

    pub fn objective(&self, l: usize) -> Objective {
        Objective { q: self.structure.quads[l].clone(), c: self.linear[l].clone() }
    }

    pub fn objective_values(&self, x: &[f64]) -> Vec<f64> {
        (0..self.p()).map(|l| self.objective(l).value(x)).collect()
    }

    /// `w' f(x)`.
    pub fn weighted_value(&self, w: &[f64], x: &[f64]) -> f64 {
        self.objective_values(x).iter().zip(w).map(|(f, w)| f * w).sum()
    }

    pub fn weighted_hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut h = DMatrix::zeros(n, n);
        for (q, &wl) in self.structure.quads.iter().zip(w) {
            if wl != 0.0 {
                h += q * wl;
            }
        }
        h
    }

    pub fn weighted_linear(&self, w: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.n());
        for (c, &wl) in self.linear.iter().zip(w) {
            if wl != 0.0 {
                g += c * wl;
            }
        }
        g
    }

    /// Overwrites linear coefficient `c_l[j]`. Structure stays shared.
    fn set_linear(&mut self, l: usize, j: usize, value: f64) {
        self.linear[l][j] = value;
    }

    /// Componentwise feasibility check with tolerance `tol`.
    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        if x.iter().any(|&v| v < -tol) {
            return false;
        }
        let a = self.a();
        (0..self.q()).all(|k| {
            let ax: f64 = (0..self.n()).map(|j| a[(k, j)] * x[j]).sum();
            let r = ax - self.b()[k];
            if self.eq_rows()[k] {
                r.abs() <= tol
            } else {
                r <= tol
            }
        })
    }

    pub fn to_document(&self, theta_spec: Option<&ThetaSpec>) -> InstanceDocument {
        InstanceDocument {
            p: self.p(),
            n: self.n(),
            q: self.q(),
            objectives: (0..self.p())
                .map(|l| ObjectiveDocument {
                    q: linalg::matrix_to_rows(self.quad(l)),
                    c: self.linear(l).as_slice().to_vec(),
                })
                .collect(),
            a: linalg::matrix_to_rows(self.a()),
            b: self.b().as_slice().to_vec(),
            eq_rows: self.eq_rows().to_vec(),
            theta_spec: theta_spec.cloned(),
            theta: theta_spec.map(|s| s.current_values(self)),
        }
    }

    pub fn from_document(doc: &InstanceDocument) -> Result<(Self, Option<ThetaSpec>)> {
        if doc.objectives.len() != doc.p {
            return Err(Error::DimensionMismatch { what: "objectives", expected: doc.p, actual: doc.objectives.len() });
        }
        let mut objectives = Vec::with_capacity(doc.p);
        for o in &doc.objectives {
            let q = linalg::matrix_from_rows(&o.q, doc.n)
                .filter(|m| m.nrows() == doc.n)
                .ok_or(Error::DimensionMismatch { what: "Q_l", expected: doc.n, actual: o.q.len() })?;
            if o.c.len() != doc.n {
                return Err(Error::DimensionMismatch { what: "c_l", expected: doc.n, actual: o.c.len() });
            }
            objectives.push(Objective { q, c: DVector::from_vec(o.c.clone()) });
        }
        if doc.a.len() != doc.q {
            return Err(Error::DimensionMismatch { what: "A rows", expected: doc.q, actual: doc.a.len() });
        }
        let a = linalg::matrix_from_rows(&doc.a, doc.n)
            .ok_or(Error::DimensionMismatch { what: "A columns", expected: doc.n, actual: 0 })?;
        let inst = Self::new(objectives, a, DVector::from_vec(doc.b.clone()), doc.eq_rows.clone())?;
        if let Some(spec) = &doc.theta_spec {
            spec.validate_against(&inst)?;
            if let Some(theta) = &doc.theta {
                if theta.len() != spec.n_theta() {
                    return Err(Error::DimensionMismatch { what: "theta", expected: spec.n_theta(), actual: theta.len() });
                }
                if linalg::max_abs_diff(theta, &spec.current_values(&inst)) > 1e-12 {
                    return Err(Error::InvalidInstance("theta disagrees with the objective coefficients".into()));
                }
            }
        }
        Ok((inst, doc.theta_spec.clone()))
    }
}

/// Solves the `2n` bound LPs, then computes `B` by vertex enumeration.
fn compute_region(a: &DMatrix<f64>, b: &DVector<f64>, eq_rows: &[bool]) -> Result<Region> {
    let n = a.ncols();
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut centre = vec![0.0; n];
    for j in 0..n {
        for (sense, slot) in [(OptimizationDirection::Minimize, 0), (OptimizationDirection::Maximize, 1)] {
            let mut lp = Problem::new(sense);
            let vars: Vec<_> = (0..n)
                .map(|i| lp.add_var(if i == j { 1.0 } else { 0.0 }, (0.0, f64::INFINITY)))
                .collect();
            for k in 0..a.nrows() {
                let expr: Vec<_> = (0..n).filter(|&i| a[(k, i)] != 0.0).map(|i| (vars[i], a[(k, i)])).collect();
                let op = if eq_rows[k] { ComparisonOp::Eq } else { ComparisonOp::Le };
                lp.add_constraint(expr.as_slice(), op, b[k]);
            }
            let sol = lp.solve().map_err(|e| match e {
                minilp::Error::Infeasible => Error::Infeasible,
                minilp::Error::Unbounded => Error::Unbounded,
            })?;
            let value = sol.objective();
            if slot == 0 {
                lower[j] = value.max(0.0);
            } else {
                upper[j] = value;
            }
            for (i, v) in vars.iter().enumerate() {
                centre[i] += sol[*v].max(0.0) / (2 * n) as f64;
            }
        }
    }
    let (norm_bound, exact) = match enumerate_vertex_norm(a, b, eq_rows) {
        Some(bnd) => (bnd, true),
        None => {
            let corner: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| l.abs().max(u.abs())).collect();
            (linalg::norm(&corner), false)
        }
    };
    Ok(Region { lower, upper, norm_bound, norm_bound_exact: exact, feasible_point: centre })
}

/// Max of `||x||_2` over the vertices of the region, or `None` when there are
/// too many candidate bases. The max of a convex function over a polytope is
/// attained at a vertex.
fn enumerate_vertex_norm(a: &DMatrix<f64>, b: &DVector<f64>, eq_rows: &[bool]) -> Option<f64> {
    let n = a.ncols();
    // All constraint rows as (row, rhs): A rows then -x_j <= 0.
    let mut rows: Vec<(Vec<f64>, f64)> = (0..a.nrows()).map(|k| ((0..n).map(|j| a[(k, j)]).collect(), b[k])).collect();
    for j in 0..n {
        let mut r = vec![0.0; n];
        r[j] = -1.0;
        rows.push((r, 0.0));
    }
    let eq: Vec<usize> = (0..a.nrows()).filter(|&k| eq_rows[k]).collect();
    let ineq: Vec<usize> = (0..rows.len()).filter(|&k| k >= a.nrows() || !eq_rows[k]).collect();
    if eq.len() > n {
        return None;
    }
    let free = n - eq.len();
    if linalg::binomial(ineq.len(), free) > MAX_VERTEX_BASES {
        return None;
    }
    let mut best: Option<f64> = None;
    linalg::for_each_combination(ineq.len(), free, |subset| {
        let active: Vec<usize> = eq.iter().copied().chain(subset.iter().map(|&s| ineq[s])).collect();
        let m = DMatrix::from_fn(n, n, |r, c| rows[active[r]].0[c]);
        let rhs = DVector::from_fn(n, |r, _| rows[active[r]].1);
        let Some(x) = m.lu().solve(&rhs) else { return };
        if x.iter().any(|v| !v.is_finite()) {
            return;
        }
        let feasible = rows.iter().enumerate().all(|(k, (row, rhs))| {
            let r = linalg::dot(row, x.as_slice()) - rhs;
            let scale = 1.0 + rhs.abs();
            if k < a.nrows() && eq_rows[k] {
                r.abs() <= FEAS_TOL * scale
            } else {
                r <= FEAS_TOL * scale
            }
        });
        if feasible {
            let v = x.norm();
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    });
    best
}

/// One learnable coefficient: `c_objective[coord] = scale * theta_entry`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEntry {
    pub objective: usize,
    pub coord: usize,
    /// `1` for a plain linear coefficient, `-1` when the parameter is a
    /// return that enters the objective as `-r' x`.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

/// The learnable parameters: an ordered list of linear coefficients and a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSpec {
    pub layout: Vec<ThetaEntry>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ThetaSpec {
    pub fn new(layout: Vec<ThetaEntry>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let spec = Self { layout, lower, upper };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let nt = self.layout.len();
        if self.lower.len() != nt {
            return Err(Error::DimensionMismatch { what: "theta lower", expected: nt, actual: self.lower.len() });
        }
        if self.upper.len() != nt {
            return Err(Error::DimensionMismatch { what: "theta upper", expected: nt, actual: self.upper.len() });
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!("theta box entry {i}: [{lo}, {hi}]")));
            }
        }
        for e in &self.layout {
            if e.scale == 0.0 || !e.scale.is_finite() {
                return Err(Error::InvalidConfig("theta entry scale must be finite and nonzero".into()));
            }
        }
        if nt > 0 && self.radius() <= 0.0 {
            return Err(Error::InvalidConfig("theta box radius D must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_against(&self, instance: &MqpInstance) -> Result<()> {
        self.validate()?;
        for e in &self.layout {
            if e.objective >= instance.p() || e.coord >= instance.n() {
                return Err(Error::InvalidConfig(format!(
                    "theta entry (objective {}, coord {}) outside a {}x{} instance",
                    e.objective,
                    e.coord,
                    instance.p(),
                    instance.n()
                )));
            }
        }
        Ok(())
    }

    pub fn n_theta(&self) -> usize {
        self.layout.len()
    }

    /// `D = || max(|lower|, |upper|) ||_2`.
    pub fn radius(&self) -> f64 {
        let corner: Vec<f64> = self.lower.iter().zip(&self.upper).map(|(l, u)| l.abs().max(u.abs())).collect();
        linalg::norm(&corner)
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.n_theta()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| *t >= *l && *t <= *u)
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_theta() {
            return Err(Error::DimensionMismatch { what: "theta", expected: self.n_theta(), actual: theta.len() });
        }
        for (i, &t) in theta.iter().enumerate() {
            if !(t >= self.lower[i] && t <= self.upper[i]) {
                return Err(Error::OutOfBounds { index: i, value: t, lower: self.lower[i], upper: self.upper[i] });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (i, t) in theta.iter_mut().enumerate() {
            *t = t.clamp(self.lower[i], self.upper[i]);
        }
    }

    /// The parameter values currently stored in `instance`.
    pub fn current_values(&self, instance: &MqpInstance) -> Vec<f64> {
        self.layout.iter().map(|e| instance.linear(e.objective)[e.coord] / e.scale).collect()
    }

    pub fn centre(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }
}

/// Copy of `instance` with the learnable linear coefficients overwritten.
pub fn apply_theta(instance: &MqpInstance, spec: &ThetaSpec, theta: &[f64]) -> Result<MqpInstance> {
    spec.check(theta)?;
    let mut out = instance.clone();
    for (e, &t) in spec.layout.iter().zip(theta) {
        if e.objective >= out.p() || e.coord >= out.n() {
            return Err(Error::InvalidConfig(format!("theta entry ({}, {}) out of range", e.objective, e.coord)));
        }
        out.set_linear(e.objective, e.coord, e.scale * t);
    }
    Ok(out)
}

/// Observed decisions together with their support box `Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub points: Vec<Vec<f64>>,
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    /// Max of `||y||_2` over the corners of the support box.
    pub radius: f64,
}

impl ObservationSet {
    pub fn new(points: Vec<Vec<f64>>, support_lo: Vec<f64>, support_hi: Vec<f64>) -> Result<Self> {
        let n = support_lo.len();
        if support_hi.len() != n {
            return Err(Error::DimensionMismatch { what: "support box", expected: n, actual: support_hi.len() });
        }
        if support_lo.iter().zip(&support_hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidConfig("support box has lo > hi".into()));
        }
        for (i, y) in points.iter().enumerate() {
            if y.len() != n {
                return Err(Error::DimensionMismatch { what: "observation", expected: n, actual: y.len() });
            }
            let inside = y.iter().zip(support_lo.iter().zip(&support_hi)).all(|(v, (l, h))| *v >= *l && *v <= *h);
            if !inside {
                return Err(Error::InvalidConfig(format!("observation {i} lies outside the support box")));
            }
        }
        let radius = box_corner_norm(&support_lo, &support_hi);
        Ok(Self { points, support_lo, support_hi, radius })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support_lo.len()
    }

    /// A new set over the same support with the given points.
    pub fn with_points(&self, points: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(points, self.support_lo.clone(), self.support_hi.clone())
    }
}

/// `max ||corner||_2` over the corners of `[lo, hi]`.
pub fn box_corner_norm(lo: &[f64], hi: &[f64]) -> f64 {
    let far: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| l.abs().max(h.abs())).collect();
    linalg::norm(&far)
}

/// Which violated observations receive a cut in one exchange iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CutPolicy {
    /// Append a witness for every observation with positive violation.
    #[default]
    AllViolated,
    /// Append only the witness of the most violated observation.
    MaxOnly,
}

impl std::str::FromStr for CutPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-violated" | "all" => Ok(Self::AllViolated),
            "max-only" | "max" => Ok(Self::MaxOnly),
            other => Err(Error::InvalidConfig(format!("unknown cut policy `{other}`"))),
        }
    }
}

/// Settings of the robust estimator and of the shared derivative-free search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WroConfig {
    /// Wasserstein radius.
    pub epsilon: f64,
    /// Stopping tolerance on the maximum constraint violation.
    pub delta: f64,
    /// Number of weights in the surrogate-loss grid.
    pub k: usize,
    /// Slack expansion of the `v_i` bound: `v_i <= (m+1) V2 - m V1`.
    pub m: u32,
    pub max_iterations: usize,
    /// Points per axis of the subproblem scan grid.
    pub grid_resolution: usize,
    /// Multi-start count of the parameter search.
    pub restarts: usize,
    pub seed: u64,
    pub cut_policy: CutPolicy,
    /// Evaluation budget per pattern-search start.
    pub max_evaluations: usize,
    /// Add a ridge to singular weighted Hessians instead of failing.
    pub ridge_tie_break: bool,
}

impl Default for WroConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            delta: 0.1,
            k: 6,
            m: 1,
            max_iterations: 100,
            grid_resolution: 41,
            restarts: 8,
            seed: 0,
            cut_policy: CutPolicy::AllViolated,
            max_evaluations: 400,
            ridge_tie_break: false,
        }
    }
}

impl WroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.k < 1 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::InvalidConfig("grid_resolution must be >= 2".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bounds of the dual variables `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VBounds {
    pub v1: f64,
    pub v2: f64,
    /// Upper bound of `v_{N+1}`: `(V2 - V1) / epsilon`.
    pub v_last_max: f64,
    /// Upper bound of each `v_i`: `(m+1) V2 - m V1`.
    pub v_i_max: f64,
}

impl VBounds {
    /// `V1 = 0`, `V2 = (B + R)^2`.
    pub fn new(norm_bound: f64, radius: f64, m: u32, epsilon: f64) -> Result<Self> {
        let v1 = 0.0;
        let v2 = (norm_bound + radius).powi(2);
        if !(epsilon > 0.0) {
            return Err(Error::EmptyBoundsBox(format!("epsilon must be positive, got {epsilon}")));
        }
        let bounds = Self {
            v1,
            v2,
            v_last_max: (v2 - v1) / epsilon,
            v_i_max: (m as f64 + 1.0) * v2 - m as f64 * v1,
        };
        if !bounds.v_last_max.is_finite() || !bounds.v_i_max.is_finite() || bounds.v_i_max < v1 {
            return Err(Error::EmptyBoundsBox(format!("{bounds:?}")));
        }
        Ok(bounds)
    }
}

/// The JSON form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub p: usize,
    pub n: usize,
    pub q: usize,
    pub objectives: Vec<ObjectiveDocument>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub eq_rows: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_spec: Option<ThetaSpec>,
    /// Current values of the `theta_spec` parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveDocument {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

/// Expected returns of the eight securities of the portfolio case study.
pub const PORTFOLIO_RETURNS: [f64; 8] = [0.1791, 0.1143, 0.1357, 0.0837, 0.1653, 0.1808, 0.0352, 0.0368];

/// Return covariance matrix of the eight securities.
#[rustfmt::skip]
pub const PORTFOLIO_COVARIANCE: [[f64; 8]; 8] = [
    [0.1641, 0.0299, 0.0478, 0.0491, 0.0580, 0.0871, 0.0603, 0.0492],
    [0.0299, 0.0720, 0.0511, 0.0287, 0.0527, 0.0297, 0.0291, 0.0326],
    [0.0478, 0.0511, 0.0794, 0.0498, 0.0664, 0.0479, 0.0395, 0.0523],
    [0.0491, 0.0287, 0.0498, 0.1148, 0.0336, 0.0503, 0.0326, 0.0447],
    [0.0580, 0.0527, 0.0664, 0.0336, 0.1073, 0.0483, 0.0402, 0.0533],
    [0.0871, 0.0297, 0.0479, 0.0503, 0.0483, 0.1134, 0.0591, 0.0387],
    [0.0603, 0.0291, 0.0395, 0.0326, 0.0402, 0.0591, 0.0704, 0.0244],
    [0.0492, 0.0326, 0.0523, 0.0447, 0.0533, 0.0387, 0.0244, 0.1028],
];

/// Upper bound on each portfolio fraction.
pub const PORTFOLIO_UPPER: f64 = 1.0;

/// The two-objective, two-variable quadratic test problem on `[0, 3]^2`.
pub fn build_synthetic_instance() -> MqpInstance {
    let objectives = vec![
        Objective {
            q: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            c: DVector::from_vec(vec![-0.5, -1.0]),
        },
        Objective {
            q: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
            c: DVector::from_vec(vec![-5.0, -2.5]),
        },
    ];
    let a = DMatrix::identity(2, 2);
    let b = DVector::from_vec(vec![3.0, 3.0]);
    MqpInstance::new(objectives, a, b, vec![false, false]).expect("built-in synthetic instance is valid")
}

/// Learnable second coefficients of `c_1` and `c_2`, each within `[-6, 0]`.
pub fn synthetic_theta_spec() -> ThetaSpec {
    ThetaSpec::new(
        vec![
            ThetaEntry { objective: 0, coord: 1, scale: 1.0 },
            ThetaEntry { objective: 1, coord: 1, scale: 1.0 },
        ],
        vec![-6.0, -6.0],
        vec![0.0, 0.0],
    )
    .expect("built-in synthetic theta spec is valid")
}

/// Mean-variance portfolio selection over eight securities.
///
/// `f_1 = -r' x` and `f_2 = x' C x`, stored in the `1/2 x' Q x` convention as
/// `Q_2 = 2 C`. Constraints: `x_i <= 1`, `sum x = 1`, `x >= 0`.
pub fn build_portfolio_instance() -> MqpInstance {
    let n = PORTFOLIO_RETURNS.len();
    let cov = DMatrix::from_fn(n, n, |i, j| PORTFOLIO_COVARIANCE[i][j]);
    let objectives = vec![
        Objective {
            q: DMatrix::zeros(n, n),
            c: DVector::from_iterator(n, PORTFOLIO_RETURNS.iter().map(|r| -r)),
        },
        Objective { q: cov * 2.0, c: DVector::zeros(n) },
    ];
    let mut a = DMatrix::zeros(n + 1, n);
    let mut b = DVector::zeros(n + 1);
    for i in 0..n {
        a[(i, i)] = 1.0;
        b[i] = PORTFOLIO_UPPER;
        a[(n, i)] = 1.0;
    }
    b[n] = 1.0;
    let mut eq_rows = vec![false; n + 1];
    eq_rows[n] = true;
    MqpInstance::new(objectives, a, b, eq_rows).expect("built-in portfolio instance is valid")
}

/// Learnable expected returns of the first `count` securities, within `[0, upper]`.
pub fn portfolio_theta_spec(count: usize, upper: f64) -> ThetaSpec {
    ThetaSpec::new(
        (0..count).map(|j| ThetaEntry { objective: 0, coord: j, scale: -1.0 }).collect(),
        vec![0.0; count],
        vec![upper; count],
    )
    .expect("portfolio theta spec is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_instance_data() {
        let inst = build_synthetic_instance();
        assert_eq!(inst.quad(0)[(1, 1)], 2.0);
        assert_eq!(inst.linear(1)[0], -5.0);
        assert!((inst.lambda() - 1.0).abs() < 1e-14);
        assert!(inst.strongly_convex());
        assert!((inst.norm_bound() - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(inst.region().norm_bound_exact);
        assert_eq!(inst.region().lower, vec![0.0, 0.0]);
        assert_eq!(inst.region().upper, vec![3.0, 3.0]);
        assert!(inst.is_feasible(&inst.region().feasible_point, 1e-12));
    }

    #[test]
    fn portfolio_instance_data() {
        let inst = build_portfolio_instance();
        assert_eq!(-inst.linear(0)[0], 0.1791);
        assert_eq!(-inst.linear(0)[7], 0.0368);
        assert_eq!(PORTFOLIO_COVARIANCE[0][0], 0.1641);
        assert_eq!(PORTFOLIO_COVARIANCE[0][5], 0.0871);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(PORTFOLIO_COVARIANCE[i][j], PORTFOLIO_COVARIANCE[j][i]);
            }
        }
        assert_eq!(inst.lambdas()[0], 0.0);
        assert!(!inst.strongly_convex());
        assert!(inst.lambdas()[1] > 0.0);
        // The simplex vertices are the unit vectors.
        assert!((inst.norm_bound() - 1.0).abs() < 1e-12);
        assert!(inst.is_feasible(&inst.region().feasible_point, 1e-9));
    }

    #[test]
    fn apply_theta_recovers_true_instance() {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        let moved = apply_theta(&inst, &spec, &[-3.0, -4.0]).unwrap();
        assert_eq!(moved.linear(0)[1], -3.0);
        let back = apply_theta(&moved, &spec, &[-1.0, -2.5]).unwrap();
        for l in 0..2 {
            assert_eq!(back.linear(l), inst.linear(l));
            assert_eq!(back.quad(l), inst.quad(l));
        }
        let same = apply_theta(&inst, &spec, &spec.current_values(&inst)).unwrap();
        assert_eq!(same.linear(1), inst.linear(1));
    }

    #[test]
    fn apply_theta_errors() {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        assert!(matches!(apply_theta(&inst, &spec, &[-7.0, 0.0]), Err(Error::OutOfBounds { index: 0, .. })));
        assert!(matches!(apply_theta(&inst, &spec, &[-1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn theta_radius() {
        assert!((synthetic_theta_spec().radius() - 6.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(ThetaSpec::new(vec![], vec![], vec![]).is_ok());
        assert!(ThetaSpec::new(
            vec![ThetaEntry { objective: 0, coord: 0, scale: 1.0 }],
            vec![0.0],
            vec![0.0]
        )
        .is_err());
    }

    #[test]
    fn vbounds_relations() {
        let vb = VBounds::new(3.0 * 2f64.sqrt(), 3.25 * 2f64.sqrt(), 1, 0.01).unwrap();
        assert!((vb.v2 - 78.125).abs() < 1e-10);
        assert!((vb.v_last_max * 0.01 - (vb.v2 - vb.v1)).abs() < 1e-9);
        assert!((vb.v_i_max - 2.0 * vb.v2).abs() < 1e-12);
        assert!(VBounds::new(1.0, 1.0, 1, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_instances() {
        let bad_q = Objective { q: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), c: DVector::zeros(2) };
        let ok = Objective { q: DMatrix::identity(2, 2), c: DVector::zeros(2) };
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(MqpInstance::new(vec![bad_q, ok.clone()], a.clone(), b.clone(), vec![false; 2]).is_err());
        let indefinite = Objective { q: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), c: DVector::zeros(2) };
        assert!(MqpInstance::new(vec![indefinite, ok.clone()], a.clone(), b.clone(), vec![false; 2]).is_err());
        assert!(matches!(
            MqpInstance::new(vec![ok.clone()], a.clone(), b.clone(), vec![false; 2]),
            Err(Error::BadArity(1))
        ));
        // x1 unbounded above.
        let a1 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            MqpInstance::new(vec![ok.clone(), ok.clone()], a1, DVector::from_vec(vec![1.0]), vec![false]),
            Err(Error::Unbounded)
        ));
        // x1 + x2 <= -1 with x >= 0 is empty.
        let a2 = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            MqpInstance::new(vec![ok.clone(), ok], a2, DVector::from_vec(vec![-1.0, 1.0, 1.0]), vec![false; 3]),
            Err(Error::Infeasible)
        ));
    }

    #[test]
    fn document_round_trip() {
        let inst = build_portfolio_instance();
        let spec = portfolio_theta_spec(4, 0.3);
        let doc = inst.to_document(Some(&spec));
        let json = serde_json::to_string(&doc).unwrap();
        let back: InstanceDocument = serde_json::from_str(&json).unwrap();
        let (inst2, spec2) = MqpInstance::from_document(&back).unwrap();
        assert_eq!(spec2.unwrap(), spec);
        assert_eq!(inst2.quad(1), inst.quad(1));
        assert_eq!(inst2.eq_rows(), inst.eq_rows());
        assert_eq!(back.theta.as_deref(), Some(&PORTFOLIO_RETURNS[..4]));

        let mut wrong = back.clone();
        wrong.theta = Some(vec![0.2, 0.1143, 0.1357, 0.0837]);
        assert!(matches!(MqpInstance::from_document(&wrong), Err(Error::InvalidInstance(_))));
        wrong.theta = Some(vec![0.1791]);
        assert!(matches!(MqpInstance::from_document(&wrong), Err(Error::DimensionMismatch { .. })));
        wrong.theta = None;
        assert!(MqpInstance::from_document(&wrong).is_ok());
    }
}
