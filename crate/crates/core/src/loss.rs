//! Surrogate loss, empirical risk, prediction error and the bundle of
//! analytic constants (bounds, Lipschitz moduli, iteration and risk constants).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{apply_theta, MqpInstance, ObservationSet, ThetaSpec, VBounds, WroConfig};
use crate::pareto::WeightGrid;
use crate::qp::{solve_frontier, QpOptions, QpSolution};

/// Observations processed per rayon task when averaging losses.
const PAR_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEvaluation {
    pub value: f64,
    pub argmin_k: usize,
    pub nearest_x: Vec<f64>,
}

/// Decisions `S(w_k, θ)` for every grid weight at a fixed `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<Vec<f64>>,
}

impl Frontier {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyFrontier);
        }
        Ok(Self { points })
    }

    pub fn from_solutions(sols: &[QpSolution]) -> Result<Self> {
        Self::new(sols.iter().map(|s| s.x.clone()).collect())
    }

    /// Solves the weighting problem at each grid weight for the instance at `θ`.
    pub fn solve(instance: &MqpInstance, spec: &ThetaSpec, grid: &WeightGrid, theta: &[f64]) -> Result<Self> {
        Self::solve_with(instance, spec, grid, theta, &QpOptions::default())
    }

    pub fn solve_with(
        instance: &MqpInstance,
        spec: &ThetaSpec,
        grid: &WeightGrid,
        theta: &[f64],
        opts: &QpOptions,
    ) -> Result<Self> {
        let inst = apply_theta(instance, spec, theta)?;
        let sols = solve_frontier(&inst, &grid.weights, opts)?;
        Self::from_solutions(&sols)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(min_k ‖y − x_k‖², argmin)` with ties to the lowest index.
    #[inline]
    pub fn nearest(&self, y: &[f64]) -> (f64, usize) {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (k, x) in self.points.iter().enumerate() {
            let d = linalg::dist2(y, x);
            if d < best {
                best = d;
                arg = k;
            }
        }
        (best, arg)
    }

    #[inline]
    pub fn loss(&self, y: &[f64]) -> f64 {
        self.nearest(y).0
    }

    pub fn evaluate(&self, y: &[f64]) -> LossEvaluation {
        let (value, argmin_k) = self.nearest(y);
        LossEvaluation { value, argmin_k, nearest_x: self.points[argmin_k].clone() }
    }

    /// Mean loss over a batch of points.
    pub fn mean_loss(&self, points: &[Vec<f64>]) -> f64 {
        if points.len() <= PAR_CHUNK {
            return points.iter().map(|y| self.loss(y)).sum::<f64>() / points.len() as f64;
        }
        // Fixed chunking keeps the summation order independent of the thread count.
        let partial: Vec<f64> = points
            .par_chunks(PAR_CHUNK)
            .map(|c| c.iter().map(|y| self.loss(y)).sum::<f64>())
            .collect();
        partial.iter().sum::<f64>() / points.len() as f64
    }
}

/// `l_K(y, θ)`: squared distance from `y` to the nearest frontier solution.
pub fn surrogate_loss(y: &[f64], frontier: &[QpSolution]) -> Result<LossEvaluation> {
    Ok(Frontier::from_solutions(frontier)?.evaluate(y))
}

/// Mean surrogate loss of the observations at `θ`.
pub fn empirical_risk(
    theta: &[f64],
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    obs: &ObservationSet,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    Ok(Frontier::solve(instance, spec, grid, theta)?.mean_loss(&obs.points))
}

/// Mean surrogate loss on a held-out validation set at the fitted `θ̂`.
pub fn prediction_error(
    theta_hat: &[f64],
    instance: &MqpInstance,
    spec: &ThetaSpec,
    grid: &WeightGrid,
    validation: &ObservationSet,
) -> Result<f64> {
    empirical_risk(theta_hat, instance, spec, grid, validation)
}

/// `h(x, w, θ₁, θ₂) = wᵀf(x, θ₁) − wᵀf(x, θ₂)`.
pub fn objective_difference(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    w: &[f64],
    theta1: &[f64],
    theta2: &[f64],
    x: &[f64],
) -> Result<f64> {
    let a = apply_theta(instance, spec, theta1)?;
    let b = apply_theta(instance, spec, theta2)?;
    Ok(a.weighted_value(w, x) - b.weighted_value(w, x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsBundle {
    pub b: f64,
    pub r: f64,
    pub d: f64,
    pub kappa: f64,
    pub lambda: f64,
    pub v1: f64,
    pub v2: f64,
    /// Absent when `λ = 0`.
    pub g: Option<f64>,
    /// Absent when `ε = 0`.
    pub r0: Option<f64>,
    pub h: f64,
    /// `2(B+R)`.
    pub lipschitz_y: f64,
    /// `4(B+R)κ/λ`, absent when `λ = 0`.
    pub lipschitz_theta: Option<f64>,
    pub notes: Vec<String>,
}

impl ConstantsBundle {
    /// `(name, value)` rows for every constant that is present.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![
            ("B", self.b),
            ("R", self.r),
            ("D", self.d),
            ("kappa", self.kappa),
            ("lambda", self.lambda),
            ("V1", self.v1),
            ("V2", self.v2),
        ];
        if let Some(g) = self.g {
            rows.push(("G", g));
        }
        if let Some(r0) = self.r0 {
            rows.push(("R0", r0));
        }
        rows.push(("H", self.h));
        rows.push(("lipschitz_y", self.lipschitz_y));
        if let Some(l) = self.lipschitz_theta {
            rows.push(("lipschitz_theta", l));
        }
        rows
    }

    /// The trivial iteration bound `(G·R₀/δ + 1)^(n_θ+N+1)`, saturating at infinity.
    pub fn iteration_bound(&self, delta: f64, n_theta: usize, n_obs: usize) -> Option<f64> {
        let base = self.g? * self.r0? / delta + 1.0;
        Some(base.powf((n_theta + n_obs + 1) as f64))
    }
}

/// Closed-form constants for `instance`, `spec` and `obs` under `config`.
///
/// With `strict` set, an instance that is not strongly convex is an error;
/// otherwise the λ-dependent fields are left out with a note.
pub fn compute_constants(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    obs: &ObservationSet,
    config: &WroConfig,
    strict: bool,
) -> Result<ConstantsBundle> {
    let b = instance.norm_bound();
    let r = obs.radius;
    let d = spec.radius();
    let lambda = instance.lambda();
    let kappa = 2.0 * r;
    let v1 = 0.0;
    let v2 = (b + r).powi(2);
    let mut notes = Vec::new();

    let (g, lipschitz_theta) = if lambda > 0.0 {
        let lt = 4.0 * (b + r) * kappa / lambda;
        (Some(1.0 + 2.0 * r + lt), Some(lt))
    } else if strict {
        return Err(Error::NotStronglyConvex { lambda });
    } else {
        notes.push("G and the theta-Lipschitz constant need lambda > 0".to_string());
        (None, None)
    };

    let r0 = if config.epsilon > 0.0 {
        let vb = VBounds::new(b, r, config.m, config.epsilon)?;
        let n_obs = obs.len() as f64;
        Some((d * d + n_obs * vb.v_i_max.powi(2) + vb.v_last_max.powi(2)).sqrt())
    } else {
        notes.push("R0 needs epsilon > 0".to_string());
        None
    };

    let n_theta = spec.n_theta() as f64;
    let h = if n_theta > 0.0 {
        96.0 * (3.0 * d * n_theta.sqrt() / kappa + 2.0 * r) * (b + r)
    } else {
        96.0 * 2.0 * r * (b + r)
    };

    Ok(ConstantsBundle {
        b,
        r,
        d,
        kappa,
        lambda,
        v1,
        v2,
        g,
        r0,
        h,
        lipschitz_y: 2.0 * (b + r),
        lipschitz_theta,
        notes,
    })
}

/// Writes `name,value` rows.
pub fn write_constants_csv<W: Write>(bundle: &ConstantsBundle, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["name", "value"])?;
    for (name, value) in bundle.rows() {
        wtr.write_record([name.to_string(), format!("{value:.12}")])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_synthetic_instance, synthetic_theta_spec};
    use crate::pareto::{generate_observations, sample_weight_grid, NoiseModel};
    use proptest::prelude::*;

    const TRUE_THETA: [f64; 2] = [-1.0, -2.5];

    fn synthetic_frontier(k: usize) -> (Frontier, Vec<QpSolution>) {
        let inst = build_synthetic_instance();
        let grid = sample_weight_grid(2, k, false).unwrap();
        let sols = solve_frontier(&inst, &grid.weights, &QpOptions::default()).unwrap();
        (Frontier::from_solutions(&sols).unwrap(), sols)
    }

    #[test]
    fn surrogate_loss_examples() {
        let (_, sols) = synthetic_frontier(6);
        let ev = surrogate_loss(&[0.5, 0.5], &sols).unwrap();
        assert!(ev.value < 1e-20);
        assert_eq!(ev.argmin_k, 5);

        // Oracle: enumerate distances by hand.
        let y = [2.5, 2.6];
        let dists: Vec<f64> = sols.iter().map(|s| (y[0] - s.x[0]).powi(2) + (y[1] - s.x[1]).powi(2)).collect();
        let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let ev = surrogate_loss(&y, &sols).unwrap();
        assert!((ev.value - 0.01).abs() < 1e-12);
        assert!((ev.value - best).abs() < 1e-15);
        assert_eq!(ev.nearest_x, vec![2.5, 2.5]);

        let one = Frontier::new(vec![vec![1.0, 2.0]]).unwrap();
        assert!((one.loss(&[0.0, 0.0]) - 5.0).abs() < 1e-15);
        assert!(matches!(surrogate_loss(&y, &[]), Err(Error::EmptyFrontier)));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let f = Frontier::new(vec![vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(f.nearest(&[0.0]).1, 0);
        assert_eq!(f.nearest(&[1.0]).1, 0);
    }

    #[test]
    fn empirical_risk_examples() {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        let grid = sample_weight_grid(2, 6, false).unwrap();
        let (f, _) = synthetic_frontier(6);
        let clean = ObservationSet::new(f.points.clone(), vec![0.0; 2], vec![3.0; 2]).unwrap();
        assert!(empirical_risk(&TRUE_THETA, &inst, &spec, &grid, &clean).unwrap() < 1e-20);
        let shifted = empirical_risk(&[-0.9, -2.5], &inst, &spec, &grid, &clean).unwrap();
        assert!(shifted > 0.0);

        let noisy = generate_observations(&inst, 7, 15, NoiseModel::Uniform { half_width: 0.25 }).unwrap();
        let risk = empirical_risk(&TRUE_THETA, &inst, &spec, &grid, &noisy).unwrap();
        let direct: f64 = noisy.points.iter().map(|y| f.loss(y)).sum::<f64>() / 15.0;
        assert!((risk - direct).abs() < 1e-15);
        assert!(risk > 0.0);

        let single = noisy.with_points(vec![noisy.points[3].clone()]).unwrap();
        let r1 = empirical_risk(&TRUE_THETA, &inst, &spec, &grid, &single).unwrap();
        assert_eq!(r1, f.loss(&noisy.points[3]));

        let empty = ObservationSet { points: vec![], ..noisy };
        assert!(matches!(empirical_risk(&TRUE_THETA, &inst, &spec, &grid, &empty), Err(Error::NoObservations)));
    }

    #[test]
    fn prediction_error_on_dense_clean_validation() {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        let val = generate_observations(&inst, 3, 300, NoiseModel::Uniform { half_width: 0.0 }).unwrap();
        // Validation weights fall between grid weights, so the error shrinks
        // like the squared grid spacing.
        let mut prev = f64::INFINITY;
        let mut err = 0.0;
        for k in [11, 101, 1001] {
            let grid = sample_weight_grid(2, k, false).unwrap();
            err = prediction_error(&TRUE_THETA, &inst, &spec, &grid, &val).unwrap();
            assert!(err < prev / 50.0, "K={k}: {err}");
            prev = err;
        }
        assert!(err <= 1e-6, "{err}");
        let grid = sample_weight_grid(2, 1001, false).unwrap();
        let far = prediction_error(&[-6.0, -6.0], &inst, &spec, &grid, &val).unwrap();
        assert!(far > err);
    }

    #[test]
    fn mean_loss_is_chunk_stable() {
        let (f, _) = synthetic_frontier(6);
        let pts: Vec<Vec<f64>> = (0..5000).map(|i| vec![(i % 37) as f64 * 0.1, (i % 11) as f64 * 0.3]).collect();
        let seq: f64 = pts.chunks(PAR_CHUNK).map(|c| c.iter().map(|y| f.loss(y)).sum::<f64>()).sum::<f64>() / 5000.0;
        assert_eq!(f.mean_loss(&pts), seq);
    }

    #[test]
    fn constants_for_synthetic() {
        let inst = build_synthetic_instance();
        let spec = synthetic_theta_spec();
        let obs = generate_observations(&inst, 1, 15, NoiseModel::Uniform { half_width: 0.25 }).unwrap();
        let cfg = WroConfig { epsilon: 0.01, m: 1, ..Default::default() };
        let c = compute_constants(&inst, &spec, &obs, &cfg, true).unwrap();
        let s2 = 2f64.sqrt();
        assert!((c.b - 3.0 * s2).abs() < 1e-9);
        assert!((c.r - 3.25 * s2).abs() < 1e-12);
        assert!((c.kappa - 6.5 * s2).abs() < 1e-12);
        assert_eq!(c.lambda, 1.0);
        assert!((c.v2 - 78.125).abs() < 1e-8);
        assert!((c.g.unwrap() - (1.0 + 6.5 * s2 + 325.0)).abs() < 1e-7);
        let d = 6.0 * s2;
        let r0 = (d * d + 15.0 * (2.0 * 78.125f64).powi(2) + (78.125f64 / 0.01).powi(2)).sqrt();
        assert!((c.r0.unwrap() - r0).abs() / r0 < 1e-9);
        let h = 96.0 * (3.0 * d * s2 / (6.5 * s2) + 6.5 * s2) * 6.25 * s2;
        assert!((c.h - h).abs() / h < 1e-9);

        let mut prev = f64::INFINITY;
        for eps in [0.01, 0.1, 1.0, 10.0, 1e6] {
            let cfg = WroConfig { epsilon: eps, ..Default::default() };
            let r0 = compute_constants(&inst, &spec, &obs, &cfg, true).unwrap().r0.unwrap();
            assert!(r0 < prev);
            prev = r0;
        }
        let cfg0 = WroConfig { epsilon: 0.0, ..Default::default() };
        assert!(compute_constants(&inst, &spec, &obs, &cfg0, true).unwrap().r0.is_none());

        let mut buf = Vec::new();
        write_constants_csv(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,value\n"));
        assert!(text.contains("V2,78.125000000000"));
    }

    #[test]
    fn constants_without_strong_convexity() {
        let inst = crate::model::build_portfolio_instance();
        let spec = crate::model::portfolio_theta_spec(4, 0.3);
        let obs = ObservationSet::new(vec![vec![0.125; 8]], vec![0.0; 8], vec![1.0; 8]).unwrap();
        let cfg = WroConfig::default();
        assert!(matches!(
            compute_constants(&inst, &spec, &obs, &cfg, true),
            Err(Error::NotStronglyConvex { .. })
        ));
        let c = compute_constants(&inst, &spec, &obs, &cfg, false).unwrap();
        assert!(c.g.is_none() && c.lipschitz_theta.is_none());
        assert!(!c.notes.is_empty());
        assert!(c.rows().iter().all(|(_, v)| v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_bounded_and_lipschitz_in_y(
            t in prop::array::uniform2(-6.0f64..=0.0),
            y1 in prop::array::uniform2(-0.25f64..=3.25),
            y2 in prop::array::uniform2(-0.25f64..=3.25),
        ) {
            let inst = build_synthetic_instance();
            let spec = synthetic_theta_spec();
            let grid = sample_weight_grid(2, 6, false).unwrap();
            let f = Frontier::solve(&inst, &spec, &grid, &t).unwrap();
            let (b, r) = (inst.norm_bound(), 3.25 * 2f64.sqrt());
            let (l1, l2) = (f.loss(&y1), f.loss(&y2));
            prop_assert!(l1 >= 0.0 && l1 <= (b + r).powi(2) + 1e-9);
            prop_assert!((l1 - l2).abs() <= 2.0 * (b + r) * linalg::dist(&y1, &y2) + 1e-9);
        }

        #[test]
        fn loss_lipschitz_in_theta(
            t1 in prop::array::uniform2(-6.0f64..=0.0),
            t2 in prop::array::uniform2(-6.0f64..=0.0),
            y in prop::array::uniform2(-0.25f64..=3.25),
        ) {
            let inst = build_synthetic_instance();
            let spec = synthetic_theta_spec();
            let grid = sample_weight_grid(2, 6, false).unwrap();
            let f1 = Frontier::solve(&inst, &spec, &grid, &t1).unwrap();
            let f2 = Frontier::solve(&inst, &spec, &grid, &t2).unwrap();
            let (b, r) = (inst.norm_bound(), 3.25 * 2f64.sqrt());
            let lip = 4.0 * (b + r) * 2.0 * r / inst.lambda();
            prop_assert!((f1.loss(&y) - f2.loss(&y)).abs() <= lip * linalg::dist(&t1, &t2) + 1e-9);
        }

        #[test]
        fn objective_difference_is_kappa_lipschitz(
            t1 in prop::array::uniform2(-6.0f64..=0.0),
            t2 in prop::array::uniform2(-6.0f64..=0.0),
            x in prop::array::uniform2(-0.25f64..=3.25),
            y in prop::array::uniform2(-0.25f64..=3.25),
            a in 0.0f64..=1.0,
        ) {
            let inst = build_synthetic_instance();
            let spec = synthetic_theta_spec();
            let w = [a, 1.0 - a];
            let hx = objective_difference(&inst, &spec, &w, &t1, &t2, &x).unwrap();
            let hy = objective_difference(&inst, &spec, &w, &t1, &t2, &y).unwrap();
            let kappa = 2.0 * 3.25 * 2f64.sqrt();
            prop_assert!((hx - hy).abs() <= kappa * linalg::dist(&t1, &t2) * linalg::dist(&x, &y) + 1e-9);
        }
    }
}
