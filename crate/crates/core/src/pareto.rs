//! Weight grids, synthetic observations and frontier tables.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MqpInstance, ObservationSet};
use crate::qp::{solve_frontier, solve_wp, QpOptions, QpSolution, WeightVector};

/// Components of interior weights are at least this large.
pub const INTERIOR_MARGIN: f64 = 1e-3;

/// Seed of the stratified sampler used for `p > 2` grids.
const GRID_SEED: u64 = 0x5eed_9a1d;

/// The sampled weights `{w_k}` of the surrogate loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub weights: Vec<WeightVector>,
    pub interior_only: bool,
}

impl WeightGrid {
    pub fn new(weights: Vec<WeightVector>, interior_only: bool) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::BadGridSize(0));
        }
        let p = weights[0].len();
        if weights.iter().any(|w| w.len() != p) {
            return Err(Error::InvalidWeight("weights of mixed length".into()));
        }
        if interior_only && weights.iter().any(|w| w.min_component() < 1e-6) {
            return Err(Error::InvalidWeight("interior grid has a component below 1e-6".into()));
        }
        Ok(Self { weights, interior_only })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Raises components below `margin` to `margin`, taking the deficit from the
/// largest component. Sum stays 1.
pub fn pull_interior(w: &[f64], margin: f64) -> Vec<f64> {
    let mut out = w.to_vec();
    let mut deficit = 0.0;
    for v in out.iter_mut() {
        if *v < margin {
            deficit += margin - *v;
            *v = margin;
        }
    }
    if deficit > 0.0 {
        let (imax, _) = out
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        out[imax] -= deficit;
    }
    out
}

fn normalized(mut w: Vec<f64>) -> Result<WeightVector> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    // Absorb rounding in the last component.
    let rest: f64 = w[..w.len() - 1].iter().sum();
    let last = w.len() - 1;
    w[last] = (1.0 - rest).max(0.0);
    WeightVector::new(w)
}

/// `K` weights on the `(p-1)`-simplex: an equispaced grid for `p = 2`,
/// stratified uniform (Dirichlet(1,..,1)) samples for `p > 2`.
pub fn sample_weight_grid(p: usize, k: usize, interior_only: bool) -> Result<WeightGrid> {
    if p < 2 {
        return Err(Error::BadArity(p));
    }
    if k < 2 {
        return Err(Error::BadGridSize(k));
    }
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(k);
    if p == 2 {
        for i in 0..k {
            let a = i as f64 / (k - 1) as f64;
            raw.push(vec![a, 1.0 - a]);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(GRID_SEED);
        for i in 0..k {
            let mut cuts: Vec<f64> = (0..p - 1).map(|_| rng.gen::<f64>()).collect();
            cuts[0] = (i as f64 + rng.gen::<f64>()) / k as f64;
            cuts.sort_by(f64::total_cmp);
            let mut w = Vec::with_capacity(p);
            let mut prev = 0.0;
            for c in cuts {
                w.push(c - prev);
                prev = c;
            }
            w.push(1.0 - prev);
            raw.push(w);
        }
    }
    let weights = raw
        .into_iter()
        .map(|w| {
            let w = if interior_only { pull_interior(&w, INTERIOR_MARGIN) } else { w };
            normalized(w)
        })
        .collect::<Result<Vec<_>>>()?;
    WeightGrid::new(weights, interior_only)
}

/// Uniform random weight on the simplex.
pub fn random_simplex_weight<R: Rng>(rng: &mut R, p: usize) -> Vec<f64> {
    if p == 2 {
        let a: f64 = rng.gen();
        return vec![a, 1.0 - a];
    }
    let e: Vec<f64> = (0..p).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Measurement noise added to frontier decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// i.i.d. `U[-half_width, half_width]` per coordinate (`0` means noiseless).
    Uniform { half_width: f64 },
    /// Round each coordinate to `places` decimals.
    Rounding { places: u32 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Uniform { half_width } if !(half_width >= 0.0) || !half_width.is_finite() => {
                Err(Error::InvalidConfig(format!("noise half width must be >= 0, got {half_width}")))
            }
            NoiseModel::Rounding { places } if places < 1 => Err(Error::InvalidConfig("rounding needs >= 1 place".into())),
            _ => Ok(()),
        }
    }

    /// The support box of noisy decisions drawn around a region with the given bounds.
    pub fn support(&self, lower: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match *self {
            NoiseModel::Uniform { half_width } => (
                lower.iter().map(|l| l - half_width).collect(),
                upper.iter().map(|u| u + half_width).collect(),
            ),
            NoiseModel::Rounding { places } => {
                let s = 10f64.powi(places as i32);
                // LP bounds carry round-off; snap them to the rounding grid first.
                let snap = |v: f64| if (v - v.round()).abs() < 1e-6 { v.round() } else { v };
                (
                    lower.iter().map(|l| snap(l * s).floor() / s).collect(),
                    upper.iter().map(|u| snap(u * s).ceil() / s).collect(),
                )
            }
        }
    }

    fn apply<R: Rng>(&self, rng: &mut R, x: &[f64]) -> Vec<f64> {
        match *self {
            NoiseModel::Uniform { half_width } if half_width > 0.0 => {
                x.iter().map(|v| v + rng.gen_range(-half_width..=half_width)).collect()
            }
            NoiseModel::Uniform { .. } => x.to_vec(),
            NoiseModel::Rounding { places } => {
                let s = 10f64.powi(places as i32);
                x.iter().map(|v| (v * s).round() / s).collect()
            }
        }
    }
}

/// Observations with the weights and noiseless decisions that produced them.
#[derive(Debug, Clone)]
pub struct GeneratedObservations {
    pub set: ObservationSet,
    pub weights: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
}

/// `N` noisy Pareto-optimal decisions of `instance` at uniformly random weights.
///
/// When the instance is not strongly convex the weights are pulled into the
/// interior so every weighting problem has a unique solution.
pub fn generate_observations(instance: &MqpInstance, seed: u64, n_obs: usize, noise: NoiseModel) -> Result<ObservationSet> {
    Ok(generate_observations_detailed(instance, seed, n_obs, noise)?.set)
}

pub fn generate_observations_detailed(
    instance: &MqpInstance,
    seed: u64,
    n_obs: usize,
    noise: NoiseModel,
) -> Result<GeneratedObservations> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = QpOptions::default();
    let mut weights = Vec::with_capacity(n_obs);
    let mut clean = Vec::with_capacity(n_obs);
    let mut points = Vec::with_capacity(n_obs);
    let mut warm: Option<QpSolution> = None;
    for _ in 0..n_obs {
        let mut w = random_simplex_weight(&mut rng, instance.p());
        if !instance.strongly_convex() {
            w = pull_interior(&w, INTERIOR_MARGIN);
        }
        let wv = normalized(w)?;
        let sol = crate::qp::solve_wp_warm(instance, &wv, &opts, warm.as_ref())?;
        points.push(noise.apply(&mut rng, &sol.x));
        clean.push(sol.x.clone());
        weights.push(wv.as_slice().to_vec());
        warm = Some(sol);
    }
    let region = instance.region();
    let (lo, hi) = noise.support(&region.lower, &region.upper);
    let set = ObservationSet::new(points, lo, hi)?;
    Ok(GeneratedObservations { set, weights, clean })
}

/// Frontier decisions at `count` evenly spaced weights (pulled into the
/// interior for instances that are not strongly convex).
pub fn frontier_table(instance: &MqpInstance, count: usize) -> Result<Vec<(WeightVector, QpSolution)>> {
    let grid = sample_weight_grid(instance.p(), count, !instance.strongly_convex())?;
    let sols = solve_frontier(instance, &grid.weights, &QpOptions::default())?;
    Ok(grid.weights.into_iter().zip(sols).collect())
}

/// Solves the frontier of `grid` on an instance with parameters applied.
pub fn solve_grid(instance: &MqpInstance, grid: &WeightGrid, opts: &QpOptions) -> Result<Vec<QpSolution>> {
    solve_frontier(instance, &grid.weights, opts)
}

/// Single weighting-problem solve, exposed for callers that hold raw weights.
pub fn solve_at(instance: &MqpInstance, w: &[f64]) -> Result<QpSolution> {
    solve_wp(instance, &WeightVector::new(w.to_vec())?, &QpOptions::default())
}

/// Writes one row per observation with header `y0,..,y{n-1}`.
pub fn write_observations_csv<W: Write>(set: &ObservationSet, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record((0..set.dim()).map(|j| format!("y{j}")))?;
    for y in &set.points {
        wtr.write_record(y.iter().map(|v| format!("{v:.12}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads points written by [`write_observations_csv`].
pub fn read_observation_points_csv<R: Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidConfig(format!("bad CSV value `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        points.push(row);
    }
    Ok(points)
}
