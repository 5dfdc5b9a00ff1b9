//! Experiment drivers, run configuration and report files.
//!
//! A run writes into its output directory:
//! `report.json`, `error_vs_n.csv`, `convergence_<run>.csv` (one per
//! repetition), `frontier_{true,erm,wro}.csv` and `constants.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::erm::{emit_kkt_formulation, fit_erm};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{compute_constants, empirical_risk, prediction_error, write_constants_csv, ConstantsBundle};
use crate::model::{
    apply_theta, build_portfolio_instance, build_synthetic_instance, portfolio_theta_spec, synthetic_theta_spec,
    MqpInstance, ObservationSet, ThetaSpec, WroConfig,
};
use crate::pareto::{generate_observations, sample_weight_grid, NoiseModel, WeightGrid};
use crate::qp::{solve_frontier, QpOptions};
use crate::wro::{select_radius, write_convergence_csv, RadiusRow, Termination};

/// The radius sweep used by both experiments.
pub const DEFAULT_RADII: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
/// Validation seeds are the data seed XOR this mask.
const VALIDATION_SEED_MASK: u64 = 0x5a11_da7e_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    #[default]
    Synthetic,
    Portfolio,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "portfolio" => Ok(Self::Portfolio),
            other => Err(Error::UnknownInstance(other.to_string())),
        }
    }
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Portfolio => "portfolio",
        }
    }
}

/// Settings of one `run` invocation. Fields left as `None` take the
/// experiment's defaults in [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub experiment: Experiment,
    /// Training sample sizes.
    pub n_list: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
    pub radii: Vec<f64>,
    pub out: PathBuf,
    /// Base seed; repetition `r` uses data seed `seed + r`.
    pub seed: u64,
    pub validation_size: usize,
    pub noise: Option<NoiseModel>,
    /// Points of the exported frontier tables.
    pub frontier_points: usize,
    /// Portfolio: number of leading expected returns to learn.
    pub learnable: usize,
    /// Portfolio: upper end of the return box.
    pub return_upper: f64,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
    pub wro: WroConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Synthetic,
            n_list: None,
            repetitions: None,
            radii: DEFAULT_RADII.to_vec(),
            out: PathBuf::from("out"),
            seed: 0,
            validation_size: 10_000,
            noise: None,
            frontier_points: 50,
            learnable: 4,
            return_upper: 0.3,
            jobs: None,
            wro: WroConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn for_experiment(experiment: Experiment) -> Self {
        Self { experiment, ..Self::default() }.resolved()
    }

    /// Reads a JSON file, or TOML when the extension is `.toml`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    /// Fills unset fields with the experiment defaults.
    pub fn resolved(mut self) -> Self {
        let (n_list, reps, noise) = match self.experiment {
            Experiment::Synthetic => (vec![10, 15, 20], 10, NoiseModel::Uniform { half_width: 0.25 }),
            Experiment::Portfolio => (vec![20], 1, NoiseModel::Rounding { places: 3 }),
        };
        self.n_list.get_or_insert(n_list);
        self.repetitions.get_or_insert(reps);
        self.noise.get_or_insert(noise);
        self
    }

    pub fn n_list(&self) -> &[usize] {
        self.n_list.as_deref().unwrap_or(&[])
    }

    pub fn repetitions(&self) -> usize {
        self.repetitions.unwrap_or(0)
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise.unwrap_or(NoiseModel::Uniform { half_width: 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.wro.validate()?;
        self.noise().validate()?;
        if self.n_list().is_empty() || self.n_list().contains(&0) {
            return bad(format!("N list must be nonempty and positive, got {:?}", self.n_list()));
        }
        if self.repetitions() == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.radii.is_empty() || self.radii.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad(format!("radii must be a nonempty list of finite values >= 0, got {:?}", self.radii));
        }
        if self.validation_size == 0 {
            return bad("validation size must be >= 1".into());
        }
        if self.frontier_points < 2 {
            return bad("frontier tables need at least 2 points".into());
        }
        if self.jobs == Some(0) {
            return bad("jobs must be >= 1".into());
        }
        if self.experiment == Experiment::Portfolio {
            let n = build_portfolio_instance().n();
            if self.learnable > n {
                return bad(format!("at most {n} returns can be learned, got {}", self.learnable));
            }
            if !(self.return_upper > 0.0) {
                return bad("return upper bound must be positive".into());
            }
        }
        Ok(())
    }
}

/// One training set, fitted by both estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    /// `n<N>_rep<r>`, also the suffix of the convergence file.
    pub run: String,
    pub n: usize,
    pub repetition: usize,
    pub seed: u64,
    pub theta_erm: Vec<f64>,
    pub theta_wro: Vec<f64>,
    pub chosen_epsilon: f64,
    pub error_erm: f64,
    pub error_wro: f64,
    pub objective_erm: f64,
    pub objective_wro: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Mean squared distance, paired by weight, between the objective
    /// vectors of the fitted and the true frontier at the frontier-table
    /// weights. Each frontier is valued under its own parameters, so for the
    /// portfolio this compares (return, risk) curves.
    pub frontier_msd_erm: f64,
    pub frontier_msd_wro: f64,
    /// The same comparison between the decisions themselves.
    pub decision_msd_erm: f64,
    pub decision_msd_wro: f64,
    pub radius_table: Vec<RadiusRow>,
    /// Iterations of the chosen-radius fit.
    pub history: Vec<crate::wro::IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n: usize,
    pub method: String,
    pub mean_error: f64,
    /// Sample standard deviation (0 for a single repetition).
    pub std_error: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub n: usize,
    /// Repetitions where the robust estimator has strictly lower error.
    pub wro_wins: usize,
    pub ties: usize,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub experiment: String,
    pub config: RunConfig,
    pub true_theta: Vec<f64>,
    pub records: Vec<RepetitionRecord>,
    pub aggregates: Vec<AggregateRow>,
    pub paired: Vec<PairedSummary>,
    /// Constants for the first record's training set at its chosen radius.
    pub constants: ConstantsBundle,
    /// The trivial iteration bound for the same setting, when defined.
    pub iteration_bound: Option<f64>,
    pub notes: Vec<String>,
}

/// Mean and standard deviation of each method's error per `N`, in `n_list` order.
pub fn aggregate(records: &[RepetitionRecord], n_list: &[usize]) -> (Vec<AggregateRow>, Vec<PairedSummary>) {
    let mut rows = Vec::new();
    let mut paired = Vec::new();
    for &n in n_list {
        let recs: Vec<&RepetitionRecord> = records.iter().filter(|r| r.n == n).collect();
        if recs.is_empty() {
            continue;
        }
        for method in ["erm", "wro"] {
            let errs: Vec<f64> =
                recs.iter().map(|r| if method == "erm" { r.error_erm } else { r.error_wro }).collect();
            let (mean, std) = mean_std(&errs);
            rows.push(AggregateRow { n, method: method.into(), mean_error: mean, std_error: std, repetitions: errs.len() });
        }
        paired.push(PairedSummary {
            n,
            wro_wins: recs.iter().filter(|r| r.error_wro < r.error_erm).count(),
            ties: recs.iter().filter(|r| r.error_wro == r.error_erm).count(),
            repetitions: recs.len(),
        });
    }
    (rows, paired)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The learning problem of an experiment: instance with true parameters,
/// the learnable layout and the surrogate-loss grid.
pub struct Problem {
    pub instance: MqpInstance,
    pub spec: ThetaSpec,
    pub grid: WeightGrid,
    pub true_theta: Vec<f64>,
}

pub fn problem(config: &RunConfig) -> Result<Problem> {
    let (instance, spec) = match config.experiment {
        Experiment::Synthetic => (build_synthetic_instance(), synthetic_theta_spec()),
        Experiment::Portfolio => {
            (build_portfolio_instance(), portfolio_theta_spec(config.learnable, config.return_upper))
        }
    };
    let grid = sample_weight_grid(instance.p(), config.wro.k, !instance.strongly_convex())?;
    let true_theta = spec.current_values(&instance);
    Ok(Problem { instance, spec, grid, true_theta })
}

/// Fits both estimators on one training set.
pub fn run_repetition(problem: &Problem, config: &RunConfig, n: usize, repetition: usize) -> Result<RepetitionRecord> {
    let Problem { instance, spec, grid, true_theta } = problem;
    let seed = config.seed.wrapping_add(repetition as u64);
    let noise = config.noise();
    let obs = generate_observations(instance, seed, n, noise)?;
    let validation = generate_observations(instance, seed ^ VALIDATION_SEED_MASK, config.validation_size, noise)?;
    let wro_cfg = WroConfig { seed, ..config.wro.clone() };
    let run = format!("n{n}_rep{repetition}");

    let (erm, sel) = if spec.n_theta() == 0 {
        (None, None)
    } else {
        let erm = fit_erm(instance, spec, grid, &obs, &wro_cfg)?;
        let sel = select_radius(instance, spec, grid, &obs, &config.radii, &validation, &wro_cfg)?;
        (Some(erm), Some(sel))
    };
    let theta_erm = erm.as_ref().map_or_else(Vec::new, |e| e.theta_hat.clone());
    let error_erm = prediction_error(&theta_erm, instance, spec, grid, &validation)?;
    let truth = frontier_points(instance, spec, true_theta, config.frontier_points)?;
    let msd = |theta: &[f64]| -> Result<(f64, f64)> {
        let fitted = frontier_points(instance, spec, theta, config.frontier_points)?;
        let mean = |pick: fn(&FrontierPoint) -> &[f64]| {
            fitted.iter().zip(&truth).map(|(a, b)| linalg::dist2(pick(a), pick(b))).sum::<f64>() / truth.len() as f64
        };
        Ok((mean(|p| &p.f), mean(|p| &p.x)))
    };
    let (frontier_msd_erm, decision_msd_erm) = msd(&theta_erm)?;

    let record = match sel {
        None => RepetitionRecord {
            run,
            n,
            repetition,
            seed,
            theta_wro: vec![],
            chosen_epsilon: 0.0,
            error_wro: error_erm,
            objective_erm: empirical_risk(&theta_erm, instance, spec, grid, &obs)?,
            objective_wro: 0.0,
            iterations: 0,
            converged: true,
            termination: Termination::Converged,
            frontier_msd_wro: frontier_msd_erm,
            decision_msd_wro: decision_msd_erm,
            theta_erm,
            error_erm,
            frontier_msd_erm,
            decision_msd_erm,
            radius_table: vec![],
            history: vec![],
        },
        Some(sel) => {
            let best = sel.best();
            let (frontier_msd_wro, decision_msd_wro) = msd(&best.theta_hat)?;
            RepetitionRecord {
                run,
                n,
                repetition,
                seed,
                theta_wro: best.theta_hat.clone(),
                chosen_epsilon: sel.best_epsilon,
                error_wro: sel.table[sel.best_index].prediction_error,
                objective_erm: erm.as_ref().map_or(0.0, |e| e.objective),
                objective_wro: best.objective,
                iterations: best.iterations,
                converged: best.converged,
                termination: best.termination,
                frontier_msd_wro,
                decision_msd_wro,
                theta_erm,
                error_erm,
                frontier_msd_erm,
                decision_msd_erm,
                radius_table: sel.table.clone(),
                history: best.state.history.clone(),
            }
        }
    };
    Ok(record)
}

/// A frontier decision with its objective values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub w: Vec<f64>,
    pub f: Vec<f64>,
    pub x: Vec<f64>,
}

/// Frontier at `count` evenly spaced weights for the instance at `theta`,
/// with objective values taken under the same instance.
pub fn frontier_points(instance: &MqpInstance, spec: &ThetaSpec, theta: &[f64], count: usize) -> Result<Vec<FrontierPoint>> {
    let grid = sample_weight_grid(instance.p(), count, !instance.strongly_convex())?;
    let inst = apply_theta(instance, spec, theta)?;
    let sols = solve_frontier(&inst, &grid.weights, &QpOptions::default())?;
    Ok(grid
        .weights
        .iter()
        .zip(sols)
        .map(|(w, s)| FrontierPoint { w: w.as_slice().to_vec(), f: inst.objective_values(&s.x), x: s.x })
        .collect())
}

/// Runs every `(N, repetition)` pair of the configured experiment and writes
/// the report files.
pub fn run_experiment(config: &RunConfig) -> Result<EstimatorReport> {
    let config = config.clone().resolved();
    config.validate()?;
    let problem = problem(&config)?;
    let pairs: Vec<(usize, usize)> = config
        .n_list()
        .iter()
        .flat_map(|&n| (0..config.repetitions()).map(move |r| (n, r)))
        .collect();
    let work = || -> Result<Vec<RepetitionRecord>> {
        pairs.par_iter().map(|&(n, r)| run_repetition(&problem, &config, n, r)).collect()
    };
    let records = match config.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let (aggregates, paired) = aggregate(&records, config.n_list());
    let first = &records[0];
    let obs = generate_observations(&problem.instance, first.seed, first.n, config.noise())?;
    let const_cfg = WroConfig { epsilon: first.chosen_epsilon, ..config.wro.clone() };
    let constants = compute_constants(&problem.instance, &problem.spec, &obs, &const_cfg, false)?;
    let iteration_bound = constants.iteration_bound(config.wro.delta, problem.spec.n_theta(), first.n);
    let mut notes = constants.notes.clone();
    if problem.spec.n_theta() == 0 {
        notes.push("no learnable parameters: both estimators return the true instance".into());
    }
    for r in &records {
        if !r.converged {
            notes.push(format!("{}: cutting-plane loop stopped by {:?}", r.run, r.termination));
        }
    }
    let report = EstimatorReport {
        experiment: config.experiment.name().into(),
        true_theta: problem.true_theta.clone(),
        config,
        records,
        aggregates,
        paired,
        constants,
        iteration_bound,
        notes,
    };
    write_report(&report, &problem)?;
    Ok(report)
}

pub fn cmd_run_synthetic(config: &RunConfig) -> Result<EstimatorReport> {
    run_experiment(&RunConfig { experiment: Experiment::Synthetic, ..config.clone() })
}

pub fn cmd_run_portfolio(config: &RunConfig) -> Result<EstimatorReport> {
    run_experiment(&RunConfig { experiment: Experiment::Portfolio, ..config.clone() })
}

/// Renders a CSV cell, refusing values that are not finite.
fn cell(value: f64, what: &str) -> Result<String> {
    if value.is_finite() {
        Ok(format!("{value:.12}"))
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_report(report: &EstimatorReport, problem: &Problem) -> Result<()> {
    let dir = &report.config.out;
    fs::create_dir_all(dir)?;

    let mut json = create(dir, "report.json")?;
    serde_json::to_writer_pretty(&mut json, report)?;
    writeln!(json)?;
    json.flush()?;

    let mut wtr = csv::Writer::from_writer(create(dir, "error_vs_n.csv")?);
    wtr.write_record(["n", "method", "mean_error", "std_error", "repetitions"])?;
    for row in &report.aggregates {
        wtr.write_record([
            row.n.to_string(),
            row.method.clone(),
            cell(row.mean_error, "mean error")?,
            cell(row.std_error, "error std")?,
            row.repetitions.to_string(),
        ])?;
    }
    wtr.flush()?;

    for r in &report.records {
        for h in &r.history {
            cell(h.max_cv, "max CV")?;
            cell(h.master_objective, "master objective")?;
        }
        write_convergence_csv(&r.history, create(dir, &format!("convergence_{}.csv", r.run))?)?;
    }

    let first = &report.records[0];
    let count = report.config.frontier_points;
    for (name, theta) in [("true", &problem.true_theta), ("erm", &first.theta_erm), ("wro", &first.theta_wro)] {
        let theta = if theta.len() == problem.spec.n_theta() { theta.as_slice() } else { &problem.true_theta };
        write_frontier_csv(&problem.instance, &problem.spec, theta, count, create(dir, &format!("frontier_{name}.csv"))?)?;
    }

    for (_, v) in report.constants.rows() {
        cell(v, "constant")?;
    }
    write_constants_csv(&report.constants, create(dir, "constants.csv")?)?;
    Ok(())
}

/// `w*, f*, x*` columns of [`frontier_points`].
pub fn write_frontier_csv<W: Write>(
    instance: &MqpInstance,
    spec: &ThetaSpec,
    theta: &[f64],
    count: usize,
    out: W,
) -> Result<()> {
    let points = frontier_points(instance, spec, theta, count)?;
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..instance.p()).map(|l| format!("w{l}")).collect();
    header.extend((0..instance.p()).map(|l| format!("f{l}")));
    header.extend((0..instance.n()).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for p in &points {
        let mut row = Vec::with_capacity(header.len());
        for v in p.w.iter().chain(&p.f).chain(&p.x) {
            row.push(cell(*v, "frontier value")?);
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Format of the exported KKT formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "text" | "txt" => Ok(Self::Text),
            other => Err(Error::InvalidConfig(format!("unknown export format `{other}`"))),
        }
    }
}

/// Writes `<name>_instance.json`, `<name>_kkt.{json,txt}` and
/// `<name>_constants.csv` into `out`, and returns the paths written.
///
/// The formulation and constants use a training set drawn with the
/// experiment's default configuration and `seed`.
pub fn cmd_export(name: &str, format: ExportFormat, out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let experiment: Experiment = name.parse()?;
    let config = RunConfig { seed, ..RunConfig::for_experiment(experiment) };
    let problem = problem(&config)?;
    let n = config.n_list()[0];
    let obs: ObservationSet = generate_observations(&problem.instance, seed, n, config.noise())?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let path = out.join(format!("{name}_instance.json"));
    let doc = problem.instance.to_document(Some(&problem.spec));
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    written.push(path);

    let kkt = emit_kkt_formulation(&problem.instance, &problem.spec, &problem.grid, &obs);
    let path = match format {
        ExportFormat::Json => {
            let path = out.join(format!("{name}_kkt.json"));
            fs::write(&path, kkt.to_json()? + "\n")?;
            path
        }
        ExportFormat::Text => {
            let path = out.join(format!("{name}_kkt.txt"));
            fs::write(&path, kkt.to_text())?;
            path
        }
    };
    written.push(path);

    let path = out.join(format!("{name}_constants.csv"));
    let bundle = compute_constants(&problem.instance, &problem.spec, &obs, &config.wro, false)?;
    write_constants_csv(&bundle, BufWriter::new(File::create(&path)?))?;
    written.push(path);
    Ok(written)
}
