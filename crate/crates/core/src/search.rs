//! Multi-start compass (pattern) search over a box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Initial stencil radius as a fraction of each box width.
    pub initial_step: f64,
    /// The search stops once the stencil radius drops below this fraction.
    pub min_step: f64,
    pub max_evaluations: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { initial_step: 0.25, min_step: 1e-4, max_evaluations: 400 }
    }
}

/// An accepted iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub theta: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: Vec<TracePoint>,
    pub evaluations: usize,
    /// Last stencil radius (box-scaled) at which no neighbour improved.
    pub final_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Accepted iterates of the winning start.
    pub trace: Vec<TracePoint>,
    pub best_start: usize,
    pub starts_used: usize,
    pub evaluations: usize,
}

/// `count` starting points: the box centre, then one point per stratum of a
/// seeded Latin hypercube over the box.
pub fn stratified_starts(lower: &[f64], upper: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = lower.len();
    let mut starts = Vec::with_capacity(count);
    if count == 0 {
        return starts;
    }
    starts.push(lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect());
    let rest = count - 1;
    if rest == 0 {
        return starts;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut p: Vec<usize> = (0..rest).collect();
        for i in (1..rest).rev() {
            let j = rng.gen_range(0..=i);
            p.swap(i, j);
        }
        perms.push(p);
    }
    for s in 0..rest {
        let point = (0..d)
            .map(|j| {
                let u = (perms[j][s] as f64 + rng.gen::<f64>()) / rest as f64;
                lower[j] + u * (upper[j] - lower[j])
            })
            .collect();
        starts.push(point);
    }
    starts
}

/// Full sign-pattern stencils are used up to this many free coordinates.
const FULL_STENCIL_DIM: usize = 3;

/// Poll directions over the free coordinates: every nonzero `{-1,0,1}`
/// pattern for small dimensions, otherwise the coordinate directions plus
/// `±(1,..,1)`. Diagonals let the search cross ridges of max-type objectives.
fn stencil(free: &[usize], d: usize) -> Vec<Vec<f64>> {
    let m = free.len();
    let mut dirs = Vec::new();
    if m <= FULL_STENCIL_DIM {
        let total = 3usize.pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let mut dir = vec![0.0; d];
            for &j in free {
                dir[j] = (c % 3) as f64 - 1.0;
                c /= 3;
            }
            if dir.iter().any(|v| *v != 0.0) {
                dirs.push(dir);
            }
        }
        // Coordinate directions first so they win ties.
        dirs.sort_by_key(|dir| dir.iter().filter(|v| **v != 0.0).count());
    } else {
        for &j in free {
            for s in [-1.0, 1.0] {
                let mut dir = vec![0.0; d];
                dir[j] = s;
                dirs.push(dir);
            }
        }
        for s in [-1.0, 1.0] {
            let mut dir = vec![0.0; d];
            for &j in free {
                dir[j] = s;
            }
            dirs.push(dir);
        }
    }
    dirs
}

/// Pattern search from one start. Polls `step·width_j·dir_j` along every
/// stencil direction, moves to the best strictly improving neighbour, and
/// halves the step after a failed poll.
pub fn compass_search<F>(lower: &[f64], upper: &[f64], start: &[f64], opts: &SearchOptions, f: &F) -> Result<SearchRun>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let d = lower.len();
    let free: Vec<usize> = (0..d).filter(|&j| upper[j] > lower[j]).collect();
    let dirs = stencil(&free, d);
    let mut x: Vec<f64> = start.iter().zip(lower.iter().zip(upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect();
    let mut value = f(&x)?;
    let mut evaluations = 1;
    let mut trace = vec![TracePoint { theta: x.clone(), value }];
    let mut step = opts.initial_step;
    let mut final_step = step;

    'outer: while step >= opts.min_step && !free.is_empty() {
        let mut best: Option<(Vec<f64>, f64)> = None;
        for dir in &dirs {
            let cand: Vec<f64> = (0..d)
                .map(|j| (x[j] + dir[j] * step * (upper[j] - lower[j])).clamp(lower[j], upper[j]))
                .collect();
            if cand == x {
                continue;
            }
            if evaluations >= opts.max_evaluations {
                break 'outer;
            }
            let v = f(&cand)?;
            evaluations += 1;
            let better = match &best {
                Some((_, bv)) => v < *bv,
                None => v < value,
            };
            if better {
                best = Some((cand, v));
            }
        }
        match best {
            Some((cand, v)) => {
                x = cand;
                value = v;
                trace.push(TracePoint { theta: x.clone(), value });
            }
            None => {
                final_step = step;
                step *= 0.5;
            }
        }
    }
    Ok(SearchRun { x, value, trace, evaluations, final_step })
}

/// Runs [`compass_search`] from every start (concurrently) and keeps the best
/// value, breaking ties by the lowest start index.
pub fn multi_start_search<F>(lower: &[f64], upper: &[f64], starts: &[Vec<f64>], opts: &SearchOptions, f: &F) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let steps = vec![opts.initial_step; starts.len()];
    multi_start_search_with_steps(lower, upper, starts, &steps, opts, f)
}

/// Like [`multi_start_search`], with a separate initial step per start.
/// Starts already close to a minimizer should use a small step so the first
/// poll does not leave their basin.
pub fn multi_start_search_with_steps<F>(
    lower: &[f64],
    upper: &[f64],
    starts: &[Vec<f64>],
    steps: &[f64],
    opts: &SearchOptions,
    f: &F,
) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    assert!(!starts.is_empty(), "multi_start_search needs at least one start");
    assert_eq!(starts.len(), steps.len());
    let runs: Vec<SearchRun> = starts
        .par_iter()
        .zip(steps)
        .map(|(s, &step)| compass_search(lower, upper, s, &SearchOptions { initial_step: step, ..*opts }, f))
        .collect::<Result<Vec<_>>>()?;
    let evaluations = runs.iter().map(|r| r.evaluations).sum();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.value < runs[best].value {
            best = i;
        }
    }
    let run = runs.into_iter().nth(best).expect("index in range");
    Ok(SearchResult {
        x: run.x,
        value: run.value,
        trace: run.trace,
        best_start: best,
        starts_used: starts.len(),
        evaluations,
    })
}
