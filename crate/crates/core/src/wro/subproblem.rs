//! Maximum constraint violation
//! `CV_i = max_{ỹ ∈ 𝒴} min_k ‖ỹ − x_k‖² − v_{N+1} ‖ỹ − y_i‖ − v_i`.
//!
//! In the plane the maximum is found exactly: on the Voronoi cell of each
//! `x_k` (clipped to the box) the objective is `‖ỹ − x_k‖² − t‖ỹ − y_i‖`,
//! whose Hessian has a positive direction everywhere except at `y_i`. So the
//! maximum is at `y_i`, a cell vertex, or an edge point inside the region
//! where the edge restriction is concave. In higher dimensions a sampled
//! scan is polished by compass search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::loss::Frontier;
use crate::search::{compass_search, SearchOptions};

/// Random scan size when the full grid is too large.
const SAMPLE_COUNT: usize = 4096;
/// Full grids are used up to this many points.
const MAX_GRID_POINTS: usize = 65_536;
/// Box corners are enumerated up to this many.
const MAX_CORNERS: usize = 4096;
const POLISH_STARTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub cv: f64,
    pub witness: Vec<f64>,
}

/// Settings of the sampled scan used when `n != 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub grid_resolution: usize,
    pub seed: u64,
}

/// The DC objective `l_K(ỹ) − t‖ỹ − y‖ − v_i`.
#[inline]
pub fn violation_at(frontier: &Frontier, y: &[f64], t: f64, v_i: f64, p: &[f64]) -> f64 {
    frontier.loss(p) - t * linalg::dist(p, y) - v_i
}

/// Maximum violation over the box `[lo, hi]` and a point attaining it.
pub fn max_violation_box(
    frontier: &Frontier,
    y: &[f64],
    t: f64,
    v_i: f64,
    lo: &[f64],
    hi: &[f64],
    scan: &ScanOptions,
) -> Violation {
    if lo.len() == 2 {
        max_violation_plane(frontier, y, t, v_i, lo, hi)
    } else {
        max_violation_sampled(frontier, y, t, v_i, lo, hi, scan)
    }
}

struct Best<'a> {
    frontier: &'a Frontier,
    y: &'a [f64],
    t: f64,
    v_i: f64,
    lo: &'a [f64],
    hi: &'a [f64],
    value: f64,
    point: Vec<f64>,
}

impl<'a> Best<'a> {
    fn consider(&mut self, p: &[f64]) {
        let p: Vec<f64> = p.iter().zip(self.lo.iter().zip(self.hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect();
        let v = violation_at(self.frontier, self.y, self.t, self.v_i, &p);
        if v > self.value {
            self.value = v;
            self.point = p;
        }
    }

    fn finish(self) -> Violation {
        Violation { cv: self.value, witness: self.point }
    }
}

fn max_violation_plane(frontier: &Frontier, y: &[f64], t: f64, v_i: f64, lo: &[f64], hi: &[f64]) -> Violation {
    let mut best = Best { frontier, y, t, v_i, lo, hi, value: f64::NEG_INFINITY, point: lo.to_vec() };
    best.consider(y);
    let boxp = vec![[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]];
    for (k, xk) in frontier.points.iter().enumerate() {
        let mut poly = boxp.clone();
        for (j, xj) in frontier.points.iter().enumerate() {
            if j == k {
                continue;
            }
            let a = [2.0 * (xj[0] - xk[0]), 2.0 * (xj[1] - xk[1])];
            if a[0].abs() + a[1].abs() < 1e-14 {
                continue;
            }
            let c = linalg::dot(xj, xj) - linalg::dot(xk, xk);
            poly = clip(&poly, a, c);
            if poly.is_empty() {
                break;
            }
        }
        for (m, p0) in poly.iter().enumerate() {
            best.consider(p0);
            let p1 = poly[(m + 1) % poly.len()];
            for p in edge_candidates(*p0, p1, xk, y, t) {
                best.consider(&p);
            }
        }
    }
    best.finish()
}

/// Keeps the part of a convex polygon with `a·p <= c`.
fn clip(poly: &[[f64; 2]], a: [f64; 2], c: f64) -> Vec<[f64; 2]> {
    let side = |p: &[f64; 2]| a[0] * p[0] + a[1] * p[1] - c;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for (m, p) in poly.iter().enumerate() {
        let q = &poly[(m + 1) % poly.len()];
        let (sp, sq) = (side(p), side(q));
        if sp <= 0.0 {
            out.push(*p);
        }
        if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
            let s = sp / (sp - sq);
            out.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]);
        }
    }
    out
}

/// Local maximizers of `‖p − x‖² − t‖p − y‖` on the open segment `(p0, p1)`.
fn edge_candidates(p0: [f64; 2], p1: [f64; 2], x: &[f64], y: &[f64], t: f64) -> Vec<[f64; 2]> {
    let e = [p1[0] - p0[0], p1[1] - p0[1]];
    let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
    if len < 1e-15 {
        return vec![];
    }
    let e = [e[0] / len, e[1] / len];
    let at = |s: f64| [p0[0] + s * e[0], p0[1] + s * e[1]];
    let qe = (p0[0] - x[0]) * e[0] + (p0[1] - x[1]) * e[1];
    let w = [y[0] - p0[0], y[1] - p0[1]];
    let s0 = w[0] * e[0] + w[1] * e[1];
    let h2 = (w[0] * w[0] + w[1] * w[1] - s0 * s0).max(0.0);

    let mut out = vec![at(s0.clamp(0.0, len))];
    if t > 0.0 && h2 > 0.0 {
        // The restriction is concave where r³ < t h² / 2, with r = dist to y.
        let rc = (t * h2 / 2.0).cbrt();
        if rc * rc > h2 {
            let rho = (rc * rc - h2).sqrt();
            let (mut a, mut b) = ((s0 - rho).max(0.0), (s0 + rho).min(len));
            if a < b {
                let d = |s: f64| 2.0 * s + 2.0 * qe - t * (s - s0) / ((s - s0).powi(2) + h2).sqrt();
                if d(a) <= 0.0 {
                    out.push(at(a));
                } else if d(b) >= 0.0 {
                    out.push(at(b));
                } else {
                    for _ in 0..200 {
                        let m = 0.5 * (a + b);
                        if m <= a || m >= b {
                            break;
                        }
                        if d(m) > 0.0 {
                            a = m;
                        } else {
                            b = m;
                        }
                    }
                    out.push(at(0.5 * (a + b)));
                }
            }
        }
    }
    out
}

fn max_violation_sampled(
    frontier: &Frontier,
    y: &[f64],
    t: f64,
    v_i: f64,
    lo: &[f64],
    hi: &[f64],
    scan: &ScanOptions,
) -> Violation {
    let n = lo.len();
    let mut pool: Vec<Vec<f64>> = Vec::new();
    pool.push(y.to_vec());

    let res = scan.grid_resolution.max(2);
    let grid_points = (res as f64).powi(n as i32);
    if grid_points <= MAX_GRID_POINTS as f64 {
        let total = res.pow(n as u32);
        for idx in 0..total {
            let mut rem = idx;
            pool.push(
                (0..n)
                    .map(|j| {
                        let g = rem % res;
                        rem /= res;
                        lo[j] + (hi[j] - lo[j]) * g as f64 / (res - 1) as f64
                    })
                    .collect(),
            );
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(scan.seed);
        for _ in 0..SAMPLE_COUNT {
            pool.push((0..n).map(|j| lo[j] + (hi[j] - lo[j]) * rng.gen::<f64>()).collect());
        }
    }
    if n < usize::BITS as usize && (1usize << n) <= MAX_CORNERS {
        for mask in 0..(1usize << n) {
            pool.push((0..n).map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] }).collect());
        }
    }
    // Per-k seeds: the box point farthest from each frontier point.
    for xk in &frontier.points {
        pool.push(
            (0..n)
                .map(|j| if (xk[j] - lo[j]).abs() >= (hi[j] - xk[j]).abs() { lo[j] } else { hi[j] })
                .collect(),
        );
    }

    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(m, p)| (violation_at(frontier, y, t, v_i, p), m))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut best = Best { frontier, y, t, v_i, lo, hi, value: f64::NEG_INFINITY, point: lo.to_vec() };
    let opts = SearchOptions { initial_step: 0.05, min_step: 1e-7, max_evaluations: 3000 };
    let neg = |p: &[f64]| -> crate::Result<f64> { Ok(-violation_at(frontier, y, t, v_i, p)) };
    for &(_, m) in scored.iter().take(POLISH_STARTS) {
        best.consider(&pool[m]);
        if let Ok(run) = compass_search(lo, hi, &pool[m], &opts, &neg) {
            best.consider(&run.x);
        }
    }
    best.finish()
}
