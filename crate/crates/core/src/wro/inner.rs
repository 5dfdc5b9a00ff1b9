//! Exact minimization over `v` of the finite master problem at a fixed θ.
//!
//! For fixed `t = v_{N+1}` each `v_i` is `clamp(max_j (L_ij - t d_ij), V1, v_i_max)`,
//! so the objective `ε t + (1/N) Σ_i v_i(t)` is convex and piecewise linear
//! in `t`. Its minimum sits at `t = 0`, `t = v_last_max` or a kink of one of
//! the per-observation upper envelopes.

use crate::error::{Error, Result};
use crate::model::VBounds;

/// Loss value and distance to `y_i` of one cut at the current θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutValue {
    pub loss: f64,
    pub dist: f64,
}

/// Minimizer `(v, objective)` of the master problem over `v ∈ 𝒱`, where
/// `cuts[i]` lists the cuts of observation `i`. Ties in `v_{N+1}` go to the
/// smallest value.
pub fn inner_v_solve_values(cuts: &[Vec<CutValue>], vb: &VBounds, epsilon: f64) -> Result<(Vec<f64>, f64)> {
    check_bounds(vb, epsilon)?;
    let n_obs = cuts.len();
    if n_obs == 0 {
        return Ok((vec![0.0], 0.0));
    }
    let t_max = vb.v_last_max;

    let mut cands = vec![0.0, t_max];
    for lines in cuts {
        envelope_kinks(lines, vb.v1, t_max, &mut cands);
    }
    cands.sort_by(f64::total_cmp);
    cands.dedup();

    let eval = |t: f64| objective_at(cuts, vb, epsilon, t);
    // Leftmost minimizer of a convex sequence.
    let (mut lo, mut hi) = (0usize, cands.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if eval(cands[mid]) <= eval(cands[mid + 1]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let t = cands[lo];
    let mut v: Vec<f64> = cuts.iter().map(|lines| v_i_at(lines, vb, t)).collect();
    let objective = epsilon * t + v.iter().sum::<f64>() / n_obs as f64;
    v.push(t);
    Ok((v, objective))
}

fn check_bounds(vb: &VBounds, epsilon: f64) -> Result<()> {
    let ok = epsilon > 0.0
        && vb.v1 <= vb.v2
        && vb.v_i_max >= vb.v1
        && vb.v_last_max >= 0.0
        && vb.v_last_max.is_finite()
        && vb.v_i_max.is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::EmptyBoundsBox(format!("{vb:?} with epsilon {epsilon}")))
    }
}

#[inline]
pub(crate) fn v_i_at(lines: &[CutValue], vb: &VBounds, t: f64) -> f64 {
    let m = lines.iter().map(|c| c.loss - t * c.dist).fold(vb.v1, f64::max);
    m.min(vb.v_i_max)
}

/// `ε t + (1/N) Σ_i v_i(t)`.
pub fn objective_at(cuts: &[Vec<CutValue>], vb: &VBounds, epsilon: f64, t: f64) -> f64 {
    let s: f64 = cuts.iter().map(|lines| v_i_at(lines, vb, t)).sum();
    epsilon * t + s / cuts.len() as f64
}

/// Pushes the kinks in `(0, t_max)` of `max(floor, max_j (L_j - t d_j))`.
fn envelope_kinks(lines: &[CutValue], floor: f64, t_max: f64, out: &mut Vec<f64>) {
    if lines.is_empty() {
        return;
    }
    // Lines as (slope, intercept), sorted by increasing slope.
    let mut ls: Vec<(f64, f64)> = lines.iter().map(|c| (-c.dist, c.loss)).collect();
    ls.push((0.0, floor));
    ls.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // Equal slopes: keep the largest intercept. Compared explicitly because a
    // zero-distance cut has slope -0.0, which sorts before the floor's 0.0.
    let mut uniq: Vec<(f64, f64)> = Vec::with_capacity(ls.len());
    for l in ls {
        match uniq.last_mut() {
            Some(last) if last.0 == l.0 => last.1 = last.1.max(l.1),
            _ => uniq.push(l),
        }
    }
    let cross = |a: (f64, f64), b: (f64, f64)| (a.1 - b.1) / (b.0 - a.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(uniq.len());
    for l in uniq {
        while hull.len() >= 2 {
            let (l1, l2) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if cross(l1, l) <= cross(l1, l2) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(l);
    }
    for w in hull.windows(2) {
        let t = cross(w[0], w[1]);
        if t > 0.0 && t < t_max {
            out.push(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vb(eps: f64) -> VBounds {
        VBounds::new(3.0, 3.0, 1, eps).unwrap()
    }

    #[test]
    fn empty_cuts_give_zero() {
        let (v, obj) = inner_v_solve_values(&[vec![], vec![]], &vb(0.1), 0.1).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn single_cut_by_hand() {
        let (l, d) = (2.0, 0.5);
        let cut = vec![vec![CutValue { loss: l, dist: d }]];
        // ε < d: t* = L/d, objective ε L/d.
        let (v, obj) = inner_v_solve_values(&cut, &vb(0.1), 0.1).unwrap();
        assert!((v[1] - l / d).abs() < 1e-12);
        assert!(v[0].abs() < 1e-12);
        assert!((obj - 0.1 * l / d).abs() < 1e-12);
        // ε > d: t* = 0, objective L.
        let (v, obj) = inner_v_solve_values(&cut, &vb(0.8), 0.8).unwrap();
        assert_eq!(v[1], 0.0);
        assert!((obj - l).abs() < 1e-12);
    }

    #[test]
    fn cut_at_the_observation_is_a_constant() {
        let cut = vec![vec![CutValue { loss: 1.5, dist: 0.0 }]];
        let (v, obj) = inner_v_solve_values(&cut, &vb(0.1), 0.1).unwrap();
        assert_eq!(v, vec![1.5, 0.0]);
        assert_eq!(obj, 1.5);
    }

    #[test]
    fn matches_dense_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let eps = 10f64.powf(rng.gen_range(-3.0..0.5));
            let b = vb(eps);
            let n = rng.gen_range(1..6);
            let cuts: Vec<Vec<CutValue>> = (0..n)
                .map(|_| {
                    (0..rng.gen_range(0..5))
                        .map(|_| {
                            let dist = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..5.0) };
                            CutValue { loss: rng.gen_range(0.0..b.v2), dist }
                        })
                        .collect()
                })
                .collect();
            let (v, obj) = inner_v_solve_values(&cuts, &b, eps).unwrap();
            assert!((objective_at(&cuts, &b, eps, v[n]) - obj).abs() < 1e-12);
            let steps = 20_000;
            let best = (0..=steps)
                .map(|s| objective_at(&cuts, &b, eps, b.v_last_max * s as f64 / steps as f64))
                .fold(f64::INFINITY, f64::min);
            assert!(obj <= best + 1e-9, "{obj} vs grid {best}");
        }
    }

    #[test]
    fn zero_distance_cut_is_not_hidden_by_the_floor() {
        // The zero-distance cut lifts v_1 to 0.5 for every t, which moves the
        // minimizer to the kink t = 2.5 / 2 = 1.25 instead of 3 / 2.
        let b = vb(0.3);
        let cuts = vec![vec![CutValue { loss: 3.0, dist: 2.0 }, CutValue { loss: 0.5, dist: 0.0 }]];
        let (v, obj) = inner_v_solve_values(&cuts, &b, 0.3).unwrap();
        assert!((v[1] - 1.25).abs() < 1e-12);
        assert!((obj - 0.875).abs() < 1e-12);
        let steps = 100_000;
        let best = (0..=steps)
            .map(|s| objective_at(&cuts, &b, 0.3, 4.0 * s as f64 / steps as f64))
            .fold(f64::INFINITY, f64::min);
        assert!(obj <= best + 1e-12, "{obj} vs {best}");
    }

    #[test]
    fn rejects_bad_bounds() {
        let mut b = vb(0.1);
        b.v_last_max = f64::INFINITY;
        assert!(matches!(inner_v_solve_values(&[vec![]], &b, 0.1), Err(Error::EmptyBoundsBox(_))));
        assert!(matches!(inner_v_solve_values(&[vec![]], &vb(0.1), 0.0), Err(Error::EmptyBoundsBox(_))));
    }
}
