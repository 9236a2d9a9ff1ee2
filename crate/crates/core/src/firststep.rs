//! First step: per-individual moments of stated choices and k-means
//! classification of individuals into groups.
//!
//! Each person's linked stated probabilities `L(p*)` from scenarios `t >= 1`
//! are regressed on `(1, x)` by OLS; the fitted line evaluated at a small set
//! of points gives the moment vector `h_i`. Persons are then partitioned by
//! Lloyd's algorithm from k-means++ seeds, keeping the best of several
//! restarts.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LinkFunction, PersonId, PseudoPanel};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualMoments {
    pub person_id: PersonId,
    /// Fitted conditional mean of `L(p*)` at each evaluation point.
    pub h: Vec<f64>,
    pub fit_ok: bool,
    pub eval_points: Vec<f64>,
    /// Sampling variance of `h` summed over evaluation points, from the OLS
    /// residual variance. `None` when the fit has no residual degrees of freedom.
    pub noise_var: Option<f64>,
}

/// Simple OLS of `y` on `(1, x)`; `None` when `x` has no spread.
struct LineFit {
    intercept: f64,
    slope: f64,
    x_mean: f64,
    sxx: f64,
    n: usize,
    rss: f64,
}

fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let x_mean = xs.iter().sum::<f64>() / n as f64;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let scale = xs.iter().map(|x| x.abs()).fold(1.0, f64::max);
    if sxx <= 1e-12 * scale * scale * n as f64 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Some(LineFit { intercept, slope, x_mean, sxx, n, rss })
}

pub fn estimate_individual_moments(
    panel: &PseudoPanel,
    eval_points: &[f64],
    lf: &LinkFunction,
) -> Result<Vec<IndividualMoments>> {
    if eval_points.is_empty() || eval_points.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("eval_points must be a nonempty list of finite values".into()));
    }
    let by_person = panel.stated_by_person();
    let persons: Vec<_> = by_person.into_iter().collect();
    let moments: Vec<IndividualMoments> = persons
        .par_iter()
        .map(|(person_id, recs)| {
            let mut xs = Vec::with_capacity(recs.len());
            let mut ys = Vec::with_capacity(recs.len());
            let mut ok = true;
            for r in recs.iter().filter(|r| r.scenario_id >= 1) {
                match lf.link(r.p_star) {
                    Ok(y) if r.x.is_finite() => {
                        xs.push(r.x);
                        ys.push(y);
                    }
                    _ => ok = false,
                }
            }
            let fit = if ok { fit_line(&xs, &ys) } else { None };
            match fit {
                Some(f) => {
                    let h = eval_points.iter().map(|&x| f.intercept + f.slope * x).collect();
                    let noise_var = (f.n > 2).then(|| {
                        let s2 = f.rss / (f.n - 2) as f64;
                        eval_points.iter().map(|&x| s2 * (1.0 / f.n as f64 + (x - f.x_mean).powi(2) / f.sxx)).sum()
                    });
                    IndividualMoments {
                        person_id: *person_id,
                        h,
                        fit_ok: true,
                        eval_points: eval_points.to_vec(),
                        noise_var,
                    }
                }
                None => IndividualMoments {
                    person_id: *person_id,
                    h: vec![f64::NAN; eval_points.len()],
                    fit_ok: false,
                    eval_points: eval_points.to_vec(),
                    noise_var: None,
                },
            }
        })
        .collect();

    let failed = moments.iter().filter(|m| !m.fit_ok).count();
    if failed == moments.len() {
        return Err(Error::Estimation("no usable individuals".into()));
    }
    if failed > 0 {
        warn!("first step: {failed} of {} persons excluded (degenerate scenario design)", moments.len());
    }
    Ok(moments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    /// Group label in `1..=k` for each classified person.
    pub labels: BTreeMap<PersonId, usize>,
    /// `centroids[g - 1]` is the centroid of group `g`.
    pub centroids: Vec<Vec<f64>>,
    /// Within-group sum of squared distances to the centroids.
    pub objective: f64,
    pub k: usize,
}

impl Grouping {
    pub fn group_of(&self, person: PersonId) -> Option<usize> {
        self.labels.get(&person).copied()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &g in self.labels.values() {
            sizes[g - 1] += 1;
        }
        sizes
    }

    /// Group shares `p_k`, indexed by `g - 1`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.labels.len() as f64;
        self.group_sizes().into_iter().map(|c| c as f64 / n).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Output of a single Lloyd run.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub centroids: Vec<Vec<f64>>,
    /// Zero-based cluster index per point.
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Objective after each assignment + update step.
    pub history: Vec<f64>,
}

/// Nearest centroid, ties to the lowest index. During Lloyd iterations a point
/// only moves when the new centroid is strictly closer.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn objective_of(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignment).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance to the nearest chosen centre.
pub fn kmeans_plus_plus<R: rand::Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
                pick = Some(i);
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a centre; pick any unused index
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    centroids
}

/// Lloyd iterations from the given centres until assignments stop changing.
/// An empty cluster is re-seeded at the point farthest from its centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> LloydRun {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    for _ in 0..max_iter {
        // update
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = points
                    .iter()
                    .zip(&assignment)
                    .map(|(p, &a)| sq_dist(p, &centroids[a]))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, d)| if d > best.1 { (i, d) } else { best });
                let old = assignment[far];
                centroids[c] = points[far].clone();
                assignment[far] = c;
                counts[old] -= 1;
                counts[c] = 1;
            }
        }
        // assignment
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if c != assignment[i] && d < sq_dist(p, &centroids[assignment[i]]) {
                assignment[i] = c;
                changed = true;
            }
        }
        history.push(objective_of(points, &assignment, &centroids));
        if !changed {
            break;
        }
    }
    // final centroid update so the objective matches the returned centroids
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(&assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    let objective = objective_of(points, &assignment, &centroids);
    history.push(objective);
    LloydRun { centroids, assignment, objective, history }
}

const LLOYD_MAX_ITER: usize = 300;

/// Best-of-`restarts` k-means over the usable moment vectors. Persons are
/// processed in `person_id` order so the result does not depend on input
/// order; groups are numbered by first appearance in that order.
pub fn kmeans_partition(moments: &[IndividualMoments], k: usize, restarts: usize, seed: u64) -> Result<Grouping> {
    let mut usable: Vec<&IndividualMoments> = moments.iter().filter(|m| m.fit_ok).collect();
    usable.sort_by_key(|m| m.person_id);
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if restarts == 0 {
        return Err(Error::Argument("restarts must be at least 1".into()));
    }
    if k > usable.len() {
        return Err(Error::Argument(format!("k = {k} exceeds the number of usable individuals ({})", usable.len())));
    }
    let points: Vec<Vec<f64>> = usable.iter().map(|m| m.h.clone()).collect();

    let runs: Vec<LloydRun> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            let init = kmeans_plus_plus(&points, k, &mut rng);
            lloyd(&points, init, LLOYD_MAX_ITER)
        })
        .collect();
    // argmin, earliest restart wins ties
    let best =
        runs.into_iter().reduce(|a, b| if b.objective < a.objective { b } else { a }).expect("at least one restart");

    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for &c in &best.assignment {
        if relabel[c] == usize::MAX {
            relabel[c] = next;
            next += 1;
        }
    }
    for slot in relabel.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next;
        next += 1;
    }
    let mut centroids = vec![Vec::new(); k];
    for (c, centroid) in best.centroids.into_iter().enumerate() {
        centroids[relabel[c]] = centroid;
    }
    let labels = usable.iter().zip(&best.assignment).map(|(m, &c)| (m.person_id, relabel[c] + 1)).collect();
    Ok(Grouping { labels, centroids, objective: best.objective, k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    /// No K in range met the threshold; `k` is the range maximum.
    pub hit_max: bool,
    /// Estimated moment-noise variance per individual.
    pub noise_var: f64,
    /// `(K, average within-group sum of squares)` for each K tried.
    pub trace: Vec<(usize, f64)>,
}

/// Smallest K in `[k_min, k_max]` whose per-individual within-group sum of
/// squares is at most `gamma` times the estimated moment-noise variance.
pub fn select_k(
    moments: &[IndividualMoments],
    k_min: usize,
    k_max: usize,
    gamma: f64,
    restarts: usize,
    seed: u64,
) -> Result<KSelection> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::Argument(format!("need 1 <= k_min <= k_max, got [{k_min}, {k_max}]")));
    }
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Argument(format!("gamma must be >= 0, got {gamma}")));
    }
    let usable: Vec<&IndividualMoments> = moments.iter().filter(|m| m.fit_ok).collect();
    let n = usable.len();
    if n == 0 {
        return Err(Error::Estimation("no usable individuals".into()));
    }
    let noise: Vec<f64> = usable.iter().filter_map(|m| m.noise_var).collect();
    let noise_var = if noise.is_empty() { 0.0 } else { noise.iter().sum::<f64>() / noise.len() as f64 };

    let k_hi = k_max.min(n);
    let k_lo = k_min.min(k_hi);
    if gamma.is_infinite() {
        return Ok(KSelection { k: k_lo, hit_max: false, noise_var, trace: Vec::new() });
    }
    // floor for round-off in exactly clustered data
    let total_ss = kmeans_partition(moments, 1, 1, seed)?.objective / n as f64;
    let slack = 1e-12 * (1.0 + total_ss);
    let threshold = gamma * noise_var + slack;

    let mut trace = Vec::new();
    for k in k_lo..=k_hi {
        let g = kmeans_partition(moments, k, restarts, seed::derive(seed, k as u64))?;
        let avg = g.objective / n as f64;
        trace.push((k, avg));
        if avg <= threshold {
            return Ok(KSelection { k, hit_max: false, noise_var, trace });
        }
    }
    warn!("select_k: no K in [{k_lo}, {k_hi}] met the threshold; using K = {k_hi}");
    Ok(KSelection { k: k_hi, hit_max: true, noise_var, trace })
}
