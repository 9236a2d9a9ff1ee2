//! Second step: probit maximum likelihood for the actual choice with
//! group-specific effects.
//!
//! `Pr(D = 1 | x, group k) = Phi(alpha_k + beta_k x)`. With group-specific
//! slopes the groups share no parameters, so each is a two-parameter probit
//! fitted on its own. With a common slope the problem is solved jointly.
//! Both paths use Newton-Raphson on the analytic score and Hessian with step
//! halving, which keeps the log-likelihood non-decreasing.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::firststep::Grouping;
use crate::model::ActualRecord;
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    /// Group-specific slope on x in addition to the group intercept.
    pub per_group_slope: bool,
    pub tol_grad: f64,
    pub max_iter: usize,
    /// Parameter-norm bound used to detect and clamp separated groups.
    pub separation_bound: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { per_group_slope: true, tol_grad: 1e-8, max_iter: 100, separation_bound: 50.0 }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_grad > 0.0) {
            return Err(Error::Argument("tol_grad must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Argument("max_iter must be at least 1".into()));
        }
        if !(self.separation_bound > 0.0) {
            return Err(Error::Argument("separation_bound must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub alpha: f64,
    pub beta: f64,
    pub n_obs: usize,
    pub converged: bool,
    /// Likelihood unbounded in this group; parameters are clamped at the bound.
    pub separated: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loglik: f64,
}

impl GroupParams {
    pub fn predict(&self, x: f64) -> f64 {
        normal::cdf(self.alpha + self.beta * x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedProbitFit {
    pub params: BTreeMap<usize, GroupParams>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Actual records dropped because their person has no group label.
    pub n_unlabeled: usize,
}

impl GroupedProbitFit {
    pub fn n_separated(&self) -> usize {
        self.params.values().filter(|p| p.separated).count()
    }
}

/// Log-likelihood, score and Hessian of a probit with dense design rows.
pub fn probit_loglik_grad_hess(rows: &[Vec<f64>], y: &[u8], theta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = theta.len();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    for (row, &d) in rows.iter().zip(y) {
        let q = if d == 1 { 1.0 } else { -1.0 };
        let xb: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
        let z = q * xb;
        ll += normal::ln_cdf(z);
        let lam = normal::inv_mills(z);
        let w = lam * (lam + z);
        for i in 0..p {
            grad[i] += q * lam * row[i];
            for j in 0..=i {
                hess[(i, j)] -= w * row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            hess[(j, i)] = hess[(i, j)];
        }
    }
    (ll, grad, hess)
}

pub fn probit_loglik(rows: &[Vec<f64>], y: &[u8], theta: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(row, &d)| {
            let q = if d == 1 { 1.0 } else { -1.0 };
            let xb: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
            normal::ln_cdf(q * xb)
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Parameter norm exceeded the bound; `theta` was rescaled onto it.
    pub hit_bound: bool,
    /// Log-likelihood after each accepted step, starting value first.
    pub history: Vec<f64>,
}

/// Newton-Raphson with step halving from `init`.
pub fn newton_probit(rows: &[Vec<f64>], y: &[u8], init: &[f64], spec: &ModelSpec) -> NewtonOutcome {
    let p = init.len();
    let mut theta = init.to_vec();
    let (mut ll, mut grad, mut hess) = probit_loglik_grad_hess(rows, y, &theta);
    let mut history = vec![ll];
    let mut iterations = 0;
    let mut hit_bound = false;

    while grad.norm() > spec.tol_grad && iterations < spec.max_iter {
        iterations += 1;
        let neg_h = -hess.clone();
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // singular information (e.g. no spread in x): ridge it
                let ridge = 1e-8 * (1.0 + neg_h.diagonal().amax());
                match (neg_h + DMatrix::identity(p, p) * ridge).cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => grad.clone(),
                }
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        // predicted gain below the resolution of ll: judge the full step by
        // the score norm instead
        let gain = 0.5 * grad.dot(&step);
        if gain < 1e-13 * (1.0 + ll.abs()) {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let (_, g, _) = probit_loglik_grad_hess(rows, y, &cand);
            if g.norm() < grad.norm() {
                accepted = Some(cand);
            }
        }
        for _ in 0..60 {
            if accepted.is_some() {
                break;
            }
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let cand_ll = probit_loglik(rows, y, &cand);
            if cand_ll >= ll {
                accepted = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        let Some(cand) = accepted else {
            // no ascent direction left at machine precision
            break;
        };
        theta = cand;
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm > spec.separation_bound {
            let f = spec.separation_bound / norm;
            theta.iter_mut().for_each(|t| *t *= f);
            hit_bound = true;
        }
        let (l, g, h) = probit_loglik_grad_hess(rows, y, &theta);
        ll = l;
        grad = g;
        hess = h;
        history.push(ll);
        if hit_bound {
            break;
        }
    }
    let grad_norm = grad.norm();
    NewtonOutcome {
        theta,
        loglik: ll,
        converged: !hit_bound && grad_norm <= spec.tol_grad,
        iterations,
        grad_norm,
        hit_bound,
        history,
    }
}

/// Direction of complete or quasi-complete separation in a one-regressor
/// probit, as clamped `(alpha, beta)` on the bound; `None` if the MLE is finite.
fn separation_params(xs: &[f64], ds: &[u8], with_slope: bool, bound: f64) -> Option<(f64, f64)> {
    let ones = ds.iter().filter(|&&d| d == 1).count();
    if ones == ds.len() {
        return Some((bound, 0.0));
    }
    if ones == 0 {
        return Some((-bound, 0.0));
    }
    if !with_slope {
        return None;
    }
    let (mut min0, mut max0, mut min1, mut max1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &d) in xs.iter().zip(ds) {
        if d == 1 {
            min1 = min1.min(x);
            max1 = max1.max(x);
        } else {
            min0 = min0.min(x);
            max0 = max0.max(x);
        }
    }
    let dir = |c: f64, sign: f64| {
        let norm = (c * c + 1.0).sqrt();
        (-sign * c * bound / norm, sign * bound / norm)
    };
    if max0 <= min1 && min0 < max1 {
        return Some(dir(0.5 * (max0 + min1), 1.0));
    }
    if max1 <= min0 && min1 < max0 {
        return Some(dir(0.5 * (max1 + min0), -1.0));
    }
    None
}

/// Two-parameter probit of `ds` on `(1, xs)` (or intercept only).
pub fn fit_single_probit(xs: &[f64], ds: &[u8], with_slope: bool, spec: &ModelSpec) -> GroupParams {
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| if with_slope { vec![1.0, x] } else { vec![1.0] }).collect();
    if let Some((alpha, beta)) = separation_params(xs, ds, with_slope, spec.separation_bound) {
        let theta = if with_slope { vec![alpha, beta] } else { vec![alpha] };
        let (ll, g, _) = probit_loglik_grad_hess(&rows, ds, &theta);
        return GroupParams {
            alpha,
            beta,
            n_obs: xs.len(),
            converged: false,
            separated: true,
            iterations: 0,
            grad_norm: g.norm(),
            loglik: ll,
        };
    }
    let init = if with_slope { vec![0.0, 0.0] } else { vec![0.0] };
    let out = newton_probit(&rows, ds, &init, spec);
    GroupParams {
        alpha: out.theta[0],
        beta: if with_slope { out.theta[1] } else { 0.0 },
        n_obs: xs.len(),
        converged: out.converged,
        separated: out.hit_bound,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        loglik: out.loglik,
    }
}

/// Actual records split by group label, plus the count of unlabeled records.
pub(crate) fn split_by_group(
    actual: &[ActualRecord],
    grouping: &Grouping,
) -> (BTreeMap<usize, (Vec<f64>, Vec<u8>)>, usize) {
    let mut by_group: BTreeMap<usize, (Vec<f64>, Vec<u8>)> =
        (1..=grouping.k).map(|g| (g, (Vec::new(), Vec::new()))).collect();
    let mut unlabeled = 0;
    for r in actual {
        match grouping.group_of(r.person_id) {
            Some(g) => {
                let e = by_group.entry(g).or_default();
                e.0.push(r.x);
                e.1.push(r.d);
            }
            None => unlabeled += 1,
        }
    }
    (by_group, unlabeled)
}

pub fn fit_grouped_probit(actual: &[ActualRecord], grouping: &Grouping, spec: &ModelSpec) -> Result<GroupedProbitFit> {
    spec.validate()?;
    if let Some(r) = actual.iter().find(|r| r.d > 1 || !r.x.is_finite()) {
        return Err(Error::Validation(format!("person {}: invalid actual record", r.person_id)));
    }
    let (by_group, n_unlabeled) = split_by_group(actual, grouping);
    if n_unlabeled > 0 {
        warn!("second step: {n_unlabeled} actual records without a group label were excluded");
    }
    if let Some((g, _)) = by_group.iter().find(|(_, (xs, _))| xs.is_empty()) {
        return Err(Error::Estimation(format!("group {g} has no actual-choice observations")));
    }

    let params: BTreeMap<usize, GroupParams> = if spec.per_group_slope {
        let groups: Vec<_> = by_group.into_iter().collect();
        groups
            .par_iter()
            .map(|(g, (xs, ds))| (*g, fit_single_probit(xs, ds, true, spec)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    } else {
        fit_common_slope(&by_group, spec)
    };

    for (g, p) in &params {
        if p.separated {
            warn!("second step: group {g} is separated; parameters clamped at the bound");
        }
    }
    let active = params.values().filter(|p| !p.separated);
    let converged = active.clone().all(|p| p.converged);
    let grad_norm = active.clone().map(|p| p.grad_norm).fold(0.0, f64::max);
    let iterations = params.values().map(|p| p.iterations).max().unwrap_or(0);
    let loglik = params.values().map(|p| p.loglik).sum();
    Ok(GroupedProbitFit { params, loglik, converged, iterations, grad_norm, n_unlabeled })
}

/// Group intercepts with one shared slope. Separated groups (all choices
/// equal) get a clamped intercept and are left out of the joint problem.
fn fit_common_slope(by_group: &BTreeMap<usize, (Vec<f64>, Vec<u8>)>, spec: &ModelSpec) -> BTreeMap<usize, GroupParams> {
    let mut separated = BTreeMap::new();
    let mut active = Vec::new();
    for (&g, (xs, ds)) in by_group {
        match separation_params(xs, ds, false, spec.separation_bound) {
            Some((alpha, _)) => {
                separated.insert(g, alpha);
            }
            None => active.push(g),
        }
    }
    let p = active.len() + 1;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (slot, g) in active.iter().enumerate() {
        let (xs, ds) = &by_group[g];
        for (&x, &d) in xs.iter().zip(ds) {
            let mut row = vec![0.0; p];
            row[slot] = 1.0;
            row[p - 1] = x;
            rows.push(row);
            y.push(d);
        }
    }
    let out = if active.is_empty() { None } else { Some(newton_probit(&rows, &y, &vec![0.0; p], spec)) };
    let beta = out.as_ref().map_or(0.0, |o| o.theta[p - 1]);

    let mut params = BTreeMap::new();
    for (slot, g) in active.iter().enumerate() {
        let o = out.as_ref().expect("active groups imply a fit");
        let (xs, ds) = &by_group[g];
        let rows_g: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
        let ll = probit_loglik(&rows_g, ds, &[o.theta[slot], beta]);
        params.insert(
            *g,
            GroupParams {
                alpha: o.theta[slot],
                beta,
                n_obs: xs.len(),
                converged: o.converged,
                separated: o.hit_bound,
                iterations: o.iterations,
                grad_norm: o.grad_norm,
                loglik: ll,
            },
        );
    }
    for (g, alpha) in separated {
        let (xs, ds) = &by_group[&g];
        let rows_g: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
        let (ll, grad, _) = probit_loglik_grad_hess(&rows_g, ds, &[alpha, beta]);
        params.insert(
            g,
            GroupParams {
                alpha,
                beta,
                n_obs: xs.len(),
                converged: false,
                separated: true,
                iterations: 0,
                grad_norm: grad[0].abs(),
                loglik: ll,
            },
        );
    }
    params
}

pub fn predict_choice_prob(fit: &GroupedProbitFit, x: f64, group: usize) -> Result<f64> {
    fit.params.get(&group).map(|p| p.predict(x)).ok_or_else(|| Error::Argument(format!("unknown group {group}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn one_group(n: usize) -> Grouping {
        Grouping { labels: (0..n as i64).map(|i| (i, 1)).collect(), centroids: vec![vec![0.0]], objective: 0.0, k: 1 }
    }

    fn simulate_probit(n: usize, a: f64, b: f64, seed: u64) -> Vec<ActualRecord> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|i| {
                let x: f64 = rng.sample(rand_distr::StandardNormal);
                let u: f64 = rng.random();
                ActualRecord { person_id: i as i64, x, d: u8::from(normal::cdf(a + b * x) > u) }
            })
            .collect()
    }

    #[test]
    fn recovers_generating_parameters() {
        let data = simulate_probit(200_000, 0.3, 0.7, 5);
        let fit = fit_grouped_probit(&data, &one_group(data.len()), &ModelSpec::default()).unwrap();
        let p = fit.params[&1];
        assert!(fit.converged && p.converged);
        assert!(p.grad_norm <= 1e-8);
        assert!((p.alpha - 0.3).abs() < 0.02 && (p.beta - 0.7).abs() < 0.02, "{p:?}");
        assert!(fit.loglik <= 0.0);
    }

    #[test]
    fn all_ones_group_is_separated() {
        let data: Vec<ActualRecord> = (0..20).map(|i| ActualRecord { person_id: i, x: i as f64 * 0.1, d: 1 }).collect();
        let fit = fit_grouped_probit(&data, &one_group(20), &ModelSpec::default()).unwrap();
        let p = fit.params[&1];
        assert!(p.separated);
        assert_eq!((p.alpha, p.beta), (50.0, 0.0));
        assert_eq!(fit.n_separated(), 1);
    }

    #[test]
    fn threshold_in_x_is_separated() {
        let data: Vec<ActualRecord> =
            (0..20).map(|i| ActualRecord { person_id: i, x: i as f64, d: u8::from(i >= 10) }).collect();
        let fit = fit_grouped_probit(&data, &one_group(20), &ModelSpec::default()).unwrap();
        let p = fit.params[&1];
        assert!(p.separated);
        assert!(((p.alpha.powi(2) + p.beta.powi(2)).sqrt() - 50.0).abs() < 1e-9);
        // beta = 50 / sqrt(1 + 9.5^2), so the fitted step is steep but finite
        assert!(p.predict(9.0) < 0.01 && p.predict(10.0) > 0.99);
        assert!((p.predict(9.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prediction_examples() {
        let mut params = BTreeMap::new();
        let base = GroupParams {
            alpha: 0.0,
            beta: 0.0,
            n_obs: 1,
            converged: true,
            separated: false,
            iterations: 0,
            grad_norm: 0.0,
            loglik: 0.0,
        };
        params.insert(1, base);
        params.insert(2, GroupParams { alpha: 1.96, ..base });
        params.insert(3, GroupParams { alpha: -0.2, beta: 0.8, ..base });
        let fit =
            GroupedProbitFit { params, loglik: 0.0, converged: true, iterations: 0, grad_norm: 0.0, n_unlabeled: 0 };
        assert_eq!(predict_choice_prob(&fit, 3.7, 1).unwrap(), 0.5);
        assert!((predict_choice_prob(&fit, -1.0, 2).unwrap() - 0.975).abs() < 1e-4);
        assert!(predict_choice_prob(&fit, 1.0, 3).unwrap() > predict_choice_prob(&fit, 0.5, 3).unwrap());
        assert!(predict_choice_prob(&fit, 0.0, 4).is_err());
    }

    #[test]
    fn loglik_is_monotone_along_newton_path() {
        let data = simulate_probit(3000, -0.4, 1.5, 8);
        let rows: Vec<Vec<f64>> = data.iter().map(|r| vec![1.0, r.x]).collect();
        let y: Vec<u8> = data.iter().map(|r| r.d).collect();
        let out = newton_probit(&rows, &y, &[3.0, -3.0], &ModelSpec::default());
        assert!(out.converged, "{:?}", (out.iterations, out.grad_norm, out.hit_bound, &out.theta, out.history.len()));
        for w in out.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "{w:?}");
        }
    }

    #[test]
    fn common_slope_variant() {
        let mut data = simulate_probit(4000, -0.5, 0.8, 2);
        let second = simulate_probit(4000, 0.5, 0.8, 3);
        data.extend(second.into_iter().map(|mut r| {
            r.person_id += 10_000;
            r
        }));
        let labels = data.iter().map(|r| (r.person_id, if r.person_id >= 10_000 { 2 } else { 1 })).collect();
        let grouping = Grouping { labels, centroids: vec![vec![0.0]; 2], objective: 0.0, k: 2 };
        let spec = ModelSpec { per_group_slope: false, ..ModelSpec::default() };
        let fit = fit_grouped_probit(&data, &grouping, &spec).unwrap();
        assert!(fit.converged);
        let (g1, g2) = (fit.params[&1], fit.params[&2]);
        assert_eq!(g1.beta, g2.beta);
        assert!((g1.alpha + 0.5).abs() < 0.1 && (g2.alpha - 0.5).abs() < 0.1 && (g1.beta - 0.8).abs() < 0.1);
    }

    #[test]
    fn empty_group_is_an_error() {
        let data = simulate_probit(10, 0.0, 1.0, 1);
        let mut g = one_group(10);
        g.k = 2;
        assert!(fit_grouped_probit(&data, &g, &ModelSpec::default()).is_err());
    }
}
