//! Target quantities computed from the grouped fit: the average structural
//! function and treatment effects, the mean-squared stated/actual bias, and
//! counterfactual demand, together with the naive and stated reference
//! estimators.
//!
//! Conditioning on the continuous stated choices is replaced by conditioning
//! on the estimated group; conditioning on the scenario-0 attribute uses a
//! Gaussian kernel.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::error::{Error, Result};
use crate::firststep::Grouping;
use crate::kernel::{gaussian_weight, in_window, nadaraya_watson, silverman_bandwidth};
use crate::model::{ActualRecord, PersonId, PseudoPanel};
use crate::secondstep::{fit_single_probit, split_by_group, GroupedProbitFit, ModelSpec};

/// Group shares `p_k` among classified individuals.
pub fn group_weights(grouping: &Grouping) -> Result<BTreeMap<usize, f64>> {
    if grouping.labels.is_empty() {
        return Err(Error::Argument("empty grouping".into()));
    }
    Ok(grouping.weights().into_iter().enumerate().map(|(i, w)| (i + 1, w)).collect())
}

/// `sum_k p_k Phi(alpha_k + beta_k x)`.
pub fn average_structural_function(fit: &GroupedProbitFit, grouping: &Grouping, x: f64) -> Result<f64> {
    let weights = group_weights(grouping)?;
    let mut total = 0.0;
    for (g, w) in weights {
        if w == 0.0 {
            continue;
        }
        let p = fit.params.get(&g).ok_or_else(|| Error::Argument(format!("group {g} missing from the probit fit")))?;
        total += w * p.predict(x);
    }
    Ok(total.clamp(0.0, 1.0))
}

pub fn treatment_effect(fit: &GroupedProbitFit, grouping: &Grouping, x1: f64, x0: f64) -> Result<f64> {
    Ok(average_structural_function(fit, grouping, x1)? - average_structural_function(fit, grouping, x0)?)
}

/// Silverman bandwidth on the scenario-0 attribute values.
pub fn default_bandwidth(panel: &PseudoPanel) -> Option<f64> {
    let xs: Vec<f64> = panel.scenario(0).map(|r| r.x).collect();
    silverman_bandwidth(&xs)
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Argument(format!("bandwidth must be > 0, got {h}")));
    }
    Ok(())
}

/// Kernel estimate of `E[p* | X_0 = x, group]` from scenario-0 records.
/// Groups with no scenario-0 record inside the kernel window map to `None`.
pub fn stated_demand_by_group(
    panel: &PseudoPanel,
    grouping: &Grouping,
    x: f64,
    bandwidth: f64,
) -> Result<BTreeMap<usize, Option<f64>>> {
    check_bandwidth(bandwidth)?;
    let mut per_group: BTreeMap<usize, (Vec<f64>, Vec<f64>)> =
        (1..=grouping.k).map(|g| (g, (Vec::new(), Vec::new()))).collect();
    let mut any_scenario_zero = false;
    for r in panel.scenario(0) {
        any_scenario_zero = true;
        if let Some(g) = grouping.group_of(r.person_id) {
            let e = per_group.get_mut(&g).expect("label within 1..=k");
            e.0.push(r.x);
            e.1.push(r.p_star);
        }
    }
    if !any_scenario_zero {
        return Err(Error::Validation("panel has no scenario-0 records".into()));
    }
    Ok(per_group
        .into_iter()
        .map(|(g, (xs, ps))| (g, nadaraya_watson(&xs, &ps, x, bandwidth).map(|v| v.clamp(0.0, 1.0))))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsbPoint {
    pub x: f64,
    /// `None` when no group has stated-demand coverage at `x`.
    pub value: Option<f64>,
    /// Groups dropped for lack of coverage (weights renormalized).
    pub groups_dropped: usize,
}

/// Mean-squared bias between actual and stated demand on a grid of `x`:
/// `sum_k w_k(x) (mhat^r(x, k) - mhat(x, k))^2` with kernel group shares
/// `w_k(x)` conditional on the scenario-0 attribute.
pub fn msb(
    fit: &GroupedProbitFit,
    panel: &PseudoPanel,
    grouping: &Grouping,
    x_grid: &[f64],
    bandwidth: f64,
) -> Result<Vec<MsbPoint>> {
    check_bandwidth(bandwidth)?;
    let zero: Vec<(f64, usize)> =
        panel.scenario(0).filter_map(|r| grouping.group_of(r.person_id).map(|g| (r.x, g))).collect();
    let mut out = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        let stated = stated_demand_by_group(panel, grouping, x, bandwidth)?;
        let mut w = vec![0.0; grouping.k + 1];
        for &(xi, g) in &zero {
            w[g] += gaussian_weight(xi, x, bandwidth);
        }
        let (mut num, mut den, mut dropped) = (0.0, 0.0, 0);
        for (g, m) in &stated {
            let wg = w[*g];
            match m {
                Some(m) if wg > 0.0 => {
                    let gap = fit
                        .params
                        .get(g)
                        .ok_or_else(|| Error::Argument(format!("group {g} missing from the probit fit")))?
                        .predict(x)
                        - m;
                    num += wg * gap * gap;
                    den += wg;
                }
                Some(_) => {}
                None => dropped += 1,
            }
        }
        let value = (den > 0.0).then(|| (num / den).clamp(0.0, 1.0));
        if value.is_none() {
            warn!("msb: no stated-demand coverage at x = {x}");
        } else if dropped > 0 {
            warn!("msb: {dropped} groups without coverage at x = {x}; weights renormalized");
        }
        out.push(MsbPoint { x, value, groups_dropped: dropped });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    /// Source population's demand averaged over the target population's
    /// covered members.
    pub value: Option<f64>,
    pub n_target: usize,
    pub n_covered: usize,
    /// Groups with target members but no source members.
    pub uncovered_groups: Vec<usize>,
}

/// Demand that would prevail if the `source` population had the target
/// population's distribution of `(X, group)`: probits refitted on source
/// members within each group, averaged over target members.
pub fn counterfactual_distribution(
    actual: &[ActualRecord],
    grouping: &Grouping,
    membership: &BTreeMap<PersonId, u32>,
    source: u32,
    target: u32,
    spec: &ModelSpec,
) -> Result<Counterfactual> {
    spec.validate()?;
    let source_records: Vec<ActualRecord> =
        actual.iter().filter(|r| membership.get(&r.person_id) == Some(&source)).copied().collect();
    let target_records: Vec<&ActualRecord> =
        actual.iter().filter(|r| membership.get(&r.person_id) == Some(&target)).collect();
    if source_records.is_empty() || target_records.is_empty() {
        return Err(Error::Argument(format!("populations {source} and {target} must both be non-empty")));
    }
    let (by_group, _) = split_by_group(&source_records, grouping);
    let fits: BTreeMap<usize, _> = by_group
        .into_iter()
        .filter(|(_, (xs, _))| !xs.is_empty())
        .map(|(g, (xs, ds))| (g, fit_single_probit(&xs, &ds, spec.per_group_slope, spec)))
        .collect();

    let (mut sum, mut covered) = (0.0, 0);
    let mut uncovered = BTreeSet::new();
    let mut n_target = 0;
    for r in target_records {
        let Some(g) = grouping.group_of(r.person_id) else { continue };
        n_target += 1;
        match fits.get(&g) {
            Some(p) => {
                sum += p.predict(r.x);
                covered += 1;
            }
            None => {
                uncovered.insert(g);
            }
        }
    }
    if !uncovered.is_empty() {
        warn!("counterfactual: {} target members in groups {:?} have no source members", n_target - covered, uncovered);
    }
    Ok(Counterfactual {
        value: (covered > 0).then(|| sum / covered as f64),
        n_target,
        n_covered: covered,
        uncovered_groups: uncovered.into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveTe {
    pub value: f64,
    pub separated: bool,
}

/// Treatment effect from a single probit of `D` on `(1, x)`, ignoring
/// heterogeneity.
pub fn naive_te(actual: &[ActualRecord], x1: f64, x0: f64, spec: &ModelSpec) -> Result<NaiveTe> {
    spec.validate()?;
    let xs: Vec<f64> = actual.iter().map(|r| r.x).collect();
    let ds: Vec<u8> = actual.iter().map(|r| r.d).collect();
    let distinct = xs.iter().map(|x| x.to_bits()).collect::<BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Validation("naive TE needs at least two distinct x values".into()));
    }
    let p = fit_single_probit(&xs, &ds, true, spec);
    Ok(NaiveTe { value: p.predict(x1) - p.predict(x0), separated: p.separated })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatedTe {
    pub value: Option<f64>,
    /// At least one evaluation point is not a scenario grid value, so a
    /// kernel average over neighbouring cells was used.
    pub off_grid: bool,
}

const GRID_TOL: f64 = 1e-9;

/// `E[p* | X_t = x1] - E[p* | X_t = x0]` pooled over scenarios `t >= 1`.
/// Grid points give exact cell means; other points a kernel average.
pub fn stated_te(panel: &PseudoPanel, x1: f64, x0: f64, bandwidth: Option<f64>) -> Result<StatedTe> {
    let (xs, ps): (Vec<f64>, Vec<f64>) =
        panel.stated.iter().filter(|r| r.scenario_id >= 1).map(|r| (r.x, r.p_star)).unzip();
    if xs.is_empty() {
        return Err(Error::Validation("panel has no scenario records with t >= 1".into()));
    }
    let h = match bandwidth {
        Some(h) => {
            check_bandwidth(h)?;
            h
        }
        None => silverman_bandwidth(&xs).unwrap_or(f64::INFINITY),
    };
    let mut off_grid = false;
    let mut level = |x0: f64| -> Option<f64> {
        let cell: Vec<f64> =
            xs.iter().zip(&ps).filter(|(x, _)| (**x - x0).abs() <= GRID_TOL).map(|(_, p)| *p).collect();
        if !cell.is_empty() {
            return Some(cell.iter().sum::<f64>() / cell.len() as f64);
        }
        off_grid = true;
        if xs.iter().any(|&x| in_window(x, x0, h)) {
            nadaraya_watson(&xs, &ps, x0, h)
        } else {
            None
        }
    };
    let a = level(x1);
    let b = level(x0);
    if off_grid {
        warn!("stated TE: evaluation point off the scenario grid; kernel average of neighbouring cells used");
    }
    Ok(StatedTe { value: a.zip(b).map(|(a, b)| a - b), off_grid })
}

/// Everything the `estimate` command reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimandReport {
    pub asf: Vec<(f64, f64)>,
    pub te: f64,
    pub te_points: (f64, f64),
    pub msb: Vec<MsbPoint>,
    /// `((source, target), result)` for each requested population pair.
    pub counterfactuals: Vec<((u32, u32), Counterfactual)>,
    pub naive_te: NaiveTe,
    pub stated_te: StatedTe,
    pub group_weights: BTreeMap<usize, f64>,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRequest {
    pub x_grid: Vec<f64>,
    pub te_points: (f64, f64),
    /// Kernel bandwidth for scenario-0 smoothing; Silverman's rule if `None`.
    pub bandwidth: Option<f64>,
    pub membership: Option<BTreeMap<PersonId, u32>>,
}

pub fn build_report(
    panel: &PseudoPanel,
    grouping: &Grouping,
    fit: &GroupedProbitFit,
    spec: &ModelSpec,
    req: &ReportRequest,
) -> Result<EstimandReport> {
    let bandwidth = match req.bandwidth {
        Some(h) => h,
        None => default_bandwidth(panel)
            .ok_or_else(|| Error::Validation("cannot derive a bandwidth from scenario-0 data".into()))?,
    };
    let asf = req
        .x_grid
        .iter()
        .map(|&x| average_structural_function(fit, grouping, x).map(|v| (x, v)))
        .collect::<Result<Vec<_>>>()?;
    let (x1, x0) = req.te_points;
    let te = treatment_effect(fit, grouping, x1, x0)?;
    let msb = msb(fit, panel, grouping, &req.x_grid, bandwidth)?;

    let mut counterfactuals = Vec::new();
    if let Some(m) = &req.membership {
        let pops: BTreeSet<u32> = m.values().copied().collect();
        for &s in &pops {
            for &t in &pops {
                counterfactuals.push(((s, t), counterfactual_distribution(&panel.actual, grouping, m, s, t, spec)?));
            }
        }
    }

    let usable: Vec<ActualRecord> =
        panel.actual.iter().filter(|r| grouping.group_of(r.person_id).is_some()).copied().collect();
    Ok(EstimandReport {
        asf,
        te,
        te_points: req.te_points,
        msb,
        counterfactuals,
        naive_te: naive_te(&usable, x1, x0, spec)?,
        stated_te: stated_te(panel, x1, x0, None)?,
        group_weights: group_weights(grouping)?,
        bandwidth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StatedRecord;
    use crate::secondstep::GroupParams;

    fn params(alpha: f64, beta: f64) -> GroupParams {
        GroupParams {
            alpha,
            beta,
            n_obs: 10,
            converged: true,
            separated: false,
            iterations: 1,
            grad_norm: 0.0,
            loglik: -1.0,
        }
    }

    fn fit_of(ps: &[(f64, f64)]) -> GroupedProbitFit {
        GroupedProbitFit {
            params: ps.iter().enumerate().map(|(i, &(a, b))| (i + 1, params(a, b))).collect(),
            loglik: -1.0,
            converged: true,
            iterations: 1,
            grad_norm: 0.0,
            n_unlabeled: 0,
        }
    }

    fn grouping_of(labels: &[usize], k: usize) -> Grouping {
        Grouping {
            labels: labels.iter().enumerate().map(|(i, &g)| (i as PersonId, g)).collect(),
            centroids: vec![vec![0.0]; k],
            objective: 0.0,
            k,
        }
    }

    #[test]
    fn asf_single_group_is_probit() {
        let fit = fit_of(&[(0.2, 0.9)]);
        let g = grouping_of(&[1, 1, 1], 1);
        let v = average_structural_function(&fit, &g, 0.7).unwrap();
        assert_eq!(v, crate::normal::cdf(0.2 + 0.9 * 0.7));
        assert!(treatment_effect(&fit, &g, 1.0, 0.0).unwrap() > 0.0);
        assert_eq!(treatment_effect(&fit, &g, 0.3, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn asf_averages_equal_groups() {
        let q2 = crate::normal::quantile(0.2);
        let q6 = crate::normal::quantile(0.6);
        let fit = fit_of(&[(q2, 0.0), (q6, 0.0)]);
        let g = grouping_of(&[1, 2, 1, 2], 2);
        let v = average_structural_function(&fit, &g, 5.0).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
        let w = group_weights(&g).unwrap();
        assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(average_structural_function(&fit, &grouping_of(&[], 1), 0.0).is_err());
    }

    fn zero_panel(rows: &[(PersonId, f64, f64)]) -> PseudoPanel {
        let stated = rows
            .iter()
            .flat_map(|&(id, x, p)| {
                [
                    StatedRecord { person_id: id, scenario_id: 0, x, p_star: p },
                    StatedRecord { person_id: id, scenario_id: 1, x: 0.0, p_star: p },
                ]
            })
            .collect();
        PseudoPanel { stated, actual: Vec::new(), t_count: 2 }
    }

    #[test]
    fn stated_demand_constant_and_flat_limits() {
        let panel = zero_panel(&[(0, -1.0, 0.3), (1, 0.5, 0.3), (2, 2.0, 0.8), (3, 3.0, 0.6)]);
        let g = grouping_of(&[1, 1, 2, 2], 2);
        let at = stated_demand_by_group(&panel, &g, 0.1, 0.5).unwrap();
        assert!((at[&1].unwrap() - 0.3).abs() < 1e-15);
        let flat = stated_demand_by_group(&panel, &g, -40.0, f64::INFINITY).unwrap();
        assert!((flat[&2].unwrap() - 0.7).abs() < 1e-12);
        let far = stated_demand_by_group(&panel, &g, -1.0, 0.2).unwrap();
        assert!(far[&1].is_some() && far[&2].is_none());
        assert!(stated_demand_by_group(&panel, &g, 0.0, 0.0).is_err());
    }

    #[test]
    fn msb_zero_when_fit_matches_stated_demand() {
        // stated demand constant 0.3 and 0.8 in the two groups; probit
        // intercepts chosen to reproduce exactly those levels
        let panel = zero_panel(&[(0, -1.0, 0.3), (1, 0.5, 0.3), (2, 0.0, 0.8), (3, 1.0, 0.8)]);
        let g = grouping_of(&[1, 1, 2, 2], 2);
        let fit = fit_of(&[(crate::normal::quantile(0.3), 0.0), (crate::normal::quantile(0.8), 0.0)]);
        let pts = msb(&fit, &panel, &g, &[-0.5, 0.0, 0.5], 1.0).unwrap();
        for p in pts {
            assert!(p.value.unwrap() < 1e-24, "{p:?}");
        }
        let off = fit_of(&[(crate::normal::quantile(0.5), 0.0), (crate::normal::quantile(0.8), 0.0)]);
        let pts = msb(&off, &panel, &g, &[-1.0], f64::INFINITY).unwrap();
        // equal weights, gaps 0.2 and 0: 0.5 * 0.04
        assert!((pts[0].value.unwrap() - 0.02).abs() < 1e-12);
        let none = msb(&fit, &panel, &g, &[50.0], 0.1).unwrap();
        assert_eq!(none[0].value, None);
        assert_eq!(none[0].groups_dropped, 2);
    }

    #[test]
    fn stated_te_cells_and_off_grid() {
        let mut stated = Vec::new();
        for (i, &(x, p)) in [(0.0, 0.2), (0.0, 0.4), (1.0, 0.7), (1.0, 0.9), (2.0, 1.0)].iter().enumerate() {
            stated.push(StatedRecord { person_id: i as PersonId, scenario_id: 1, x, p_star: p });
        }
        let panel = PseudoPanel { stated, actual: Vec::new(), t_count: 2 };
        let te = stated_te(&panel, 1.0, 0.0, None).unwrap();
        assert!(!te.off_grid);
        assert!((te.value.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(stated_te(&panel, 1.0, 1.0, None).unwrap().value, Some(0.0));
        let mid = stated_te(&panel, 0.5, 0.0, Some(0.2)).unwrap();
        assert!(mid.off_grid);
        // halfway between the 0 and 1 cells: equal weights, the x = 2 cell
        // sits 7.5 bandwidths away
        assert!((mid.value.unwrap() - 0.25).abs() < 1e-9);
        assert_eq!(stated_te(&panel, 9.0, 0.0, Some(0.1)).unwrap().value, None);
    }

    #[test]
    fn naive_te_needs_variation() {
        let recs: Vec<ActualRecord> =
            (0..10).map(|i| ActualRecord { person_id: i, x: 1.0, d: (i % 2) as u8 }).collect();
        assert!(naive_te(&recs, 1.0, 0.0, &ModelSpec::default()).is_err());
        let recs: Vec<ActualRecord> =
            (0..10).map(|i| ActualRecord { person_id: i, x: i as f64, d: (i % 3 == 0) as u8 }).collect();
        let n = naive_te(&recs, 2.0, 2.0, &ModelSpec::default()).unwrap();
        assert_eq!(n.value, 0.0);
    }
}
