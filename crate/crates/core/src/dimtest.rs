//! Diagnostics for the dimension of unobserved heterogeneity.
//!
//! Under one-dimensional heterogeneity and no measurement error every
//! person keeps the same within-cell rank of `p*` across scenarios. The KS
//! variant compares the joint law of the two within-cell ranks with the
//! comonotone bound. Its null distribution hands each cell's observed ranks
//! out along a uniformly random common latent order, which is exact when
//! scenario attributes are drawn independently of the latent types and `p*`
//! is non-decreasing in the latent type, ties included. The spread variant
//! measures how far `P_2` is from a monotone function of `P_1` within
//! `(x_2, x_1)` cells.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::quantile_sorted;
use crate::model::{PersonId, PseudoPanel};
use crate::seed::{derive, rng};

pub const MIN_CELL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimTestVariant {
    RankInvarianceKs,
    QuantileSpread,
}

impl DimTestVariant {
    pub fn name(self) -> &'static str {
        match self {
            DimTestVariant::RankInvarianceKs => "rank_invariance_ks",
            DimTestVariant::QuantileSpread => "quantile_spread",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub variant: DimTestVariant,
    /// Persons entering the statistic after thin cells are dropped.
    pub n_effective: usize,
    pub reject_at_05: bool,
    pub cells_used: usize,
    pub cells_excluded: usize,
    /// Caveat on interpretation, if any.
    pub note: Option<&'static str>,
}

impl DimTestResult {
    fn new(variant: DimTestVariant, statistic: f64, p_value: f64, n_effective: usize, cells: (usize, usize)) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        DimTestResult {
            statistic,
            p_value,
            variant,
            n_effective,
            reject_at_05: p_value < 0.05,
            cells_used: cells.0,
            cells_excluded: cells.1,
            note: match variant {
                DimTestVariant::RankInvarianceKs => None,
                DimTestVariant::QuantileSpread => Some(
                    "conservative under measurement error: noise inflates the spread under H0; \
                     cells are (x2, x1) grid pairs with monotone conditioning on P1",
                ),
            },
        }
    }
}

type CellKey = i64;

fn cell_key(x: f64) -> CellKey {
    (x * 1e9).round() as CellKey
}

/// Stated probabilities closer than this are tied.
pub const TIE_TOL: f64 = 1e-12;

/// Replaces each value by the smallest member of its chain of neighbours
/// closer than `TIE_TOL`, so round-off does not create spurious ranks.
fn snap_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = values.to_vec();
    let mut rep = f64::NAN;
    let mut prev = f64::NAN;
    for i in order {
        let v = values[i];
        if !(v - prev <= TIE_TOL) {
            rep = v;
        }
        out[i] = rep;
        prev = v;
    }
    out
}

/// `(person, x_t1, p_t1, x_t2, p_t2)` for persons observed in both scenarios,
/// in person-id order, with near-equal probabilities snapped to ties.
fn paired(panel: &PseudoPanel, t1: u32, t2: u32) -> Result<Vec<(PersonId, f64, f64, f64, f64)>> {
    let mut a: BTreeMap<PersonId, (f64, f64)> = BTreeMap::new();
    let mut b: BTreeMap<PersonId, (f64, f64)> = BTreeMap::new();
    for r in &panel.stated {
        if r.scenario_id == t1 {
            a.insert(r.person_id, (r.x, r.p_star));
        }
        if r.scenario_id == t2 {
            b.insert(r.person_id, (r.x, r.p_star));
        }
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument(format!("scenarios {t1} and {t2} must both be present")));
    }
    let mut rows: Vec<_> =
        a.into_iter().filter_map(|(id, (x1, p1))| b.get(&id).map(|&(x2, p2)| (id, x1, p1, x2, p2))).collect();
    let p1 = snap_ties(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    let p2 = snap_ties(&rows.iter().map(|r| r.4).collect::<Vec<_>>());
    for (r, (a, b)) in rows.iter_mut().zip(p1.into_iter().zip(p2)) {
        r.2 = a;
        r.4 = b;
    }
    Ok(rows)
}

/// Normalized mid-ranks `(rank - 0.5) / n` of `values` within each cell.
fn cell_mid_ranks(cells: &[CellKey], values: &[f64]) -> Vec<f64> {
    let mut by_cell: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cells.iter().enumerate() {
        by_cell.entry(c).or_default().push(i);
    }
    let mut out = vec![0.0; values.len()];
    for idx in by_cell.into_values() {
        let mut order = idx.clone();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let n = order.len() as f64;
        let mut s = 0;
        while s < order.len() {
            let mut e = s + 1;
            while e < order.len() && values[order[e]] == values[order[s]] {
                e += 1;
            }
            // 1-based ranks s+1..=e share their average
            let mid = (s + e + 1) as f64 / 2.0;
            for &i in &order[s..e] {
                out[i] = (mid - 0.5) / n;
            }
            s = e;
        }
    }
    out
}

/// Each cell's multiset of `observed` ranks handed out in increasing `key`
/// order: the ranks a non-decreasing function of `key` would produce with
/// the observed tie pattern.
fn ranks_in_key_order(cells: &[CellKey], observed: &[f64], key: &[f64]) -> Vec<f64> {
    let mut by_cell: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cells.iter().enumerate() {
        by_cell.entry(c).or_default().push(i);
    }
    let mut out = vec![0.0; observed.len()];
    for idx in by_cell.into_values() {
        let mut values: Vec<f64> = idx.iter().map(|&i| observed[i]).collect();
        values.sort_by(f64::total_cmp);
        let mut order = idx;
        order.sort_by(|&i, &j| key[i].total_cmp(&key[j]));
        for (i, v) in order.into_iter().zip(values) {
            out[i] = v;
        }
    }
    out
}

/// `sup_u [min(F1(u), F2(u)) - C(u, u)]` with empirical marginals and
/// diagonal of the empirical copula of `(u1, u2)`.
pub fn diagonal_ks(u1: &[f64], u2: &[f64]) -> f64 {
    let n = u1.len();
    if n == 0 {
        return 0.0;
    }
    let mut a = u1.to_vec();
    let mut b = u2.to_vec();
    let mut m: Vec<f64> = u1.iter().zip(u2).map(|(x, y)| x.max(*y)).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    m.sort_by(f64::total_cmp);
    let mut points: Vec<f64> = a.iter().chain(&b).copied().collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let (mut ia, mut ib, mut im) = (0, 0, 0);
    let mut best = 0.0f64;
    for u in points {
        while ia < n && a[ia] <= u {
            ia += 1;
        }
        while ib < n && b[ib] <= u {
            ib += 1;
        }
        while im < n && m[im] <= u {
            im += 1;
        }
        best = best.max((ia.min(ib) - im) as f64 / n as f64);
    }
    best
}

/// Keeps persons whose cells in both scenarios hold at least `MIN_CELL`
/// persons. Returns kept indices and `(cells used, cells excluded)`.
fn thin_filter(c1: &[CellKey], c2: &[CellKey]) -> (Vec<usize>, (usize, usize)) {
    let count = |cs: &[CellKey]| {
        let mut m: BTreeMap<CellKey, usize> = BTreeMap::new();
        for &c in cs {
            *m.entry(c).or_default() += 1;
        }
        m
    };
    let (n1, n2) = (count(c1), count(c2));
    let thin = n1.values().chain(n2.values()).filter(|&&c| c < MIN_CELL).count();
    let used = n1.len() + n2.len() - thin;
    let keep = (0..c1.len()).filter(|&i| n1[&c1[i]] >= MIN_CELL && n2[&c2[i]] >= MIN_CELL).collect();
    (keep, (used, thin))
}

/// Rank invariance test between scenarios `t1` and `t2` with `n_perm`
/// draws from the common-latent-order null.
pub fn rank_invariance_test(panel: &PseudoPanel, t1: u32, t2: u32, n_perm: usize, seed: u64) -> Result<DimTestResult> {
    if n_perm == 0 {
        return Err(Error::Argument("n_perm must be >= 1".into()));
    }
    let rows = paired(panel, t1, t2)?;
    let variant = DimTestVariant::RankInvarianceKs;
    if t1 == t2 {
        return Ok(DimTestResult::new(variant, 0.0, 1.0, rows.len(), (0, 0)));
    }
    let c1: Vec<CellKey> = rows.iter().map(|r| cell_key(r.1)).collect();
    let c2: Vec<CellKey> = rows.iter().map(|r| cell_key(r.3)).collect();
    let (keep, cells) = thin_filter(&c1, &c2);
    if cells.1 > 0 {
        warn!("rank invariance: {} cells with fewer than {MIN_CELL} persons excluded", cells.1);
    }
    if keep.is_empty() {
        return Err(Error::Estimation("rank invariance: every cell has fewer than 10 persons".into()));
    }
    let c1: Vec<CellKey> = keep.iter().map(|&i| c1[i]).collect();
    let c2: Vec<CellKey> = keep.iter().map(|&i| c2[i]).collect();
    let p1: Vec<f64> = keep.iter().map(|&i| rows[i].2).collect();
    let p2: Vec<f64> = keep.iter().map(|&i| rows[i].4).collect();
    let (u1, u2) = (cell_mid_ranks(&c1, &p1), cell_mid_ranks(&c2, &p2));
    let stat = diagonal_ks(&u1, &u2);

    let (above, tied) = (0..n_perm)
        .into_par_iter()
        .map(|b| {
            let mut order: Vec<f64> = (0..keep.len()).map(|i| i as f64).collect();
            order.shuffle(&mut rng(derive(seed, b as u64)));
            let s = diagonal_ks(&ranks_in_key_order(&c1, &u1, &order), &ranks_in_key_order(&c2, &u2, &order));
            if (s - stat).abs() <= 1e-12 {
                (0usize, 1usize)
            } else {
                (usize::from(s > stat), 0)
            }
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    // ties with the observed statistic are broken at random so the level is
    // exact despite the lattice-valued statistic
    let w: f64 = rng(derive(seed, u64::MAX)).random();
    let p = (above as f64 + w * (tied + 1) as f64) / (n_perm + 1) as f64;
    Ok(DimTestResult::new(variant, stat, p, keep.len(), cells))
}

/// Least-squares isotonic (non-decreasing) fit of `y` on `x`; tied `x`
/// share a fitted value. Returns fitted values in input order.
pub fn isotonic_fit(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    // blocks: (sum, weight, members)
    let mut blocks: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    let mut s = 0;
    while s < order.len() {
        let mut e = s + 1;
        while e < order.len() && x[order[e]] == x[order[s]] {
            e += 1;
        }
        let members = order[s..e].to_vec();
        let sum = members.iter().map(|&i| y[i]).sum();
        blocks.push((sum, (e - s) as f64, members));
        while blocks.len() >= 2 {
            let l = blocks.len();
            if blocks[l - 2].0 / blocks[l - 2].1 <= blocks[l - 1].0 / blocks[l - 1].1 {
                break;
            }
            let last = blocks.pop().expect("len >= 2");
            let prev = blocks.last_mut().expect("len >= 1");
            prev.0 += last.0;
            prev.1 += last.1;
            prev.2.extend(last.2);
        }
        s = e;
    }
    let mut fitted = vec![0.0; x.len()];
    for (sum, w, members) in blocks {
        for i in members {
            fitted[i] = sum / w;
        }
    }
    fitted
}

/// Residuals of `y` from the better (smaller SSE) of the increasing and
/// decreasing isotonic fits on `x`.
fn monotone_residuals(x: &[f64], y: &[f64]) -> Vec<f64> {
    let inc = isotonic_fit(x, y);
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    let dec: Vec<f64> = isotonic_fit(x, &neg).into_iter().map(|v| -v).collect();
    let resid = |f: &[f64]| -> Vec<f64> { y.iter().zip(f).map(|(a, b)| a - b).collect() };
    let (ri, rd) = (resid(&inc), resid(&dec));
    let sse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    if sse(&rd) < sse(&ri) {
        rd
    } else {
        ri
    }
}

fn cell_spread(p1: &[f64], p2: &[f64], taus: (f64, f64)) -> f64 {
    let mut r = monotone_residuals(p1, p2);
    r.sort_by(f64::total_cmp);
    (quantile_sorted(&r, taus.1) - quantile_sorted(&r, taus.0)).max(0.0)
}

fn weighted_spread(cells: &[(Vec<f64>, Vec<f64>)], taus: (f64, f64)) -> f64 {
    let n: usize = cells.iter().map(|c| c.0.len()).sum();
    cells.iter().map(|(a, b)| a.len() as f64 * cell_spread(a, b, taus)).sum::<f64>() / n as f64
}

/// Conditional quantile spread of `P_t2` given `(x_t2, x_t1, P_t1)`,
/// averaged over cells with `n_boot` within-cell bootstrap draws.
pub fn quantile_spread_test(
    panel: &PseudoPanel,
    t1: u32,
    t2: u32,
    taus: (f64, f64),
    n_boot: usize,
    seed: u64,
) -> Result<DimTestResult> {
    if !(taus.0 > 0.0 && taus.0 < taus.1 && taus.1 < 1.0) {
        return Err(Error::Argument(format!("taus must satisfy 0 < a < b < 1, got ({}, {})", taus.0, taus.1)));
    }
    if n_boot == 0 {
        return Err(Error::Argument("n_boot must be >= 1".into()));
    }
    let rows = paired(panel, t1, t2)?;
    let variant = DimTestVariant::QuantileSpread;
    if t1 == t2 {
        return Ok(DimTestResult::new(variant, 0.0, 1.0, rows.len(), (0, 0)));
    }
    let mut by_cell: BTreeMap<(CellKey, CellKey), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = by_cell.entry((cell_key(r.3), cell_key(r.1))).or_default();
        e.0.push(r.2);
        e.1.push(r.4);
    }
    let total = by_cell.len();
    let (thick, thin): (Vec<_>, Vec<_>) = by_cell.into_values().partition(|c| c.0.len() >= MIN_CELL);
    // a constant P_t1 says nothing about the latent rank
    let (cells, flat): (Vec<_>, Vec<_>) = thick.into_iter().partition(|c| c.0.iter().any(|&v| v != c.0[0]));
    let excluded = total - cells.len();
    if !thin.is_empty() {
        warn!("quantile spread: {} cells with fewer than {MIN_CELL} persons excluded", thin.len());
    }
    if !flat.is_empty() {
        warn!("quantile spread: {} cells with constant P{t1} excluded", flat.len());
    }
    if cells.is_empty() {
        return Err(Error::Estimation("quantile spread: no cell with at least 10 persons and varying P1".into()));
    }
    let n_eff = cells.iter().map(|c| c.0.len()).sum();
    let stat = weighted_spread(&cells, taus);

    let at_zero: usize = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut g = rng(derive(seed, b as u64));
            let resampled: Vec<(Vec<f64>, Vec<f64>)> = cells
                .iter()
                .map(|(a, c)| {
                    let m = a.len();
                    (0..m)
                        .map(|_| {
                            let j = g.random_range(0..m);
                            (a[j], c[j])
                        })
                        .unzip()
                })
                .collect();
            usize::from(weighted_spread(&resampled, taus) <= 1e-12)
        })
        .sum();
    let p = (1 + at_zero) as f64 / (n_boot + 1) as f64;
    Ok(DimTestResult::new(variant, stat, p, n_eff, (cells.len(), excluded)))
}
