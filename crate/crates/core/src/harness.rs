//! Monte Carlo orchestration: simulate, run every estimator, aggregate.

use log::warn;
use rayon::prelude::*;

use crate::dgp::{oracle_asf, simulate_dataset, DgpConfig};
use crate::error::{Error, Result};
use crate::estimands::{naive_te, stated_te, treatment_effect};
use crate::firststep::{estimate_individual_moments, kmeans_partition, select_k};
use crate::model::LinkFunction;
use crate::secondstep::{fit_grouped_probit, ModelSpec};
use crate::seed::derive;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KChoice {
    Fixed(usize),
    Select { k_min: usize, k_max: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationSettings {
    pub eval_points: Vec<f64>,
    pub k: KChoice,
    pub restarts: usize,
    pub link: LinkFunction,
    pub model: ModelSpec,
    /// `(x1, x0)` for every treatment effect.
    pub te_points: (f64, f64),
    /// Latent draws for the oracle treatment effect of a study.
    pub oracle_draws: usize,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        EstimationSettings {
            eval_points: vec![0.0, 1.0],
            k: KChoice::Select { k_min: 2, k_max: 20, gamma: 1.0 },
            restarts: 10,
            link: LinkFunction::default(),
            model: ModelSpec::default(),
            te_points: (1.0, 0.0),
            oracle_draws: 1_000_000,
        }
    }
}

impl EstimationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.eval_points.is_empty() {
            return Err(Error::Argument("eval_points must be nonempty".into()));
        }
        if self.restarts == 0 || self.oracle_draws == 0 {
            return Err(Error::Argument("restarts and oracle_draws must be >= 1".into()));
        }
        match self.k {
            KChoice::Fixed(0) => return Err(Error::Argument("k must be >= 1".into())),
            KChoice::Select { k_min, k_max, gamma } if k_min == 0 || k_min > k_max || !(gamma >= 0.0) => {
                return Err(Error::Argument("need 1 <= k_min <= k_max and gamma >= 0".into()))
            }
            _ => {}
        }
        self.model.validate()
    }

    /// `key=value` lines echoing every setting.
    pub fn to_kv(&self) -> String {
        let k = match self.k {
            KChoice::Fixed(k) => format!("k=fixed:{k}\n"),
            KChoice::Select { k_min, k_max, gamma } => format!("k=select:{k_min}:{k_max}:{gamma}\n"),
        };
        format!(
            "eval_points={}\n{k}restarts={}\nclamp_eps={}\nper_group_slope={}\ntol_grad={}\nmax_iter={}\n\
             separation_bound={}\nte_points={},{}\noracle_draws={}\n",
            crate::config::format_f64_list(&self.eval_points),
            self.restarts,
            self.link.clamp_eps,
            self.model.per_group_slope,
            self.model.tol_grad,
            self.model.max_iter,
            self.model.separation_bound,
            self.te_points.0,
            self.te_points.1,
            self.oracle_draws,
        )
    }
}

/// One Monte Carlo draw. `None` marks an estimator that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub seed: u64,
    pub te_tsgfe: Option<f64>,
    pub te_naive: Option<f64>,
    pub te_stated: Option<f64>,
    pub k_used: Option<usize>,
    pub n_separated_groups: usize,
    pub n_excluded_persons: usize,
    /// First stage error, if any.
    pub failure: Option<String>,
}

impl ReplicationResult {
    pub fn is_complete(&self) -> bool {
        self.te_tsgfe.is_some() && self.te_naive.is_some() && self.te_stated.is_some()
    }
}

/// Simulates one panel and runs the grouped, naive and stated estimators.
/// Stage errors become missing values.
pub fn run_replication(cfg: &DgpConfig, settings: &EstimationSettings, seed: u64) -> ReplicationResult {
    let mut out = ReplicationResult {
        seed,
        te_tsgfe: None,
        te_naive: None,
        te_stated: None,
        k_used: None,
        n_separated_groups: 0,
        n_excluded_persons: 0,
        failure: None,
    };
    let panel = match simulate_dataset(cfg, derive(seed, 0)) {
        Ok((p, _)) => p,
        Err(e) => {
            out.failure = Some(format!("simulate: {e}"));
            return out;
        }
    };
    let (x1, x0) = settings.te_points;

    let note = |stage: &str, e: Error, out: &mut ReplicationResult| {
        if out.failure.is_none() {
            out.failure = Some(format!("{stage}: {e}"));
        }
    };

    match naive_te(&panel.actual, x1, x0, &settings.model) {
        Ok(n) => out.te_naive = Some(n.value),
        Err(e) => note("naive_te", e, &mut out),
    }
    match stated_te(&panel, x1, x0, None) {
        Ok(s) if s.value.is_some() => out.te_stated = s.value,
        Ok(_) => note("stated_te", Error::Estimation("no coverage at the evaluation points".into()), &mut out),
        Err(e) => note("stated_te", e, &mut out),
    }

    let grouped = (|| -> Result<(f64, usize, usize, usize)> {
        let moments = estimate_individual_moments(&panel, &settings.eval_points, &settings.link)?;
        let excluded = moments.iter().filter(|m| !m.fit_ok).count();
        let k_seed = derive(seed, 1);
        let k = match settings.k {
            KChoice::Fixed(k) => k,
            KChoice::Select { k_min, k_max, gamma } => {
                select_k(&moments, k_min, k_max, gamma, settings.restarts, derive(k_seed, 0))?.k
            }
        };
        let grouping = kmeans_partition(&moments, k, settings.restarts, derive(k_seed, 1))?;
        let fit = fit_grouped_probit(&panel.actual, &grouping, &settings.model)?;
        let te = treatment_effect(&fit, &grouping, x1, x0)?;
        Ok((te, k, fit.n_separated(), excluded))
    })();
    match grouped {
        Ok((te, k, sep, excluded)) => {
            out.te_tsgfe = Some(te);
            out.k_used = Some(k);
            out.n_separated_groups = sep;
            out.n_excluded_persons = excluded;
        }
        Err(e) => note("grouped", e, &mut out),
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Tsgfe,
    Naive,
    Stated,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Tsgfe, Estimator::Naive, Estimator::Stated];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Tsgfe => "tsgfe",
            Estimator::Naive => "naive",
            Estimator::Stated => "stated",
        }
    }

    pub fn value(self, r: &ReplicationResult) -> Option<f64> {
        match self {
            Estimator::Tsgfe => r.te_tsgfe,
            Estimator::Naive => r.te_naive,
            Estimator::Stated => r.te_stated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean: f64,
    /// Mean minus the oracle treatment effect.
    pub bias: f64,
    /// Root mean squared deviation from the oracle treatment effect.
    pub rmse: f64,
    pub sd: f64,
    /// Completed-replication estimates in replication order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub estimators: Vec<EstimatorSummary>,
    pub s_requested: usize,
    /// Replications in which every estimator produced a value.
    pub s_completed: usize,
    pub oracle_te: f64,
    pub master_seed: u64,
    pub replications: Vec<ReplicationResult>,
    pub cfg: DgpConfig,
    pub settings: EstimationSettings,
}

impl StudySummary {
    pub fn get(&self, e: Estimator) -> &EstimatorSummary {
        self.estimators.iter().find(|s| s.estimator == e).expect("all estimators summarized")
    }
}

/// Oracle treatment effect at the settings' evaluation points. Both ASF
/// values share their draws.
pub fn oracle_te(cfg: &DgpConfig, settings: &EstimationSettings, seed: u64) -> Result<f64> {
    let (x1, x0) = settings.te_points;
    Ok(oracle_asf(cfg, x1, settings.oracle_draws, seed)? - oracle_asf(cfg, x0, settings.oracle_draws, seed)?)
}

/// Runs `s` replications with seeds `derive(master_seed, i)` on a pool of
/// `parallelism` threads. Aggregation follows replication order, so the
/// summary does not depend on the thread count.
pub fn run_study(
    cfg: &DgpConfig,
    settings: &EstimationSettings,
    s: usize,
    master_seed: u64,
    parallelism: usize,
) -> Result<StudySummary> {
    if s == 0 {
        return Err(Error::Argument("s must be >= 1".into()));
    }
    if parallelism == 0 {
        return Err(Error::Argument("parallelism must be >= 1".into()));
    }
    cfg.validate()?;
    settings.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let (replications, oracle) = pool.install(|| {
        let reps: Vec<ReplicationResult> =
            (0..s).into_par_iter().map(|i| run_replication(cfg, settings, derive(master_seed, i as u64))).collect();
        (reps, oracle_te(cfg, settings, derive(master_seed, u64::MAX)))
    });
    let oracle = oracle?;

    let complete: Vec<&ReplicationResult> = replications.iter().filter(|r| r.is_complete()).collect();
    let failed = s - complete.len();
    if failed * 20 > s {
        warn!("{failed} of {s} replications failed and are excluded from the summary");
    }
    let estimators = Estimator::ALL
        .iter()
        .map(|&e| {
            let values: Vec<f64> = complete.iter().map(|r| e.value(r).expect("complete")).collect();
            summarize(e, values, oracle)
        })
        .collect();
    Ok(StudySummary {
        estimators,
        s_requested: s,
        s_completed: complete.len(),
        oracle_te: oracle,
        master_seed,
        replications,
        cfg: cfg.clone(),
        settings: settings.clone(),
    })
}

fn summarize(estimator: Estimator, values: Vec<f64>, oracle: f64) -> EstimatorSummary {
    let n = values.len() as f64;
    let (mean, rmse, sd) = if values.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = values.iter().sum::<f64>() / n;
        let mse = values.iter().map(|v| (v - oracle).powi(2)).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, mse.sqrt(), var.sqrt())
    };
    EstimatorSummary { estimator, mean, bias: mean - oracle, rmse, sd, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Underflow,
    Bin,
    Overflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub estimator: Estimator,
    pub kind: BinKind,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `count / (n * width)` for regular bins, `count / n` otherwise.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub rows: Vec<DensityRow>,
    /// Some estimator has all its mass outside the range.
    pub all_out_of_range: bool,
}

pub const DEFAULT_DENSITY_BINS: usize = 60;
pub const DEFAULT_DENSITY_RANGE: (f64, f64) = (0.0, 0.8);

/// Histogram of each estimator's estimates on a common grid of `bins` equal
/// bins over `range`, with underflow and overflow rows. The right edge
/// belongs to the last bin.
pub fn emit_density(summary: &StudySummary, bins: usize, range: (f64, f64)) -> Result<DensityTable> {
    if bins < 2 {
        return Err(Error::Argument("bins must be >= 2".into()));
    }
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!("invalid density range ({lo}, {hi})")));
    }
    if summary.s_completed == 0 {
        return Err(Error::Estimation("study has no completed replications".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut rows = Vec::new();
    let mut all_out = false;
    for est in &summary.estimators {
        let n = est.values.len();
        let mut counts = vec![0usize; bins];
        let (mut under, mut over) = (0, 0);
        for &v in &est.values {
            if v < lo {
                under += 1;
            } else if v > hi {
                over += 1;
            } else {
                counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
        }
        all_out |= under + over == n;
        let nf = n as f64;
        rows.push(DensityRow {
            estimator: est.estimator,
            kind: BinKind::Underflow,
            lo: f64::NEG_INFINITY,
            hi: lo,
            count: under,
            density: under as f64 / nf,
        });
        for (b, &c) in counts.iter().enumerate() {
            rows.push(DensityRow {
                estimator: est.estimator,
                kind: BinKind::Bin,
                lo: lo + b as f64 * width,
                hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
                count: c,
                density: c as f64 / (nf * width),
            });
        }
        rows.push(DensityRow {
            estimator: est.estimator,
            kind: BinKind::Overflow,
            lo: hi,
            hi: f64::INFINITY,
            count: over,
            density: over as f64 / nf,
        });
    }
    if all_out {
        warn!("density: all estimates of some estimator fall outside [{lo}, {hi}]");
    }
    Ok(DensityTable { rows, all_out_of_range: all_out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary_of(values: Vec<f64>) -> StudySummary {
        let n = values.len();
        StudySummary {
            estimators: vec![summarize(Estimator::Tsgfe, values, 0.0)],
            s_requested: n,
            s_completed: n,
            oracle_te: 0.0,
            master_seed: 0,
            replications: Vec::new(),
            cfg: DgpConfig::baseline(),
            settings: EstimationSettings::default(),
        }
    }

    #[test]
    fn constant_estimates_fill_one_bin() {
        let t = emit_density(&summary_of(vec![0.27; 7]), 60, (0.0, 0.8)).unwrap();
        let nonzero: Vec<_> = t.rows.iter().filter(|r| r.count > 0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!(nonzero[0].lo <= 0.27 && 0.27 < nonzero[0].hi);
        assert_eq!(nonzero[0].count, 7);
        assert!(!t.all_out_of_range);
    }

    #[test]
    fn out_of_range_mass_goes_to_overflow_rows() {
        let t = emit_density(&summary_of(vec![-1.0, 2.0, 3.0]), 4, (0.0, 0.8)).unwrap();
        assert!(t.all_out_of_range);
        assert_eq!(t.rows.first().unwrap().count, 1);
        assert_eq!(t.rows.last().unwrap().count, 2);
        assert_eq!(t.rows.iter().map(|r| r.count).sum::<usize>(), 3);
        let edge = emit_density(&summary_of(vec![0.8, 0.0]), 4, (0.0, 0.8)).unwrap();
        assert_eq!(edge.rows[1].count, 1);
        assert_eq!(edge.rows[4].count, 1);
    }

    #[test]
    fn density_preconditions() {
        assert!(emit_density(&summary_of(vec![0.1]), 1, (0.0, 0.8)).is_err());
        assert!(emit_density(&summary_of(Vec::new()), 10, (0.0, 0.8)).is_err());
    }

    #[test]
    fn summary_moments() {
        let s = summarize(Estimator::Naive, vec![0.1, 0.3], 0.25);
        assert!((s.mean - 0.2).abs() < 1e-15);
        assert!((s.bias + 0.05).abs() < 1e-15);
        assert!((s.rmse - ((0.15f64.powi(2) + 0.05f64.powi(2)) / 2.0).sqrt()).abs() < 1e-15);
        assert!((s.sd - 0.1).abs() < 1e-15);
    }
}
