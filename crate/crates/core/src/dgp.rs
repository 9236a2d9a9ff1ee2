//! Synthetic pseudo-panels and simulation oracles for the true estimands.
//!
//! The latent vector `(X, eta1, eta2, nu)` is jointly normal. The actual
//! choice is `D = 1{s_actual(X, eta) > Phi(nu)}` and stated probabilities
//! follow a log-odds index with additive normal noise on the logit scale:
//!
//! ```text
//! s_actual(x, eta) = a0 + a1 x + a2 eta1 + a3 x eta1 + a_eta2 eta2
//! logit P_it       = c0 + c1 x + c2 eta1 + c3 x eta1 + c_eta2 eta2 + eps_it
//! eps_it           ~ N(0, noise_scale * exp(x))      (variance)
//! ```
//!
//! The defaults (`DgpConfig::baseline`) are the two-dimensional Monte Carlo
//! design used by the CLI and the benches.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{format_f64_list, parse_f64_list, KeyValues};
use crate::error::{Error, Result};
use crate::model::{logistic, ActualRecord, PersonId, PseudoPanel, StatedRecord};
use crate::normal;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    FirstDecimal,
    None,
}

impl Rounding {
    pub fn apply(self, p: f64) -> f64 {
        match self {
            Rounding::FirstDecimal => (p * 10.0).round() / 10.0,
            Rounding::None => p,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rounding::FirstDecimal => "first_decimal",
            Rounding::None => "none",
        }
    }
}

/// How the actual-choice index is compared with the resolved uncertainty
/// `Phi(nu)`. `Identity` compares the raw index; `Logistic` compares
/// `logistic(index)`, which makes actual and stated demand coincide when the
/// two indices share coefficients and `nu` is independent of `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActualTransform {
    Identity,
    Logistic,
}

impl ActualTransform {
    fn apply(self, s: f64) -> f64 {
        match self {
            ActualTransform::Identity => s,
            ActualTransform::Logistic => logistic(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActualTransform::Identity => "identity",
            ActualTransform::Logistic => "logistic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    /// Mean of `(X, eta1, eta2, nu)`.
    pub mean: [f64; 4],
    /// Covariance of `(X, eta1, eta2, nu)`.
    pub cov: [[f64; 4]; 4],
    /// Intercept, X, eta1 and X*eta1 coefficients of the actual index.
    pub actual_coef: [f64; 4],
    pub actual_eta2_coef: f64,
    pub actual_transform: ActualTransform,
    /// Same roles for the stated log-odds index.
    pub stated_coef: [f64; 4],
    pub stated_eta2_coef: f64,
    /// Variance of the logit-scale noise is `noise_scale * exp(x)`.
    pub noise_scale: f64,
    /// Support of the scenario attribute for scenarios `1..=t_scenarios`.
    pub scenario_grid: Vec<f64>,
    pub t_scenarios: u32,
    pub n: usize,
    pub rounding: Rounding,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

/// The 11 equally spaced points -2, -1.6, ..., 2.
pub fn default_scenario_grid() -> Vec<f64> {
    (0..11).map(|k| -2.0 + 0.4 * k as f64).map(|x| (x * 10.0_f64).round() / 10.0).collect()
}

impl DgpConfig {
    pub fn baseline() -> Self {
        DgpConfig {
            mean: [1.0, 0.0, 0.0, 0.0],
            cov: [[1.0, 0.1, 0.2, 0.0], [0.1, 1.0, 0.1, 0.05], [0.2, 0.1, 1.0, 0.05], [0.0, 0.05, 0.05, 1.0]],
            actual_coef: [0.0, 1.0, 0.5, 0.1],
            actual_eta2_coef: 1.0,
            actual_transform: ActualTransform::Identity,
            stated_coef: [0.1, 0.8, 0.6, 0.3],
            stated_eta2_coef: 1.0,
            noise_scale: 0.05,
            scenario_grid: default_scenario_grid(),
            t_scenarios: 10,
            n: 1000,
            rounding: Rounding::FirstDecimal,
        }
    }

    /// Baseline design restricted to one heterogeneity dimension: eta2 is
    /// degenerate at zero and carries no weight in either index.
    pub fn one_dimensional() -> Self {
        let mut cfg = Self::baseline();
        for i in 0..4 {
            cfg.cov[2][i] = 0.0;
            cfg.cov[i][2] = 0.0;
        }
        cfg.actual_eta2_coef = 0.0;
        cfg.stated_eta2_coef = 0.0;
        cfg
    }

    /// Stated and actual demand coincide: shared index coefficients, a
    /// logistic actual transform, `nu` independent of everything, no noise
    /// and no rounding.
    pub fn coincident() -> Self {
        let mut cfg = Self::baseline();
        cfg.actual_coef = cfg.stated_coef;
        cfg.actual_eta2_coef = cfg.stated_eta2_coef;
        cfg.actual_transform = ActualTransform::Logistic;
        for i in 0..3 {
            cfg.cov[3][i] = 0.0;
            cfg.cov[i][3] = 0.0;
        }
        cfg.noise_scale = 0.0;
        cfg.rounding = Rounding::None;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.t_scenarios == 0 {
            return Err(Error::Config("t_scenarios must be at least 1".into()));
        }
        if self.scenario_grid.is_empty() || self.scenario_grid.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("scenario_grid must be a nonempty list of finite values".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        let scalars = self
            .mean
            .iter()
            .chain(self.actual_coef.iter())
            .chain(self.stated_coef.iter())
            .chain([&self.actual_eta2_coef, &self.stated_eta2_coef]);
        if scalars.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mean and coefficients must be finite".into()));
        }
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (self.cov[i][j], self.cov[j][i]);
                if !a.is_finite() {
                    return Err(Error::Config(format!("cov.{}.{} is not finite", i + 1, j + 1)));
                }
                if (a - b).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "cov is not symmetric: cov.{}.{}={a} but cov.{}.{}={b}",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        let m = Matrix4::from_fn(|i, j| self.cov[i][j]);
        let eig = SymmetricEigen::new(m);
        let scale = self.cov.iter().enumerate().map(|(i, r)| r[i].abs()).fold(1.0, f64::max);
        if let Some(&bad) = eig.eigenvalues.iter().find(|&&e| e < -1e-10 * scale) {
            return Err(Error::Config(format!("cov is not positive semi-definite: eigenvalue {bad:.6e} < 0")));
        }
        Ok(())
    }

    /// Lower-triangular factor `L` with `L L' = cov`, tolerating singular
    /// (semi-definite) covariance by zeroing degenerate columns.
    pub fn cholesky(&self) -> Result<[[f64; 4]; 4]> {
        self.validate()?;
        Ok(psd_cholesky(&self.cov))
    }

    pub fn actual_index(&self, x: f64, eta1: f64, eta2: f64) -> f64 {
        let c = &self.actual_coef;
        let s = c[0] + c[1] * x + c[2] * eta1 + c[3] * x * eta1 + self.actual_eta2_coef * eta2;
        self.actual_transform.apply(s)
    }

    pub fn stated_index(&self, x: f64, eta1: f64, eta2: f64) -> f64 {
        let c = &self.stated_coef;
        c[0] + c[1] * x + c[2] * eta1 + c[3] * x * eta1 + self.stated_eta2_coef * eta2
    }

    /// Stated demand m(x, eta).
    pub fn stated_demand(&self, x: f64, eta1: f64, eta2: f64) -> f64 {
        logistic(self.stated_index(x, eta1, eta2))
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = Self::baseline();
        if let Some(v) = kv.take_parsed("n")? {
            cfg.n = v;
        }
        if let Some(v) = kv.take_parsed("t_scenarios")? {
            cfg.t_scenarios = v;
        }
        if let Some(v) = kv.take_parsed("noise_scale")? {
            cfg.noise_scale = v;
        }
        if let Some(v) = kv.take_parsed("actual_eta2_coef")? {
            cfg.actual_eta2_coef = v;
        }
        if let Some(v) = kv.take_parsed("stated_eta2_coef")? {
            cfg.stated_eta2_coef = v;
        }
        if let Some(v) = kv.take("rounding") {
            cfg.rounding = match v.as_str() {
                "first_decimal" => Rounding::FirstDecimal,
                "none" => Rounding::None,
                other => return Err(Error::Config(format!("rounding: unknown value {other:?}"))),
            };
        }
        if let Some(v) = kv.take("actual_transform") {
            cfg.actual_transform = match v.as_str() {
                "identity" => ActualTransform::Identity,
                "logistic" => ActualTransform::Logistic,
                other => return Err(Error::Config(format!("actual_transform: unknown value {other:?}"))),
            };
        }
        if let Some(v) = kv.take("scenario_grid") {
            cfg.scenario_grid = parse_f64_list(&v)?;
        }
        for i in 0..4 {
            if let Some(v) = kv.take_parsed(&format!("mean.{}", i + 1))? {
                cfg.mean[i] = v;
            }
            if let Some(v) = kv.take_parsed(&format!("actual_coef.{}", i + 1))? {
                cfg.actual_coef[i] = v;
            }
            if let Some(v) = kv.take_parsed(&format!("stated_coef.{}", i + 1))? {
                cfg.stated_coef[i] = v;
            }
        }
        // Either triangle may be given; a key sets both mirrored entries.
        let mut set = [[false; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                if let Some(v) = kv.take_parsed::<f64>(&format!("cov.{}.{}", i + 1, j + 1))? {
                    if set[j][i] && i != j && cfg.cov[j][i] != v {
                        return Err(Error::Config(format!(
                            "cov.{}.{} and cov.{}.{} disagree",
                            i + 1,
                            j + 1,
                            j + 1,
                            i + 1
                        )));
                    }
                    cfg.cov[i][j] = v;
                    cfg.cov[j][i] = v;
                    set[i][j] = true;
                }
            }
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key=value` rendering; `from_kv(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut line = |k: String, v: String| {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("n".into(), self.n.to_string());
        line("t_scenarios".into(), self.t_scenarios.to_string());
        for i in 0..4 {
            line(format!("mean.{}", i + 1), format!("{}", self.mean[i]));
        }
        for i in 0..4 {
            for j in i..4 {
                line(format!("cov.{}.{}", i + 1, j + 1), format!("{}", self.cov[i][j]));
            }
        }
        for i in 0..4 {
            line(format!("actual_coef.{}", i + 1), format!("{}", self.actual_coef[i]));
        }
        line("actual_eta2_coef".into(), format!("{}", self.actual_eta2_coef));
        line("actual_transform".into(), self.actual_transform.name().into());
        for i in 0..4 {
            line(format!("stated_coef.{}", i + 1), format!("{}", self.stated_coef[i]));
        }
        line("stated_eta2_coef".into(), format!("{}", self.stated_eta2_coef));
        line("noise_scale".into(), format!("{}", self.noise_scale));
        line("scenario_grid".into(), format_f64_list(&self.scenario_grid));
        line("rounding".into(), self.rounding.name().into());
        out
    }
}

pub(crate) fn psd_cholesky(a: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut l = [[0.0; 4]; 4];
    let scale = (0..4).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..4 {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d <= 1e-12 * scale {
            continue;
        }
        let ljj = d.sqrt();
        l[j][j] = ljj;
        for i in (j + 1)..4 {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / ljj;
        }
    }
    l
}

/// One latent draw `(X, eta1, eta2, nu)`.
#[derive(Debug, Clone, Copy)]
struct Latent {
    x: f64,
    eta1: f64,
    eta2: f64,
    nu: f64,
}

fn draw_latent<R: rand::Rng + ?Sized>(rng: &mut R, mean: &[f64; 4], chol: &[[f64; 4]; 4]) -> Latent {
    let z: [f64; 4] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    let mut v = *mean;
    for i in 0..4 {
        for k in 0..=i {
            v[i] += chol[i][k] * z[k];
        }
    }
    Latent { x: v[0], eta1: v[1], eta2: v[2], nu: v[3] }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRecord {
    pub person_id: PersonId,
    pub eta1: f64,
    pub eta2: f64,
    /// Realized resolved uncertainty Phi(nu).
    pub u: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentTruth {
    pub persons: Vec<LatentRecord>,
}

/// Draws a pseudo-panel of `cfg.n` persons with `cfg.t_scenarios + 1`
/// scenarios each. Person ids run from 1 to n.
pub fn simulate_dataset(cfg: &DgpConfig, seed: u64) -> Result<(PseudoPanel, LatentTruth)> {
    let chol = cfg.cholesky()?;
    let mut rng = seed::rng(seed);

    let latents: Vec<Latent> = (0..cfg.n).map(|_| draw_latent(&mut rng, &cfg.mean, &chol)).collect();
    let (x_min, x_max) =
        latents.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(l.x), hi.max(l.x)));

    let t_count = cfg.t_scenarios + 1;
    let mut stated = Vec::with_capacity(cfg.n * t_count as usize);
    let mut actual = Vec::with_capacity(cfg.n);
    let mut truth = LatentTruth { persons: Vec::with_capacity(cfg.n) };

    for (i, l) in latents.iter().enumerate() {
        let person_id = i as PersonId + 1;
        let u = normal::cdf(l.nu);
        let d = u8::from(cfg.actual_index(l.x, l.eta1, l.eta2) > u);
        actual.push(ActualRecord { person_id, x: l.x, d });
        truth.persons.push(LatentRecord { person_id, eta1: l.eta1, eta2: l.eta2, u });

        for t in 0..t_count {
            let x = if t == 0 {
                let w: f64 = rng.random();
                x_min + w * (x_max - x_min)
            } else {
                cfg.scenario_grid[rng.random_range(0..cfg.scenario_grid.len())]
            };
            let z: f64 = rng.sample(StandardNormal);
            let eps = z * (cfg.noise_scale * x.exp()).sqrt();
            let p = logistic(cfg.stated_index(x, l.eta1, l.eta2) + eps);
            stated.push(StatedRecord { person_id, scenario_id: t, x, p_star: cfg.rounding.apply(p) });
        }
    }

    Ok((PseudoPanel { stated, actual, t_count }, truth))
}

const ORACLE_CHUNK: usize = 1 << 16;

/// Sums `f` over `n_draws` latent draws, in fixed-size chunks with derived
/// seeds so the result does not depend on the thread count.
fn oracle_sum<F>(cfg: &DgpConfig, n_draws: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&Latent) -> f64 + Sync,
{
    if n_draws == 0 {
        return Err(Error::Argument("n_draws must be at least 1".into()));
    }
    let chol = cfg.cholesky()?;
    let n_chunks = n_draws.div_ceil(ORACLE_CHUNK);
    let partial: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed::derive(seed, c as u64));
            let len = ORACLE_CHUNK.min(n_draws - c * ORACLE_CHUNK);
            (0..len).map(|_| f(&draw_latent(&mut rng, &cfg.mean, &chol))).sum::<f64>()
        })
        .collect();
    Ok(partial.iter().sum())
}

/// Simulated average structural function: the share of draws of
/// `(eta1, eta2, nu)` with `s_actual(x, eta) > Phi(nu)`, with X held at `x`.
pub fn oracle_asf(cfg: &DgpConfig, x: f64, n_draws: usize, seed: u64) -> Result<f64> {
    let hits = oracle_sum(cfg, n_draws, seed, |l| {
        f64::from(u8::from(cfg.actual_index(x, l.eta1, l.eta2) > normal::cdf(l.nu)))
    })?;
    Ok(hits / n_draws as f64)
}

/// Simulated treatment effect on the stated scale,
/// `E[m(x1, eta) - m(x0, eta)]`.
pub fn oracle_stated_te(cfg: &DgpConfig, x1: f64, x0: f64, n_draws: usize, seed: u64) -> Result<f64> {
    let total = oracle_sum(cfg, n_draws, seed, |l| {
        cfg.stated_demand(x1, l.eta1, l.eta2) - cfg.stated_demand(x0, l.eta1, l.eta2)
    })?;
    Ok(total / n_draws as f64)
}

/// Conditional law of `nu` given `(eta1, eta2)`: `nu | eta ~ N(m0 + b1 eta1 + b2 eta2, s^2)`.
#[derive(Debug, Clone, Copy)]
pub struct NuGivenEta {
    pub intercept: f64,
    pub b1: f64,
    pub b2: f64,
    pub sd: f64,
}

impl NuGivenEta {
    pub fn new(cfg: &DgpConfig) -> Self {
        let s_ee = DMatrix::from_fn(2, 2, |i, j| cfg.cov[i + 1][j + 1]);
        let s_ne = DVector::from_fn(2, |i, _| cfg.cov[3][i + 1]);
        let pinv = s_ee.clone().pseudo_inverse(1e-12).expect("2x2 pseudo-inverse");
        let b = &pinv * &s_ne;
        let var = (cfg.cov[3][3] - s_ne.dot(&b)).max(0.0);
        let intercept = cfg.mean[3] - b[0] * cfg.mean[1] - b[1] * cfg.mean[2];
        NuGivenEta { intercept, b1: b[0], b2: b[1], sd: var.sqrt() }
    }
}

/// Objective demand m^r(x, eta) = P(s_actual(x, eta) > Phi(nu) | eta),
/// evaluated in closed form from the conditional normal law of `nu`.
pub fn actual_demand(cfg: &DgpConfig, nu_law: &NuGivenEta, x: f64, eta1: f64, eta2: f64) -> f64 {
    let s = cfg.actual_index(x, eta1, eta2);
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let mu = nu_law.intercept + nu_law.b1 * eta1 + nu_law.b2 * eta2;
    let thr = normal::quantile(s);
    if nu_law.sd == 0.0 {
        return f64::from(u8::from(mu < thr));
    }
    normal::cdf((thr - mu) / nu_law.sd)
}

/// Simulated mean-squared bias `E[(m^r(X, eta) - m(X, eta))^2 | X = x]`,
/// drawing `eta` from its conditional law given `X = x`.
pub fn oracle_msb(cfg: &DgpConfig, x: f64, n_draws: usize, seed: u64) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::Argument("n_draws must be at least 1".into()));
    }
    cfg.validate()?;
    let nu_law = NuGivenEta::new(cfg);
    // eta | X = x
    let var_x = cfg.cov[0][0];
    let (mut m, mut c) = ([cfg.mean[1], cfg.mean[2]], [[0.0; 2]; 2]);
    for i in 0..2 {
        if var_x > 0.0 {
            m[i] += cfg.cov[i + 1][0] / var_x * (x - cfg.mean[0]);
        }
        for j in 0..2 {
            c[i][j] =
                cfg.cov[i + 1][j + 1] - if var_x > 0.0 { cfg.cov[i + 1][0] * cfg.cov[j + 1][0] / var_x } else { 0.0 };
        }
    }
    let l11 = c[0][0].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { c[1][0] / l11 } else { 0.0 };
    let l22 = (c[1][1] - l21 * l21).max(0.0).sqrt();

    let n_chunks = n_draws.div_ceil(ORACLE_CHUNK);
    let total: f64 = (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed::rng(seed::derive(seed, k as u64));
            let len = ORACLE_CHUNK.min(n_draws - k * ORACLE_CHUNK);
            (0..len)
                .map(|_| {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    let e1 = m[0] + l11 * z1;
                    let e2 = m[1] + l21 * z1 + l22 * z2;
                    let gap = actual_demand(cfg, &nu_law, x, e1, e2) - cfg.stated_demand(x, e1, e2);
                    gap * gap
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n_draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_eleven_symmetric_points() {
        let g = default_scenario_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], -2.0);
        assert_eq!(g[5], 0.0);
        assert_eq!(g[10], 2.0);
        assert_eq!(g[3], -0.8);
    }

    #[test]
    fn baseline_output_shape_and_rounding() {
        let mut cfg = DgpConfig::baseline();
        cfg.n = 200;
        let (panel, truth) = simulate_dataset(&cfg, 3).unwrap();
        assert_eq!(panel.actual.len(), 200);
        assert_eq!(truth.persons.len(), 200);
        assert_eq!(panel.t_count, 11);
        assert_eq!(panel.stated.len(), 200 * 11);
        for r in &panel.stated {
            let tenths = r.p_star * 10.0;
            assert!((tenths - tenths.round()).abs() < 1e-9 && (0.0..=1.0).contains(&r.p_star));
            if r.scenario_id > 0 {
                assert!(cfg.scenario_grid.contains(&r.x));
            }
        }
        assert!(crate::model::validate_panel(&panel).is_ok());
    }

    #[test]
    fn degenerate_covariance_gives_identical_people() {
        let mut cfg = DgpConfig::baseline();
        cfg.cov = [[0.0; 4]; 4];
        cfg.noise_scale = 0.0;
        cfg.n = 50;
        let (panel, truth) = simulate_dataset(&cfg, 11).unwrap();
        for p in &truth.persons {
            assert_eq!((p.eta1, p.eta2, p.u), (0.0, 0.0, 0.5));
        }
        let mut by_x = std::collections::HashMap::new();
        for r in panel.stated.iter().filter(|r| r.scenario_id > 0) {
            let prev = by_x.entry(r.x.to_bits()).or_insert(r.p_star);
            assert_eq!(*prev, r.p_star);
        }
    }

    #[test]
    fn same_seed_same_panel() {
        let mut cfg = DgpConfig::baseline();
        cfg.n = 100;
        let a = simulate_dataset(&cfg, 99).unwrap();
        let b = simulate_dataset(&cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate_dataset(&cfg, 100).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn non_psd_covariance_names_eigenvalue() {
        let mut cfg = DgpConfig::baseline();
        cfg.cov[0][1] = 2.0;
        cfg.cov[1][0] = 2.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("eigenvalue") && err.contains("-1."), "{err}");
        assert!(simulate_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let cfg = DgpConfig::baseline();
        assert_eq!(DgpConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let custom = DgpConfig::from_kv("n=7\ncov.2.1=0.3\nrounding=none\nscenario_grid=0,1\n").unwrap();
        assert_eq!(custom.n, 7);
        assert_eq!(custom.cov[0][1], 0.3);
        assert_eq!(custom.cov[1][0], 0.3);
        assert_eq!(custom.rounding, Rounding::None);
        assert!(DgpConfig::from_kv("bogus=1").is_err());
        assert!(DgpConfig::from_kv("cov.1.2=0.1\ncov.2.1=0.2").is_err());
        assert!(DgpConfig::from_kv("rounding=third").is_err());
    }

    #[test]
    fn zero_index_gives_half() {
        let mut cfg = DgpConfig::baseline();
        cfg.actual_coef = [0.0; 4];
        cfg.actual_eta2_coef = 0.0;
        for i in 0..3 {
            cfg.cov[3][i] = 0.0;
            cfg.cov[i][3] = 0.0;
        }
        // A raw index of 0 never exceeds Phi(nu) in (0, 1); on the logistic
        // scale it is the median of U.
        cfg.actual_transform = ActualTransform::Logistic;
        for &x in &[-1.0, 0.0, 2.5] {
            let asf = oracle_asf(&cfg, x, 400_000, 5).unwrap();
            assert!((asf - 0.5).abs() < 4.0 * (0.25f64 / 400_000.0).sqrt(), "{asf}");
        }
    }

    #[test]
    fn stated_te_trivial_cases() {
        let cfg = DgpConfig::baseline();
        assert_eq!(oracle_stated_te(&cfg, 0.7, 0.7, 10_000, 1).unwrap(), 0.0);
        let mut flat = cfg.clone();
        flat.stated_coef[1] = 0.0;
        flat.stated_coef[3] = 0.0;
        assert_eq!(oracle_stated_te(&flat, 1.0, -2.0, 10_000, 1).unwrap(), 0.0);
    }

    #[test]
    fn oracle_asf_agrees_with_closed_form_demand() {
        // Indicator average vs. integral of the closed-form conditional demand.
        let cfg = DgpConfig::baseline();
        let law = NuGivenEta::new(&cfg);
        let n = 400_000;
        for &x in &[0.0, 1.0] {
            let sim = oracle_asf(&cfg, x, n, 17).unwrap();
            let chol = cfg.cholesky().unwrap();
            let mut rng = seed::rng(23);
            let closed: f64 = (0..n)
                .map(|_| {
                    let l = draw_latent(&mut rng, &cfg.mean, &chol);
                    actual_demand(&cfg, &law, x, l.eta1, l.eta2)
                })
                .sum::<f64>()
                / n as f64;
            assert!((sim - closed).abs() < 4.0 * (0.25 / n as f64).sqrt() * 1.5, "x={x}: {sim} vs {closed}");
        }
    }

    #[test]
    fn nu_given_eta_baseline() {
        // Omega_{nu,eta} Omega_{eta,eta}^{-1} with Omega_ee = [[1,.1],[.1,1]], Omega_ne = (.05,.05)
        let law = NuGivenEta::new(&DgpConfig::baseline());
        let b = 0.05 / 1.1;
        assert!((law.b1 - b).abs() < 1e-12 && (law.b2 - b).abs() < 1e-12);
        assert!((law.sd - (1.0 - 2.0 * 0.05 * b).sqrt()).abs() < 1e-12);
        let d1 = NuGivenEta::new(&DgpConfig::one_dimensional());
        assert!((d1.b1 - 0.05).abs() < 1e-12 && d1.b2 == 0.0);
    }
}
