//! CSV formats for panels, fits and study outputs, and `.meta` sidecars.
//!
//! Floats are written in Rust's shortest round-trip form so rereading a
//! file reproduces the values exactly and reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dgp::LatentTruth;
use crate::dimtest::DimTestResult;
use crate::error::{Error, Result};
use crate::estimands::EstimandReport;
use crate::firststep::{Grouping, IndividualMoments};
use crate::harness::{BinKind, DensityTable, StudySummary};
use crate::model::{ActualRecord, PersonId, StatedRecord};
use crate::secondstep::GroupedProbitFit;

pub const STATED_HEADER: [&str; 4] = ["person_id", "scenario_id", "x", "p_star"];
pub const ACTUAL_HEADER: [&str; 3] = ["person_id", "x", "d"];
pub const MEMBERSHIP_HEADER: [&str; 2] = ["person_id", "population"];

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn csv_err(p: &Path, message: impl Into<String>) -> Error {
    Error::Csv { path: path_str(p), message: message.into() }
}

fn open_reader(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| Error::Io { path: path_str(path), source })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let got = rdr.headers().map_err(|e| csv_err(path, e.to_string()))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(csv_err(
            path,
            format!("expected header {:?}, found {:?}", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(rdr)
}

fn rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = open_reader(path, header)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

fn field<T: FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| csv_err(path, format!("line {line}: field {name}: cannot parse {raw:?}")))
}

pub fn read_stated(path: &Path) -> Result<Vec<StatedRecord>> {
    rows(path, &STATED_HEADER)?
        .into_iter()
        .map(|(l, r)| {
            Ok(StatedRecord {
                person_id: field(path, l, &r, 0, "person_id")?,
                scenario_id: field(path, l, &r, 1, "scenario_id")?,
                x: field(path, l, &r, 2, "x")?,
                p_star: field(path, l, &r, 3, "p_star")?,
            })
        })
        .collect()
}

pub fn read_actual(path: &Path) -> Result<Vec<ActualRecord>> {
    rows(path, &ACTUAL_HEADER)?
        .into_iter()
        .map(|(l, r)| {
            Ok(ActualRecord {
                person_id: field(path, l, &r, 0, "person_id")?,
                x: field(path, l, &r, 1, "x")?,
                d: field(path, l, &r, 2, "d")?,
            })
        })
        .collect()
}

/// Population label per person for counterfactual comparisons.
pub fn read_membership(path: &Path) -> Result<BTreeMap<PersonId, u32>> {
    let mut out = BTreeMap::new();
    for (l, r) in rows(path, &MEMBERSHIP_HEADER)? {
        let id: PersonId = field(path, l, &r, 0, "person_id")?;
        if out.insert(id, field(path, l, &r, 1, "population")?).is_some() {
            return Err(csv_err(path, format!("line {l}: duplicate person_id {id}")));
        }
    }
    Ok(out)
}

/// Collects rows in memory and writes them in one go.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
        w.write_record(&self.header).map_err(|e| csv_err(path, e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_err(path, e.to_string()))?;
        }
        w.flush().map_err(|source| Error::Io { path: path_str(path), source })
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

pub fn stated_table(stated: &[StatedRecord]) -> Table {
    let mut t = Table::new(&STATED_HEADER);
    for r in stated {
        t.push(vec![r.person_id.to_string(), r.scenario_id.to_string(), f(r.x), f(r.p_star)]);
    }
    t
}

pub fn actual_table(actual: &[ActualRecord]) -> Table {
    let mut t = Table::new(&ACTUAL_HEADER);
    for r in actual {
        t.push(vec![r.person_id.to_string(), f(r.x), r.d.to_string()]);
    }
    t
}

pub fn latent_table(truth: &LatentTruth) -> Table {
    let mut t = Table::new(&["person_id", "eta1", "eta2", "u"]);
    for r in &truth.persons {
        t.push(vec![r.person_id.to_string(), f(r.eta1), f(r.eta2), f(r.u)]);
    }
    t
}

/// `person_id,group,h_1,...,h_d` for every classified person.
pub fn groups_table(g: &Grouping, moments: &[IndividualMoments]) -> Table {
    let d = moments.iter().map(|m| m.h.len()).max().unwrap_or(0);
    let mut header = vec!["person_id".to_string(), "group".to_string()];
    header.extend((1..=d).map(|j| format!("h_{j}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&header_refs);
    let by_id: BTreeMap<PersonId, &IndividualMoments> = moments.iter().map(|m| (m.person_id, m)).collect();
    for (id, k) in &g.labels {
        let mut row = vec![id.to_string(), k.to_string()];
        let h = by_id.get(id).map(|m| m.h.as_slice()).unwrap_or(&[]);
        row.extend((0..d).map(|j| h.get(j).map(|v| f(*v)).unwrap_or_default()));
        t.push(row);
    }
    t
}

pub fn fit_table(fit: &GroupedProbitFit) -> Table {
    let mut t =
        Table::new(&["group", "alpha", "beta", "n_obs", "converged", "separated", "iterations", "grad_norm", "loglik"]);
    for (g, p) in &fit.params {
        t.push(vec![
            g.to_string(),
            f(p.alpha),
            f(p.beta),
            p.n_obs.to_string(),
            p.converged.to_string(),
            p.separated.to_string(),
            p.iterations.to_string(),
            f(p.grad_norm),
            f(p.loglik),
        ]);
    }
    t
}

/// `quantity,x,group_pair,value,flag`; a missing value leaves `value` empty
/// and names the reason in `flag`.
pub fn estimands_table(r: &EstimandReport) -> Table {
    let mut t = Table::new(&["quantity", "x", "group_pair", "value", "flag"]);
    let s = |v: &str| v.to_string();
    for &(x, v) in &r.asf {
        t.push(vec![s("asf"), f(x), String::new(), f(v), String::new()]);
    }
    let te_x = format!("{}|{}", r.te_points.0, r.te_points.1);
    t.push(vec![s("te"), te_x.clone(), String::new(), f(r.te), String::new()]);
    for p in &r.msb {
        let flag = match (p.value, p.groups_dropped) {
            (None, _) => s("no_coverage"),
            (Some(_), 0) => String::new(),
            (Some(_), k) => format!("groups_dropped={k}"),
        };
        t.push(vec![s("msb"), f(p.x), String::new(), opt(p.value), flag]);
    }
    for ((a, b), c) in &r.counterfactuals {
        let flag = if c.uncovered_groups.is_empty() {
            String::new()
        } else {
            format!(
                "uncovered_groups={};covered={}/{}",
                c.uncovered_groups.iter().map(|g| g.to_string()).collect::<Vec<_>>().join("|"),
                c.n_covered,
                c.n_target
            )
        };
        t.push(vec![s("counterfactual"), String::new(), format!("{a}|{b}"), opt(c.value), flag]);
    }
    let naive_flag = if r.naive_te.separated { s("separated") } else { String::new() };
    t.push(vec![s("naive_te"), te_x.clone(), String::new(), f(r.naive_te.value), naive_flag]);
    let stated_flag = match (r.stated_te.value, r.stated_te.off_grid) {
        (None, _) => s("no_coverage"),
        (Some(_), true) => s("off_grid"),
        _ => String::new(),
    };
    t.push(vec![s("stated_te"), te_x, String::new(), opt(r.stated_te.value), stated_flag]);
    t
}

pub fn dimtest_table(r: &DimTestResult) -> Table {
    let mut t = Table::new(&["variant", "statistic", "p_value", "n_effective"]);
    t.push(vec![r.variant.name().to_string(), f(r.statistic), f(r.p_value), r.n_effective.to_string()]);
    t
}

pub fn replications_table(s: &StudySummary) -> Table {
    let mut t = Table::new(&[
        "index",
        "seed",
        "te_tsgfe",
        "te_naive",
        "te_stated",
        "k_used",
        "n_separated_groups",
        "n_excluded_persons",
        "failure",
    ]);
    for (i, r) in s.replications.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            r.seed.to_string(),
            opt(r.te_tsgfe),
            opt(r.te_naive),
            opt(r.te_stated),
            r.k_used.map(|k| k.to_string()).unwrap_or_default(),
            r.n_separated_groups.to_string(),
            r.n_excluded_persons.to_string(),
            r.failure.clone().unwrap_or_default(),
        ]);
    }
    t
}

pub fn summary_table(s: &StudySummary) -> Table {
    let mut t = Table::new(&["estimator", "mean", "bias", "rmse", "sd", "oracle_te", "s_completed", "s_requested"]);
    for e in &s.estimators {
        t.push(vec![
            e.estimator.name().to_string(),
            f(e.mean),
            f(e.bias),
            f(e.rmse),
            f(e.sd),
            f(s.oracle_te),
            s.s_completed.to_string(),
            s.s_requested.to_string(),
        ]);
    }
    t
}

pub fn density_table(d: &DensityTable) -> Table {
    let mut t = Table::new(&["estimator", "kind", "lo", "hi", "count", "density"]);
    for r in &d.rows {
        let kind = match r.kind {
            BinKind::Underflow => "underflow",
            BinKind::Bin => "bin",
            BinKind::Overflow => "overflow",
        };
        t.push(vec![
            r.estimator.name().to_string(),
            kind.to_string(),
            f(r.lo),
            f(r.hi),
            r.count.to_string(),
            f(r.density),
        ]);
    }
    t
}

/// `<file>.meta` next to `csv_path`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta");
    csv_path.with_file_name(name)
}

/// Writes the table and a sidecar holding `metadata` (`key=value` lines).
pub fn write_with_meta(table: &Table, path: &Path, metadata: &str) -> Result<()> {
    table.write(path)?;
    let meta = sidecar_path(path);
    fs::write(&meta, metadata).map_err(|source| Error::Io { path: path_str(&meta), source })
}
