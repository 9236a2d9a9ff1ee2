//! Observed-data model shared by every estimation stage.
//!
//! A [`PseudoPanel`] holds, for each person, one actual binary choice and
//! `t_count` stated-choice scenarios. Scenario 0 spans the support of the
//! realized attribute and identifies the stated demand function; scenarios
//! `1..t_count` are used to learn about unobserved heterogeneity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

pub type PersonId = i64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatedRecord {
    pub person_id: PersonId,
    pub scenario_id: u32,
    pub x: f64,
    /// Reported choice probability, possibly rounded.
    pub p_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActualRecord {
    pub person_id: PersonId,
    pub x: f64,
    pub d: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoPanel {
    pub stated: Vec<StatedRecord>,
    pub actual: Vec<ActualRecord>,
    /// Number of scenarios per person, T + 1.
    pub t_count: u32,
}

impl PseudoPanel {
    /// Stated records grouped by person, each person's records sorted by scenario id.
    pub fn stated_by_person(&self) -> BTreeMap<PersonId, Vec<StatedRecord>> {
        let mut out: BTreeMap<PersonId, Vec<StatedRecord>> = BTreeMap::new();
        for r in &self.stated {
            out.entry(r.person_id).or_default().push(*r);
        }
        for recs in out.values_mut() {
            recs.sort_by_key(|r| r.scenario_id);
        }
        out
    }

    pub fn scenario(&self, scenario_id: u32) -> impl Iterator<Item = &StatedRecord> {
        self.stated.iter().filter(move |r| r.scenario_id == scenario_id)
    }

    pub fn person_ids(&self) -> BTreeSet<PersonId> {
        self.stated.iter().map(|r| r.person_id).chain(self.actual.iter().map(|r| r.person_id)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Logit,
}

/// The known link L that maps stated probabilities to the scale on which
/// measurement error is additive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFunction {
    pub kind: LinkKind,
    /// Probabilities are clamped into `[clamp_eps, 1 - clamp_eps]` before linking.
    pub clamp_eps: f64,
}

impl Default for LinkFunction {
    fn default() -> Self {
        LinkFunction { kind: LinkKind::Logit, clamp_eps: 0.01 }
    }
}

impl LinkFunction {
    pub fn logit(clamp_eps: f64) -> Result<Self> {
        if !(clamp_eps > 0.0 && clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps must lie in (0, 0.5), got {clamp_eps}")));
        }
        Ok(LinkFunction { kind: LinkKind::Logit, clamp_eps })
    }

    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.clamp_eps, 1.0 - self.clamp_eps)
    }

    pub fn link(&self, p: f64) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::Validation(format!("probability must be finite, got {p}")));
        }
        let p = self.clamp(p);
        match self.kind {
            LinkKind::Logit => Ok((p / (1.0 - p)).ln()),
        }
    }

    pub fn inverse_link(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::Validation(format!("link value must be finite, got {z}")));
        }
        match self.kind {
            LinkKind::Logit => Ok(logistic(z)),
        }
    }
}

/// exp(z) / (1 + exp(z)) without overflow for large |z|.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    PStarOutOfRange(f64),
    NonFiniteValue(&'static str),
    ChoiceNotBinary(u8),
    DuplicateScenario(u32),
    MissingScenario(u32),
    UnexpectedScenario(u32),
    NoActualRecord,
    NoStatedRecords,
    DuplicateActual,
    TooFewScenarios(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub person_id: Option<PersonId>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(id) = self.person_id {
            write!(f, "person {id}: ")?;
        }
        match &self.kind {
            ViolationKind::PStarOutOfRange(p) => write!(f, "p_star {p} outside [0,1]"),
            ViolationKind::NonFiniteValue(field) => write!(f, "non-finite {field}"),
            ViolationKind::ChoiceNotBinary(d) => write!(f, "d = {d} is not 0 or 1"),
            ViolationKind::DuplicateScenario(s) => write!(f, "duplicate scenario {s}"),
            ViolationKind::MissingScenario(s) => write!(f, "missing scenario {s}"),
            ViolationKind::UnexpectedScenario(s) => write!(f, "scenario {s} outside 0..t_count"),
            ViolationKind::NoActualRecord => write!(f, "stated records but no actual record"),
            ViolationKind::NoStatedRecords => write!(f, "actual record but no stated records"),
            ViolationKind::DuplicateActual => write!(f, "more than one actual record"),
            ViolationKind::TooFewScenarios(t) => write!(f, "t_count = {t}, need at least 2"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let shown: Vec<String> = self.violations.iter().take(5).map(|v| v.to_string()).collect();
        let more = self.violations.len().saturating_sub(5);
        let mut msg = shown.join("; ");
        if more > 0 {
            msg.push_str(&format!("; and {more} more"));
        }
        Err(Error::Validation(msg))
    }
}

pub fn validate_panel(panel: &PseudoPanel) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |person_id, kind| violations.push(Violation { person_id, kind });

    if panel.t_count < 2 {
        push(None, ViolationKind::TooFewScenarios(panel.t_count));
    }

    let mut scenarios: BTreeMap<PersonId, BTreeSet<u32>> = BTreeMap::new();
    for r in &panel.stated {
        let id = Some(r.person_id);
        if !r.x.is_finite() {
            push(id, ViolationKind::NonFiniteValue("x"));
        }
        if !r.p_star.is_finite() {
            push(id, ViolationKind::NonFiniteValue("p_star"));
        } else if !(0.0..=1.0).contains(&r.p_star) {
            push(id, ViolationKind::PStarOutOfRange(r.p_star));
        }
        if r.scenario_id >= panel.t_count {
            push(id, ViolationKind::UnexpectedScenario(r.scenario_id));
        }
        if !scenarios.entry(r.person_id).or_default().insert(r.scenario_id) {
            push(id, ViolationKind::DuplicateScenario(r.scenario_id));
        }
    }
    for (&person, seen) in &scenarios {
        for s in 0..panel.t_count {
            if !seen.contains(&s) {
                push(Some(person), ViolationKind::MissingScenario(s));
            }
        }
    }

    let mut actual_seen = BTreeSet::new();
    for r in &panel.actual {
        let id = Some(r.person_id);
        if !r.x.is_finite() {
            push(id, ViolationKind::NonFiniteValue("x"));
        }
        if r.d > 1 {
            push(id, ViolationKind::ChoiceNotBinary(r.d));
        }
        if !actual_seen.insert(r.person_id) {
            push(id, ViolationKind::DuplicateActual);
        }
        if !scenarios.contains_key(&r.person_id) {
            push(id, ViolationKind::NoStatedRecords);
        }
    }
    for &person in scenarios.keys() {
        if !actual_seen.contains(&person) {
            push(Some(person), ViolationKind::NoActualRecord);
        }
    }

    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_panel() -> PseudoPanel {
        let mut stated = Vec::new();
        let mut actual = Vec::new();
        for person in 0..3 {
            for s in 0..6 {
                stated.push(StatedRecord { person_id: person, scenario_id: s, x: s as f64 * 0.4 - 1.0, p_star: 0.5 });
            }
            actual.push(ActualRecord { person_id: person, x: 1.0, d: (person % 2) as u8 });
        }
        PseudoPanel { stated, actual, t_count: 6 }
    }

    #[test]
    fn link_examples() {
        let lf = LinkFunction::default();
        assert_eq!(lf.link(0.5).unwrap(), 0.0);
        let z = lf.link(lf.inverse_link(1.37).unwrap()).unwrap();
        assert!((z - 1.37).abs() < 1e-12);
        let low = lf.link(0.0).unwrap();
        assert!((low - (0.01f64 / 0.99).ln()).abs() < 1e-15);
        assert!((low + 4.595_119_850_134_59).abs() < 1e-9);
    }

    #[test]
    fn inverse_link_examples() {
        let lf = LinkFunction::default();
        assert_eq!(lf.inverse_link(0.0).unwrap(), 0.5);
        let hi = lf.inverse_link(50.0).unwrap();
        assert!(hi > 1.0 - 1e-9 && hi <= 1.0);
        assert!((lf.inverse_link(-1.0986).unwrap() - 0.25).abs() < 1e-4);
        assert!(lf.inverse_link(-800.0).unwrap() >= 0.0);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let lf = LinkFunction::default();
        assert!(lf.link(f64::NAN).is_err());
        assert!(lf.inverse_link(f64::INFINITY).is_err());
        assert!(LinkFunction::logit(0.5).is_err());
        assert!(LinkFunction::logit(0.0).is_err());
    }

    #[test]
    fn well_formed_panel_is_clean() {
        assert!(validate_panel(&tiny_panel()).is_ok());
    }

    #[test]
    fn out_of_range_p_star_is_named() {
        let mut panel = tiny_panel();
        panel.stated[7].p_star = 1.3;
        let report = validate_panel(&panel);
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.person_id, Some(1));
        assert_eq!(v.kind, ViolationKind::PStarOutOfRange(1.3));
        assert!(v.to_string().contains("p_star"));
    }

    #[test]
    fn missing_scenario_is_reported() {
        let mut panel = tiny_panel();
        panel.stated.retain(|r| !(r.person_id == 2 && r.scenario_id == 2));
        let report = validate_panel(&panel);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::MissingScenario(2));
        assert!(report.violations[0].to_string().contains("missing scenario"));
    }

    #[test]
    fn structural_violations() {
        let mut panel = tiny_panel();
        panel.stated.push(StatedRecord { person_id: 9, scenario_id: 0, x: 0.0, p_star: 0.2 });
        panel.stated.push(panel.stated[0]);
        panel.actual.push(ActualRecord { person_id: 0, x: 0.0, d: 2 });
        let kinds: Vec<_> = validate_panel(&panel).violations.into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::DuplicateScenario(0)));
        assert!(kinds.contains(&ViolationKind::NoActualRecord));
        assert!(kinds.contains(&ViolationKind::ChoiceNotBinary(2)));
        assert!(kinds.contains(&ViolationKind::DuplicateActual));
        assert!(kinds.contains(&ViolationKind::MissingScenario(1)));
    }
}
