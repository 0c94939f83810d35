//! Severity-graded constraints, solver envelopes with substitute-on-violation,
//! and refusal to relax safety-critical constraints.

use crate::budget::Meter;
use crate::canonical::{self, Digest};
use crate::registry::{ArchitectureClass, Registry, RegistryError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Default relative tolerance of an envelope.
pub const DEFAULT_TOLERANCE: f64 = 0.02;
/// Guard for relative error near zero.
pub const REL_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("state is missing `{0}`")]
    IncompleteState(String),
    #[error("unknown constraint `{0}`")]
    UnknownConstraint(String),
    #[error("duplicate constraint `{0}`")]
    DuplicateConstraint(String),
    #[error("unauthorized relaxation of `{0}`")]
    Unauthorized(String),
    #[error("refused: `{0}` is {1} and can never be relaxed")]
    Refused(String, Severity),
    #[error("no envelope guards `{0}`")]
    UnknownEnvelope(String),
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("envelope solver rejected the inputs: {0}")]
    Domain(RegistryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Inviolable,
    Emergency,
    Critical,
    Advisory,
}

impl Severity {
    /// Violations halt evaluation and can never be relaxed.
    pub fn is_safety(self) -> bool {
        matches!(self, Severity::Inviolable | Severity::Emergency)
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Severity::Inviolable => "INVIOLABLE",
            Severity::Emergency => "EMERGENCY",
            Severity::Critical => "CRITICAL",
            Severity::Advisory => "ADVISORY",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Const(f64),
    Key(String),
}

impl Operand {
    fn resolve(&self, state: &BTreeMap<String, f64>) -> Result<f64, ConstraintError> {
        match self {
            Operand::Const(c) => Ok(*c),
            Operand::Key(k) => state
                .get(k)
                .copied()
                .ok_or_else(|| ConstraintError::IncompleteState(k.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

/// A named comparison over a node-value map. NaN never satisfies a
/// predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub left: Operand,
    pub op: CmpOp,
    pub right: Operand,
}

impl Predicate {
    pub fn new(left: Operand, op: CmpOp, right: Operand) -> Self {
        Self { left, op, right }
    }

    /// `key op bound`
    pub fn key(key: &str, op: CmpOp, bound: f64) -> Self {
        Self::new(Operand::Key(key.to_string()), op, Operand::Const(bound))
    }

    pub fn holds(&self, state: &BTreeMap<String, f64>) -> Result<bool, ConstraintError> {
        let a = self.left.resolve(state)?;
        let b = self.right.resolve(state)?;
        Ok(match self.op {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        })
    }

    pub fn keys(&self) -> Vec<&str> {
        [&self.left, &self.right]
            .into_iter()
            .filter_map(|o| match o {
                Operand::Key(k) => Some(k.as_str()),
                Operand::Const(_) => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub constraint_id: String,
    pub severity: Severity,
    pub predicate: Predicate,
    pub description: String,
}

impl Constraint {
    pub fn new(id: &str, severity: Severity, predicate: Predicate, description: &str) -> Self {
        Self {
            constraint_id: id.to_string(),
            severity,
            predicate,
            description: description.to_string(),
        }
    }
}

/// Tolerance band around a ground-truth solver for one guarded model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// Model whose outputs this envelope checks.
    pub guarded: String,
    /// Registered physics solver giving ground truth.
    pub ground_truth_solver: String,
    /// Solver output compared against; the first output when `None`.
    pub output: Option<String>,
    pub tolerance_rel: f64,
    /// Reject violating outputs instead of substituting the solver value.
    pub reject_only: bool,
}

impl Envelope {
    pub fn new(guarded: &str, solver_model: &str) -> Self {
        Self {
            guarded: guarded.to_string(),
            ground_truth_solver: solver_model.to_string(),
            output: None,
            tolerance_rel: DEFAULT_TOLERANCE,
            reject_only: false,
        }
    }

    /// Ground-truth value for `inputs`.
    pub fn truth(&self, inputs: &BTreeMap<String, f64>, registry: &Registry) -> Result<f64, ConstraintError> {
        let (_, out) = registry
            .call(&self.ground_truth_solver, None, inputs, &Meter::unlimited())
            .map_err(ConstraintError::Domain)?;
        let v = match &self.output {
            Some(name) => out.iter().find(|(k, _)| k == name).map(|(_, v)| *v),
            None => out.first().map(|(_, v)| *v),
        };
        v.ok_or_else(|| ConstraintError::InvalidEnvelope(format!("solver has no output {:?}", self.output)))
    }
}

/// Relative error guarded near zero.
pub fn relative_error(value: f64, truth: f64) -> f64 {
    (value - truth).abs() / truth.abs().max(REL_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Substituted,
    Halted,
    Advisory,
    /// Envelope violation on a reject-only envelope: no value is delivered.
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub verdict: Verdict,
    pub violated: Vec<String>,
    pub substituted_value: Option<f64>,
    /// Value handed downstream (None on Halted/Rejected).
    pub delivered: Option<f64>,
    /// Most severe violated level, if any.
    pub worst: Option<Severity>,
}

impl ValidationResult {
    fn pass(delivered: Option<f64>) -> Self {
        Self {
            verdict: Verdict::Pass,
            violated: Vec::new(),
            substituted_value: None,
            delivered,
            worst: None,
        }
    }
}

/// Validate one model output against its envelope.
pub fn validate_output(
    output: f64,
    inputs: &BTreeMap<String, f64>,
    envelope: &Envelope,
    registry: &Registry,
) -> Result<ValidationResult, ConstraintError> {
    let truth = envelope.truth(inputs, registry)?;
    if output.is_finite() && relative_error(output, truth) <= envelope.tolerance_rel {
        return Ok(ValidationResult::pass(Some(output)));
    }
    let id = format!("envelope:{}", envelope.guarded);
    Ok(if envelope.reject_only {
        ValidationResult {
            verdict: Verdict::Rejected,
            violated: vec![id],
            substituted_value: None,
            delivered: None,
            worst: None,
        }
    } else {
        ValidationResult {
            verdict: Verdict::Substituted,
            violated: vec![id],
            substituted_value: Some(truth),
            delivered: Some(truth),
            worst: None,
        }
    })
}

/// Evaluate every constraint against `state`.
pub fn check_constraints<'a>(
    state: &BTreeMap<String, f64>,
    constraints: impl IntoIterator<Item = &'a Constraint>,
) -> Result<ValidationResult, ConstraintError> {
    let mut violated = Vec::new();
    let mut worst: Option<Severity> = None;
    for c in constraints {
        if !c.predicate.holds(state)? {
            violated.push(c.constraint_id.clone());
            worst = Some(worst.map_or(c.severity, |w| w.min(c.severity)));
        }
    }
    let verdict = match worst {
        None => Verdict::Pass,
        Some(s) if s.is_safety() => Verdict::Halted,
        Some(_) => Verdict::Advisory,
    };
    Ok(ValidationResult {
        verdict,
        violated,
        substituted_value: None,
        delivered: None,
        worst,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxReceipt {
    pub constraint_id: String,
    pub severity: Severity,
    pub requester: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refusal {
    pub constraint_id: String,
    pub requester: String,
    pub reason: String,
}

/// Registered constraints and envelopes.
#[derive(Clone, Debug, Default)]
pub struct ConstraintSet {
    constraints: BTreeMap<String, Constraint>,
    envelopes: BTreeMap<String, Envelope>,
    refusals: Vec<Refusal>,
}

/// Maximum envelope tolerance accepted anywhere in the system.
pub const MAX_TOLERANCE: f64 = 0.05;

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, c: Constraint) -> Result<(), ConstraintError> {
        if self.constraints.contains_key(&c.constraint_id) {
            return Err(ConstraintError::DuplicateConstraint(c.constraint_id));
        }
        self.constraints.insert(c.constraint_id.clone(), c);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Constraint> {
        self.constraints.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.values()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Constraints whose predicate keys are all present in `state`.
    pub fn applicable<'a>(&'a self, state: &'a BTreeMap<String, f64>) -> impl Iterator<Item = &'a Constraint> {
        self.constraints
            .values()
            .filter(move |c| c.predicate.keys().iter().all(|k| state.contains_key(*k)))
    }

    pub fn check(&self, state: &BTreeMap<String, f64>) -> Result<ValidationResult, ConstraintError> {
        check_constraints(state, self.constraints.values())
    }

    /// Register an envelope; the solver must be a registered physics solver.
    pub fn add_envelope(&mut self, env: Envelope, registry: &Registry) -> Result<(), ConstraintError> {
        Self::check_envelope(&env, registry)?;
        self.envelopes.insert(env.guarded.clone(), env);
        Ok(())
    }

    pub fn check_envelope(env: &Envelope, registry: &Registry) -> Result<(), ConstraintError> {
        if !(env.tolerance_rel > 0.0 && env.tolerance_rel.is_finite()) {
            return Err(ConstraintError::InvalidEnvelope("tolerance must be > 0".into()));
        }
        let art = registry
            .get(&env.ground_truth_solver, None)
            .map_err(|e| ConstraintError::InvalidEnvelope(e.to_string()))?;
        if art.spec.architecture_class != ArchitectureClass::PhysicsSolver {
            return Err(ConstraintError::InvalidEnvelope(format!(
                "`{}` is not a physics solver",
                env.ground_truth_solver
            )));
        }
        Ok(())
    }

    pub fn envelope(&self, guarded: &str) -> Option<&Envelope> {
        self.envelopes.get(guarded)
    }

    pub fn envelopes(&self) -> impl Iterator<Item = &Envelope> {
        self.envelopes.values()
    }

    pub fn set_tolerance(&mut self, guarded: &str, tol: f64) -> Result<f64, ConstraintError> {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(ConstraintError::InvalidEnvelope("tolerance must be > 0".into()));
        }
        let env = self
            .envelopes
            .get_mut(guarded)
            .ok_or_else(|| ConstraintError::UnknownEnvelope(guarded.to_string()))?;
        Ok(std::mem::replace(&mut env.tolerance_rel, tol))
    }

    /// Relax (remove) a constraint.
    ///
    /// INVIOLABLE and EMERGENCY constraints are refused before `authorize`
    /// is consulted, and the refusal is logged. For the other levels
    /// `authorize` must return true (a verified kernel token).
    pub fn relax_constraint(
        &mut self,
        id: &str,
        requester: &str,
        authorize: &mut dyn FnMut(&Constraint) -> bool,
    ) -> Result<RelaxReceipt, ConstraintError> {
        let c = self
            .constraints
            .get(id)
            .ok_or_else(|| ConstraintError::UnknownConstraint(id.to_string()))?;
        if c.severity.is_safety() {
            self.refusals.push(Refusal {
                constraint_id: id.to_string(),
                requester: requester.to_string(),
                reason: format!("{} constraints are never relaxed", c.severity),
            });
            return Err(ConstraintError::Refused(id.to_string(), c.severity));
        }
        if !authorize(c) {
            return Err(ConstraintError::Unauthorized(id.to_string()));
        }
        let c = self.constraints.remove(id).expect("present");
        Ok(RelaxReceipt {
            constraint_id: c.constraint_id,
            severity: c.severity,
            requester: requester.to_string(),
        })
    }

    pub fn refusals(&self) -> &[Refusal] {
        &self.refusals
    }

    /// Export rows: (id, severity, description).
    pub fn export(&self) -> Vec<(String, Severity, String)> {
        self.constraints
            .values()
            .map(|c| (c.constraint_id.clone(), c.severity, c.description.clone()))
            .collect()
    }

    /// Digest of the INVIOLABLE/EMERGENCY subset (the pinned safety set).
    pub fn safety_digest(&self) -> Digest {
        let safety: Vec<&Constraint> = self.constraints.values().filter(|c| c.severity.is_safety()).collect();
        canonical::digest_of(&safety)
    }

    /// Digest of constraints and envelopes.
    pub fn digest(&self) -> Digest {
        canonical::digest_of(&(&self.constraints, &self.envelopes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn beam_inputs() -> BTreeMap<String, f64> {
        state(&[("F", 100.0), ("L", 2.0), ("E", 200e9), ("I", 8e-6)])
    }

    #[test]
    fn envelope_pass_and_substitute() {
        let reg = Registry::with_solvers();
        let env = Envelope::new("learned/beam", "solver/beam_deflection");
        let truth = env.truth(&beam_inputs(), &reg).unwrap();
        let r = validate_output(truth, &beam_inputs(), &env, &reg).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        let r = validate_output(truth * 1.1, &beam_inputs(), &env, &reg).unwrap();
        assert_eq!(r.verdict, Verdict::Substituted);
        assert_eq!(r.substituted_value, Some(truth));
        assert!((truth - 1.0 / 6000.0).abs() < 1e-15);
    }

    #[test]
    fn three_percent_is_outside_two() {
        assert!(relative_error(103.0, 100.0) > DEFAULT_TOLERANCE);
    }

    #[test]
    fn reject_only_envelope() {
        let reg = Registry::with_solvers();
        let mut env = Envelope::new("learned/beam", "solver/beam_deflection");
        env.reject_only = true;
        let r = validate_output(1.0, &beam_inputs(), &env, &reg).unwrap();
        assert_eq!(r.verdict, Verdict::Rejected);
        assert_eq!(r.delivered, None);
    }

    #[test]
    fn envelope_domain_error() {
        let reg = Registry::with_solvers();
        let env = Envelope::new("learned/beam", "solver/beam_deflection");
        let mut bad = beam_inputs();
        bad.insert("L".into(), -1.0);
        assert!(matches!(
            validate_output(1.0, &bad, &env, &reg),
            Err(ConstraintError::Domain(_))
        ));
    }

    #[test]
    fn severities() {
        let c = |id: &str, sev| Constraint::new(id, sev, Predicate::key("T", CmpOp::Lt, 400.0), "");
        let hot = state(&[("T", 450.0)]);
        let cool = state(&[("T", 300.0)]);
        let inv = [c("t", Severity::Inviolable)];
        assert_eq!(check_constraints(&cool, &inv).unwrap().verdict, Verdict::Pass);
        assert_eq!(check_constraints(&hot, &inv).unwrap().verdict, Verdict::Halted);
        let adv = [c("a", Severity::Advisory)];
        assert_eq!(check_constraints(&hot, &adv).unwrap().verdict, Verdict::Advisory);
        let crit = [c("c", Severity::Critical)];
        let r = check_constraints(&hot, &crit).unwrap();
        assert_eq!(r.worst, Some(Severity::Critical));
        assert_eq!(r.violated, ["c"]);
        assert_eq!(
            check_constraints(&state(&[]), &inv),
            Err(ConstraintError::IncompleteState("T".into()))
        );
    }

    #[test]
    fn relaxation_rules() {
        let mut set = ConstraintSet::new();
        for (id, sev) in [
            ("adv", Severity::Advisory),
            ("crit", Severity::Critical),
            ("inv", Severity::Inviolable),
            ("emg", Severity::Emergency),
        ] {
            set.add(Constraint::new(id, sev, Predicate::key("x", CmpOp::Lt, 1.0), "")).unwrap();
        }
        assert!(set.relax_constraint("adv", "op", &mut |_| true).is_ok());
        assert_eq!(
            set.relax_constraint("crit", "op", &mut |_| false),
            Err(ConstraintError::Unauthorized("crit".into()))
        );
        let mut asked = false;
        assert!(matches!(
            set.relax_constraint("inv", "op", &mut |_| {
                asked = true;
                true
            }),
            Err(ConstraintError::Refused(..))
        ));
        assert!(!asked);
        assert!(set.relax_constraint("emg", "op", &mut |_| true).is_err());
        assert_eq!(set.refusals().len(), 2);
        assert!(set.get("inv").is_some() && set.get("emg").is_some());
        assert_eq!(
            set.relax_constraint("nope", "op", &mut |_| true),
            Err(ConstraintError::UnknownConstraint("nope".into()))
        );
    }

    #[test]
    fn nan_never_satisfies() {
        let p = Predicate::key("x", CmpOp::Lt, 1.0);
        assert!(!p.holds(&state(&[("x", f64::NAN)])).unwrap());
    }
}
