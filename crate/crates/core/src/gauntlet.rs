//! The five-stage validation pipeline for self-modification proposals:
//! static checks, bounded invariant verification, kernel authorization,
//! sandboxed execution, and regression against golden digests.
//!
//! Proposals are declarative diffs. Stage 2 checks claimed invariants by
//! exhaustive evaluation over their declared finite grids and rejects any
//! claim whose domain is not finite.

use crate::budget::{BudgetExceeded, Limits, Meter};
use crate::canonical::{self, Digest};
use crate::constraints::{relative_error, ConstraintSet, MAX_TOLERANCE};
use crate::context::{GraphError, Mutation, NodeKind, NoObserver};
use crate::kernel::{ActionDescriptor, AuthToken, AutonomyLevel, KernelClient, Request, Response};
use crate::lineage::{Datum, RunId, RunRecord, Seed};
use crate::registry::{ModelArtifact, ModelBody, Registry, RegistryError};
use crate::runtime::{pinned_ids, Action, Runtime};
use crate::solvers::{SolverError, SolverId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::Duration;

/// Lineage kind of persisted reports.
pub const GAUNTLET_KIND: &str = "gauntlet";
/// Largest grid a claimed invariant may declare.
pub const MAX_GRID_POINTS: usize = 100_000;
/// Target id of graph rewires.
pub const GRAPH_TARGET: &str = "graph";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalKind {
    ParamChange,
    GraphRewire,
    NewModel,
    EnvelopeTolerance,
}

/// Declarative content of a proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "payload", rename_all = "snake_case")]
pub enum Payload {
    /// Set named coefficients: solver coefficient names, or `c<i>` for
    /// index `i` of a linear model's coefficient vector.
    ParamChange { set: BTreeMap<String, f64> },
    GraphRewire { mutations: Vec<Mutation> },
    NewModel { artifact: ModelArtifact },
    EnvelopeTolerance { tolerance: f64 },
}

impl Payload {
    pub fn kind(&self) -> ProposalKind {
        match self {
            Payload::ParamChange { .. } => ProposalKind::ParamChange,
            Payload::GraphRewire { .. } => ProposalKind::GraphRewire,
            Payload::NewModel { .. } => ProposalKind::NewModel,
            Payload::EnvelopeTolerance { .. } => ProposalKind::EnvelopeTolerance,
        }
    }
}

/// One axis of a claimed invariant's input grid: `steps` evenly spaced
/// points from `lo` to `hi` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub input: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Axis {
    pub fn point(&self, i: usize) -> f64 {
        if self.steps <= 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.steps - 1) as f64
        }
    }

    fn bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi && self.steps > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "property", rename_all = "snake_case")]
pub enum Property {
    Finite,
    Between { lo: f64, hi: f64 },
    /// Output within `tolerance` relative error of a physics solver.
    WithinSolver {
        solver: String,
        output: Option<String>,
        tolerance: f64,
    },
}

/// A named property of one model, claimed over a bounded input grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub name: String,
    pub model_id: String,
    pub output: Option<String>,
    pub fixed: BTreeMap<String, f64>,
    pub grid: Vec<Axis>,
    pub property: Property,
}

impl Invariant {
    /// Number of grid points, or `None` when the domain is unbounded.
    pub fn grid_size(&self) -> Option<usize> {
        let mut n: usize = 1;
        for a in &self.grid {
            if !a.bounded() {
                return None;
            }
            n = n.checked_mul(a.steps)?;
        }
        (n <= MAX_GRID_POINTS).then_some(n)
    }

    /// Input record at flat grid index `k` (last axis fastest).
    pub fn point(&self, mut k: usize) -> BTreeMap<String, f64> {
        let mut inputs = self.fixed.clone();
        for a in self.grid.iter().rev() {
            inputs.insert(a.input.clone(), a.point(k % a.steps));
            k /= a.steps;
        }
        inputs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposal_id: String,
    pub kind: ProposalKind,
    pub target: String,
    pub payload: Payload,
    pub claimed_invariants: Vec<Invariant>,
    /// Originating trajectory id.
    pub provenance: String,
}

impl Proposal {
    pub fn new(id: &str, target: &str, payload: Payload) -> Self {
        Self {
            proposal_id: id.to_string(),
            kind: payload.kind(),
            target: target.to_string(),
            payload,
            claimed_invariants: Vec::new(),
            provenance: String::new(),
        }
    }

    pub fn with_invariant(mut self, inv: Invariant) -> Self {
        self.claimed_invariants.push(inv);
        self
    }

    pub fn digest(&self) -> Digest {
        canonical::digest_of(self)
    }

    /// Rewires and new models change the system's structure.
    pub fn is_architectural(&self) -> bool {
        matches!(self.kind, ProposalKind::GraphRewire | ProposalKind::NewModel)
    }

    /// Models whose outputs this proposal is allowed to change.
    pub fn owned_models(&self) -> BTreeSet<String> {
        match &self.payload {
            Payload::ParamChange { .. } | Payload::NewModel { .. } => [self.target.clone()].into(),
            _ => BTreeSet::new(),
        }
    }

    /// Apply to a runtime. Graph rewires are all-or-nothing.
    pub fn apply(&self, rt: &mut Runtime) -> Result<(), String> {
        match &self.payload {
            Payload::ParamChange { set } => {
                let art = param_changed(&rt.registry, &self.target, set)?;
                rt.registry.register(art).map_err(|e| e.to_string())?;
            }
            Payload::GraphRewire { mutations } => {
                let mut done = 0;
                for m in mutations {
                    if let Err(e) = rt.graph.apply(m.clone()) {
                        for _ in 0..done {
                            rt.graph.undo().expect("undo of applied mutation");
                        }
                        return Err(e.to_string());
                    }
                    done += 1;
                }
            }
            Payload::NewModel { artifact } => {
                rt.registry.register(artifact.clone()).map_err(|e| e.to_string())?;
            }
            Payload::EnvelopeTolerance { tolerance } => {
                rt.constraints
                    .set_tolerance(&self.target, *tolerance)
                    .map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }
}

/// Latest version of `model_id` with `set` applied.
pub fn param_changed(
    registry: &Registry,
    model_id: &str,
    set: &BTreeMap<String, f64>,
) -> Result<ModelArtifact, String> {
    let mut art = (*registry.get(model_id, None).map_err(|e| e.to_string())?).clone();
    for (k, v) in set {
        if !v.is_finite() {
            return Err(format!("`{k}` is not finite"));
        }
        match &mut art.body {
            ModelBody::Solver { coefficients, .. } => match coefficients.get_mut(k) {
                Some(slot) => *slot = *v,
                None => return Err(format!("solver has no coefficient `{k}`")),
            },
            ModelBody::Linear(m) => {
                let idx = k
                    .strip_prefix('c')
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&i| i < m.coefficients.len())
                    .ok_or_else(|| format!("no coefficient `{k}`"))?;
                m.coefficients[idx] = *v;
            }
        }
    }
    art.training_digest = None;
    Ok(art)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub invariant: String,
    pub point: BTreeMap<String, f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: u8,
    pub name: String,
    pub passed: bool,
    pub reason: String,
    pub duration_ticks: u64,
    pub counterexamples: Vec<Counterexample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum FinalVerdict {
    Approved { approval_id: String },
    Rejected { stage: u8, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GauntletReport {
    pub proposal_id: String,
    pub proposal_digest: Digest,
    pub stages: Vec<StageResult>,
    pub final_verdict: FinalVerdict,
    pub run_id: Option<RunId>,
}

impl GauntletReport {
    pub fn approval_id(&self) -> Option<&str> {
        match &self.final_verdict {
            FinalVerdict::Approved { approval_id } => Some(approval_id),
            FinalVerdict::Rejected { .. } => None,
        }
    }

    pub fn rejected_at(&self) -> Option<u8> {
        match &self.final_verdict {
            FinalVerdict::Rejected { stage, .. } => Some(*stage),
            FinalVerdict::Approved { .. } => None,
        }
    }

    /// Five-row stage table; stages not executed show as `-`.
    pub fn render(&self) -> String {
        let mut s = format!("proposal {}\n", self.proposal_id);
        for (i, name) in STAGE_NAMES.iter().enumerate() {
            match self.stages.get(i) {
                Some(r) => s.push_str(&format!(
                    "  {} {:<10} {:<4} {:>8} ticks  {}\n",
                    r.stage,
                    name,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.duration_ticks,
                    r.reason
                )),
                None => s.push_str(&format!("  {} {:<10} -\n", i + 1, name)),
            }
        }
        match &self.final_verdict {
            FinalVerdict::Approved { approval_id } => s.push_str(&format!("  Approved ({approval_id})\n")),
            FinalVerdict::Rejected { stage, reason } => {
                s.push_str(&format!("  Rejected at stage {stage}: {reason}\n"))
            }
        }
        s
    }
}

pub const STAGE_NAMES: [&str; 5] = ["static", "verify", "authorize", "sandbox", "regression"];

#[derive(Clone, Debug)]
pub struct GauntletConfig {
    pub requester: String,
    pub level: AutonomyLevel,
    pub limits: Limits,
}

impl Default for GauntletConfig {
    fn default() -> Self {
        Self {
            requester: "rsi".into(),
            level: AutonomyLevel::A5,
            limits: Limits {
                steps: 1_000_000_000,
                memory_bytes: 512 << 20,
                wall: Duration::from_secs(30),
            },
        }
    }
}

/// Result of one stage before it is numbered into a report.
pub struct Outcome {
    pub passed: bool,
    pub reason: String,
    pub ticks: u64,
    pub counterexamples: Vec<Counterexample>,
}

impl Outcome {
    fn pass(ticks: u64) -> Self {
        Self {
            passed: true,
            reason: "ok".into(),
            ticks,
            counterexamples: Vec::new(),
        }
    }

    fn fail(reason: impl Into<String>, ticks: u64) -> Self {
        Self {
            passed: false,
            reason: reason.into(),
            ticks,
            counterexamples: Vec::new(),
        }
    }
}

// -- stage 1 ---------------------------------------------------------------

/// Schema validity, id resolution, and immutable-module protection.
pub fn stage_static(rt: &Runtime, p: &Proposal) -> Result<u64, String> {
    let mut checks = 1u64;
    if rt.registry.is_pinned(&p.target) || pinned_ids().contains(&p.target) {
        return Err("immutable".into());
    }
    if p.kind != p.payload.kind() {
        return Err(format!("payload does not match kind {:?}", p.kind));
    }
    let mut new_model = None;
    match &p.payload {
        Payload::ParamChange { set } => {
            checks += set.len() as u64;
            if !rt.registry.contains(&p.target) {
                return Err(format!("unknown model `{}`", p.target));
            }
            param_changed(&rt.registry, &p.target, set)?;
        }
        Payload::GraphRewire { mutations } => {
            if p.target != GRAPH_TARGET {
                return Err(format!("rewires must target `{GRAPH_TARGET}`"));
            }
            if mutations.is_empty() {
                return Err("empty rewire".into());
            }
            let mut added = BTreeSet::new();
            for m in mutations {
                checks += 1;
                for id in mutation_refs(m, &mut added) {
                    if rt.graph.node(&id).is_none() && !added.contains(&id) {
                        return Err(format!("unknown node `{id}`"));
                    }
                    if pinned_ids().contains(&id) {
                        return Err("immutable".into());
                    }
                }
            }
        }
        Payload::NewModel { artifact } => {
            if artifact.spec.model_id != p.target {
                return Err("artifact id differs from target".into());
            }
            if rt.registry.contains(&p.target) {
                return Err(format!("model `{}` already exists", p.target));
            }
            Registry::validate(artifact).map_err(|e| e.to_string())?;
            new_model = Some(p.target.clone());
        }
        Payload::EnvelopeTolerance { tolerance } => {
            if rt.constraints.envelope(&p.target).is_none() {
                return Err(format!("no envelope guards `{}`", p.target));
            }
            if !(tolerance.is_finite() && *tolerance > 0.0) {
                return Err("tolerance must be positive".into());
            }
        }
    }
    for inv in &p.claimed_invariants {
        checks += 1;
        if !rt.registry.contains(&inv.model_id) && new_model.as_deref() != Some(inv.model_id.as_str()) {
            return Err(format!("invariant `{}` names unknown model `{}`", inv.name, inv.model_id));
        }
    }
    Ok(checks)
}

/// Node ids a mutation refers to; ids it creates are added to `added`.
fn mutation_refs(m: &Mutation, added: &mut BTreeSet<String>) -> Vec<String> {
    match m {
        Mutation::AddNode { node, edges } => {
            added.insert(node.node_id.clone());
            edges
                .iter()
                .flat_map(|e| [e.from.clone(), e.to.clone()])
                .filter(|id| id != &node.node_id)
                .collect()
        }
        Mutation::RemoveNode { node, .. } => vec![node.node_id.clone()],
        Mutation::AddEdge { edge } | Mutation::RemoveEdge { edge } => vec![edge.from.clone(), edge.to.clone()],
        Mutation::SetValue { node_id, .. } => vec![node_id.clone()],
        Mutation::SetGain { from, to, .. } => vec![from.clone(), to.clone()],
    }
}

// -- stage 2 ---------------------------------------------------------------

/// Invariants every post-change system must satisfy.
pub fn global_invariants(shadow: &Runtime, before: &Runtime) -> Vec<Counterexample> {
    let mut out = Vec::new();
    let order = shadow.graph.topological_order(None);
    if order.len() != shadow.graph.len() {
        out.push(Counterexample {
            invariant: "acyclic".into(),
            point: BTreeMap::new(),
            detail: "graph has a cycle".into(),
        });
    }
    for env in shadow.constraints.envelopes() {
        if !(env.tolerance_rel <= MAX_TOLERANCE) {
            out.push(Counterexample {
                invariant: "tolerance-bound".into(),
                point: [("tolerance_rel".to_string(), env.tolerance_rel)].into(),
                detail: format!("envelope `{}` tolerance exceeds {MAX_TOLERANCE}", env.guarded),
            });
        }
        if let Err(e) = ConstraintSet::check_envelope(env, &shadow.registry) {
            out.push(Counterexample {
                invariant: "envelope-soundness".into(),
                point: BTreeMap::new(),
                detail: format!("`{}`: {e}", env.guarded),
            });
        }
    }
    if shadow.constraints.safety_digest() != before.constraints.safety_digest() {
        out.push(Counterexample {
            invariant: "severity-irremovability".into(),
            point: BTreeMap::new(),
            detail: "safety constraint set changed".into(),
        });
    }
    out
}

/// Every counterexample of one claimed invariant on its grid, or an error
/// when the domain is unbounded.
pub fn check_invariant(inv: &Invariant, registry: &Registry) -> Result<Vec<Counterexample>, String> {
    let n = inv
        .grid_size()
        .ok_or_else(|| format!("unverifiable invariant `{}`: unbounded domain", inv.name))?;
    let meter = Meter::unlimited();
    let mut out = Vec::new();
    for k in 0..n {
        let x = inv.point(k);
        if let Some(detail) = violation(inv, registry, &x, &meter) {
            out.push(Counterexample {
                invariant: inv.name.clone(),
                point: x,
                detail,
            });
        }
    }
    Ok(out)
}

fn pick(out: &[(String, f64)], name: Option<&String>) -> Option<f64> {
    match name {
        Some(n) => out.iter().find(|(k, _)| k == n).map(|(_, v)| *v),
        None => out.first().map(|(_, v)| *v),
    }
}

fn violation(inv: &Invariant, registry: &Registry, x: &BTreeMap<String, f64>, meter: &Meter) -> Option<String> {
    let out = match registry.call(&inv.model_id, None, x, meter) {
        Ok((_, out)) => out,
        Err(e) => return Some(format!("model error: {e}")),
    };
    let Some(v) = pick(&out, inv.output.as_ref()) else {
        return Some("missing output".into());
    };
    match &inv.property {
        Property::Finite => (!v.is_finite()).then(|| format!("value {v}")),
        Property::Between { lo, hi } => (!(*lo <= v && v <= *hi)).then(|| format!("value {v} outside [{lo}, {hi}]")),
        Property::WithinSolver {
            solver,
            output,
            tolerance,
        } => match registry.call(solver, None, x, meter) {
            Ok((_, t)) => match pick(&t, output.as_ref()) {
                Some(t) if relative_error(v, t) <= *tolerance => None,
                Some(t) => Some(format!("value {v} vs solver {t}")),
                None => Some("solver has no such output".into()),
            },
            Err(e) => Some(format!("solver error: {e}")),
        },
    }
}

/// Apply to a shadow copy and check global plus claimed invariants.
pub fn stage_verify(rt: &Runtime, p: &Proposal) -> (Outcome, Option<Runtime>) {
    let mut shadow = rt.fork();
    if let Err(e) = p.apply(&mut shadow) {
        let mut o = Outcome::fail(format!("does not apply: {e}"), 1);
        let invariant = if e.contains("cycle") { "acyclic" } else { "applicability" };
        o.counterexamples.push(Counterexample {
            invariant: invariant.into(),
            point: BTreeMap::new(),
            detail: e,
        });
        return (o, None);
    }
    let mut cex = global_invariants(&shadow, rt);
    let mut ticks = 1u64;
    for inv in &p.claimed_invariants {
        match check_invariant(inv, &shadow.registry) {
            Ok(c) => {
                ticks += inv.grid_size().unwrap_or(0) as u64;
                cex.extend(c);
            }
            Err(reason) => return (Outcome::fail(reason, ticks), None),
        }
    }
    if cex.is_empty() {
        (Outcome::pass(ticks), Some(shadow))
    } else {
        let mut o = Outcome::fail(format!("{} counterexample(s)", cex.len()), ticks);
        o.counterexamples = cex;
        (o, None)
    }
}

// -- golden suite ----------------------------------------------------------

/// One golden check: a digest plus the models whose change may alter it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub name: String,
    pub owners: BTreeSet<String>,
    pub digest: Digest,
}

fn budget_of(e: &RegistryError) -> Option<BudgetExceeded> {
    match e {
        RegistryError::Solver(SolverError::Budget(b)) => Some(*b),
        _ => None,
    }
}

/// Probe inputs for any registered model.
pub fn probe_inputs(art: &ModelArtifact) -> Vec<BTreeMap<String, f64>> {
    match &art.body {
        ModelBody::Solver { solver, .. } => vec![solver.probe_inputs()],
        ModelBody::Linear(m) => match &m.features {
            crate::train::FeatureMap::LogRatio {
                fields, references, ..
            } => {
                let base: BTreeMap<String, f64> = fields.iter().cloned().zip(references.iter().copied()).collect();
                let mut out = vec![base.clone()];
                for f in fields {
                    for scale in [0.5, 2.0] {
                        let mut x = base.clone();
                        *x.get_mut(f).expect("field") *= scale;
                        out.push(x);
                    }
                }
                out
            }
            crate::train::FeatureMap::Raw { fields } => vec![fields.iter().map(|f| (f.clone(), 1.0)).collect()],
            crate::train::FeatureMap::Sparse { dim } => {
                vec![(0..(*dim).min(3)).map(|i| (format!("x{i}"), 1.0)).collect()]
            }
        },
    }
}

/// Golden digests of a runtime: every model at its probe inputs, and the
/// graph's sink values. Model errors are part of the digest; budget
/// exhaustion aborts.
pub fn golden_suite(rt: &Runtime, meter: &Meter) -> Result<Vec<GoldenCase>, BudgetExceeded> {
    let mut cases = Vec::new();
    for id in rt.registry.model_ids() {
        let art = rt.registry.get(&id, None).expect("listed model");
        let mut results = Vec::new();
        for x in probe_inputs(&art) {
            match art.call(&x, meter) {
                Ok(out) => results.push(Ok(out)),
                Err(e) => {
                    if let Some(b) = budget_of(&e) {
                        return Err(b);
                    }
                    results.push(Err(e.to_string()));
                }
            }
        }
        meter.check_wall()?;
        cases.push(GoldenCase {
            name: format!("model:{id}"),
            owners: [id.clone()].into(),
            digest: canonical::digest_of(&results),
        });
    }
    if !rt.graph.is_empty() {
        let sinks: Vec<String> = rt
            .graph
            .nodes()
            .filter(|n| rt.graph.children(&n.node_id).next().is_none())
            .map(|n| n.node_id.clone())
            .collect();
        let owners: BTreeSet<String> = rt
            .graph
            .nodes()
            .filter(|n| n.kind == NodeKind::Model)
            .filter_map(|n| n.bound_model.clone())
            .collect();
        let targets: Vec<&str> = sinks.iter().map(|s| s.as_str()).collect();
        let result = match rt
            .graph
            .evaluate(&targets, &BTreeMap::new(), &rt.registry, meter, &mut NoObserver, None)
        {
            Ok(o) => Ok(o.values),
            Err(GraphError::Model { error, .. }) if budget_of(&error).is_some() => {
                return Err(budget_of(&error).expect("checked"))
            }
            Err(e) => Err(e.to_string()),
        };
        cases.push(GoldenCase {
            name: "graph".into(),
            owners,
            digest: canonical::digest_of(&result),
        });
    }
    Ok(cases)
}

/// Registry outputs of every solver equal a direct evaluation with the
/// pack's fixed coefficients.
pub fn solver_oracle_sweep(registry: &Registry) -> Vec<String> {
    let mut bad = Vec::new();
    for s in SolverId::ALL {
        let x = s.probe_inputs();
        let direct = s.evaluate(&x, &s.default_coefficients(), &Meter::unlimited());
        let via = registry.call(&s.model_id(), None, &x, &Meter::unlimited()).map(|(_, o)| o);
        let same = match (&direct, &via) {
            (Ok(a), Ok(b)) => a.iter().zip(b).all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits()) && a.len() == b.len(),
            _ => false,
        };
        if !same {
            bad.push(s.model_id());
        }
    }
    bad
}

fn state_bytes(rt: &Runtime) -> u64 {
    let params: usize = rt.registry.catalog().iter().map(|c| c.param_count).sum();
    (params * 8 + rt.graph.len() * 256 + rt.graph.edge_count() * 128) as u64
}

// -- stages 4 and 5 --------------------------------------------------------

/// Run the proposal in an isolated fork under hard budgets.
pub fn stage_sandbox(rt: &Runtime, p: &Proposal, limits: Limits) -> (Outcome, Option<(Runtime, Vec<GoldenCase>)>) {
    let meter = Meter::new(limits);
    let result = panic::catch_unwind(AssertUnwindSafe(|| {
        let mut fork = rt.fork();
        meter.charge_bytes(state_bytes(&fork))?;
        p.apply(&mut fork).map_err(SandboxFault::Apply)?;
        let golden = golden_suite(&fork, &meter)?;
        meter.check_wall()?;
        Ok::<_, SandboxFault>((fork, golden))
    }));
    let ticks = meter.steps_used();
    match result {
        Ok(Ok(v)) => (Outcome::pass(ticks), Some(v)),
        Ok(Err(SandboxFault::Budget(b))) => (Outcome::fail(format!("budget: {b}"), ticks), None),
        Ok(Err(SandboxFault::Apply(e))) => (Outcome::fail(format!("fault: {e}"), ticks), None),
        Err(_) => (Outcome::fail("fault: panic in sandbox", ticks), None),
    }
}

enum SandboxFault {
    Budget(BudgetExceeded),
    Apply(String),
}

impl From<BudgetExceeded> for SandboxFault {
    fn from(b: BudgetExceeded) -> Self {
        SandboxFault::Budget(b)
    }
}

/// Compare post-change goldens with the baseline, skipping cases owned by
/// the proposal, and sweep the solvers against their direct evaluation.
pub fn stage_regression(baseline: &[GoldenCase], after: &[GoldenCase], shadow: &Registry, p: &Proposal) -> Outcome {
    let owned = p.owned_models();
    let mut failures = Vec::new();
    let mut ticks = 0;
    for case in baseline {
        if case.owners.iter().any(|o| owned.contains(o)) {
            continue;
        }
        ticks += 1;
        match after.iter().find(|c| c.name == case.name) {
            Some(c) if c.digest == case.digest => {}
            _ => failures.push(case.name.clone()),
        }
    }
    let bad = solver_oracle_sweep(shadow);
    ticks += SolverId::ALL.len() as u64;
    failures.extend(bad.into_iter().map(|s| format!("oracle:{s}")));
    if failures.is_empty() {
        Outcome::pass(ticks)
    } else {
        Outcome::fail(format!("regressions: {}", failures.join(", ")), ticks)
    }
}

// -- pipeline --------------------------------------------------------------

/// The descriptor an approved proposal is applied under.
pub fn apply_descriptor(p: &Proposal, cfg: &GauntletConfig) -> ActionDescriptor {
    Action::Apply { proposal: p.clone() }.descriptor(&cfg.requester, cfg.level)
}

/// Run all five stages in order, stopping at the first failure, and
/// persist the report to the runtime's lineage.
pub fn run_gauntlet(rt: &Runtime, kernel: &dyn KernelClient, p: &Proposal, cfg: &GauntletConfig) -> GauntletReport {
    let mut stages: Vec<StageResult> = Vec::new();
    let push = |stages: &mut Vec<StageResult>, o: Outcome| {
        let n = stages.len() as u8 + 1;
        stages.push(StageResult {
            stage: n,
            name: STAGE_NAMES[n as usize - 1].into(),
            passed: o.passed,
            reason: o.reason,
            duration_ticks: o.ticks,
            counterexamples: o.counterexamples,
        });
        o.passed
    };
    let verdict = 'run: {
        let o = match stage_static(rt, p) {
            Ok(ticks) => Outcome::pass(ticks),
            Err(reason) => Outcome::fail(reason, 1),
        };
        if !push(&mut stages, o) {
            break 'run None;
        }
        let (o, _) = stage_verify(rt, p);
        if !push(&mut stages, o) {
            break 'run None;
        }
        let descriptor = apply_descriptor(p, cfg);
        let token = match kernel.call(&Request::AuthorizeProposal {
            descriptor: descriptor.clone(),
        }) {
            Ok(Response::Token { token, .. }) => token,
            Ok(Response::Denied { reason }) | Ok(Response::Error { message: reason }) => {
                push(&mut stages, Outcome::fail(reason, 1));
                break 'run None;
            }
            Ok(other) => {
                push(&mut stages, Outcome::fail(format!("unexpected kernel reply {other:?}"), 1));
                break 'run None;
            }
            Err(e) => {
                push(&mut stages, Outcome::fail(format!("kernel unreachable: {e}"), 1));
                break 'run None;
            }
        };
        push(&mut stages, Outcome::pass(1));
        let baseline = match golden_suite(rt, &Meter::unlimited()) {
            Ok(g) => g,
            Err(b) => {
                push(&mut stages, Outcome::fail(format!("baseline budget: {b}"), 0));
                break 'run None;
            }
        };
        let (o, sandboxed) = stage_sandbox(rt, p, cfg.limits);
        if !push(&mut stages, o) {
            break 'run None;
        }
        let (fork, after) = sandboxed.expect("passed sandbox");
        if !push(&mut stages, stage_regression(&baseline, &after, &fork.registry, p)) {
            break 'run None;
        }
        Some((token, descriptor))
    };
    let proposal_digest = p.digest();
    let final_verdict = match verdict {
        None => {
            let last = stages.last().expect("at least one stage");
            FinalVerdict::Rejected {
                stage: last.stage,
                reason: last.reason.clone(),
            }
        }
        Some((token, descriptor)) => sign(kernel, token, descriptor, &stages, proposal_digest),
    };
    let mut report = GauntletReport {
        proposal_id: p.proposal_id.clone(),
        proposal_digest,
        stages,
        final_verdict,
        run_id: None,
    };
    let summary = match &report.final_verdict {
        FinalVerdict::Approved { approval_id } => format!("approved {approval_id}"),
        FinalVerdict::Rejected { stage, reason } => format!("rejected {stage}: {reason}"),
    };
    let rec = RunRecord::new(
        rt.lineage.mint_id(GAUNTLET_KIND),
        GAUNTLET_KIND,
        Seed(0),
        &(p, &report.stages),
        vec![Datum::text(summary), Datum::text(canonical::digest_of(&report.stages).to_hex())],
    );
    report.run_id = rt.lineage.record_run(rec).ok();
    report
}

fn sign(
    kernel: &dyn KernelClient,
    token: AuthToken,
    descriptor: ActionDescriptor,
    stages: &[StageResult],
    proposal_digest: Digest,
) -> FinalVerdict {
    let report_digest = canonical::digest_of(&(proposal_digest, stages));
    match kernel.call(&Request::SignApproval {
        token,
        descriptor,
        report_digest,
    }) {
        Ok(Response::Approval { approval_id }) => FinalVerdict::Approved { approval_id },
        Ok(other) => FinalVerdict::Rejected {
            stage: 3,
            reason: format!("kernel refused approval: {other:?}"),
        },
        Err(e) => FinalVerdict::Rejected {
            stage: 3,
            reason: format!("kernel unreachable: {e}"),
        },
    }
}
