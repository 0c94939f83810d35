//! The sense → decide → act → learn loop over a small thermal plant.
//!
//! The plant is a context graph: heater, coolant and ambient entities feed a
//! temperature node through signed gains, and an Arrhenius model node turns
//! temperature into a reaction rate. Temperature is guarded by an
//! INVIOLABLE constraint and the rate by an EMERGENCY one. Policies map
//! events to actuator moves; decide simulates each move on the graph and
//! drops any whose predicted state breaks a safety constraint.

use crate::belief::Evidence;
use crate::budget::Meter;
use crate::canonical::{self, Digest};
use crate::constraints::{check_constraints, CmpOp, Constraint, Operand, Predicate, Severity, Verdict, DEFAULT_TOLERANCE};
use crate::context::{ContextEdge, ContextNode, NoObserver};
use crate::kernel::{ActionDescriptor, AutonomyLevel, OperatorApproval, Request};
use crate::lineage::{Datum, LineageStore, OutcomeRecord, RunId, RunRecord, Seed};
use crate::runtime::{request_token, Action, Deployment, Runtime};
use crate::solvers::SolverId;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

pub const LOOP_KIND: &str = "loop";
pub const TICK_KIND: &str = "tick";
pub const REQUESTER: &str = "aara";

pub const HEATER: &str = "plant/heater";
pub const COOLANT: &str = "plant/coolant";
pub const AMBIENT: &str = "plant/ambient";
pub const TEMPERATURE: &str = "plant/T";
pub const RATE: &str = "plant/rate";
pub const TEMP_LIMIT_ID: &str = "plant/temperature-limit";
pub const RATE_LIMIT_ID: &str = "plant/rate-limit";
/// Actuator ranges.
pub const HEATER_MAX: f64 = 150.0;
pub const COOLANT_MAX: f64 = 100.0;
pub const AMBIENT_RANGE: (f64, f64) = (260.0, 320.0);
/// Weight of a safety-constraint excess in the control objective.
const SAFETY_WEIGHT: f64 = 1_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum AaraError {
    #[error("receipt references run {0} which is not in lineage")]
    DanglingReceipt(RunId),
    #[error("plant: {0}")]
    Plant(String),
}

// -- events ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventSource {
    FileChange,
    Schedule,
    Webhook,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    /// New temperature set-point requested.
    Demand { target: f64 },
    /// Ambient temperature shift, felt after this tick's action.
    Ambient { delta: f64 },
    /// Periodic control tick.
    Control,
}

impl EventPayload {
    pub fn name(&self) -> &'static str {
        match self {
            EventPayload::Demand { .. } => "demand",
            EventPayload::Ambient { .. } => "ambient",
            EventPayload::Control => "control",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: u64,
    pub source: EventSource,
    pub payload: EventPayload,
    pub payload_digest: Digest,
    pub arrival: u64,
}

impl Event {
    pub fn new(event_id: u64, source: EventSource, payload: EventPayload, arrival: u64) -> Self {
        Self {
            event_id,
            source,
            payload_digest: canonical::digest_of(&payload),
            payload,
            arrival,
        }
    }
}

/// Events in arrival order.
#[derive(Clone, Debug, Default)]
pub struct EventQueue {
    events: VecDeque<Event>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Event) {
        self.events.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Drain up to `budget` events in arrival order.
pub fn sense(queue: &mut EventQueue, budget: usize) -> Vec<Event> {
    let n = budget.min(queue.events.len());
    queue.events.drain(..n).collect()
}

/// Seeded event schedule: a control event every tick, occasional demand
/// changes, and ambient drift with rare large fronts.
pub fn synthetic_events(seed: Seed, tick: u64, next_id: &mut u64, cfg: &LoopConfig) -> Vec<Event> {
    let mut rng = seed.child_indexed("aara/events", tick).rng();
    let mut out = Vec::new();
    let mut push = |payload, source| {
        out.push(Event::new(*next_id, source, payload, tick));
        *next_id += 1;
    };
    if rng.gen_bool(cfg.demand_prob) {
        let target = rng.gen_range(cfg.demand_range.0..=cfg.demand_range.1);
        push(EventPayload::Demand { target }, EventSource::Synthetic);
    }
    if rng.gen_bool(cfg.drift_prob) {
        let front = rng.gen_bool(cfg.front_prob);
        let scale = if front { cfg.front_size } else { cfg.drift_size };
        let delta = rng.gen_range(-scale..=scale);
        push(EventPayload::Ambient { delta }, EventSource::Synthetic);
    }
    push(EventPayload::Control, EventSource::Schedule);
    out
}

// -- policies --------------------------------------------------------------

/// Event pattern → actuator move, with the belief that tracks how often
/// the move pays off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub policy_id: String,
    /// Event type name, or `*` for any.
    pub pattern: String,
    pub node: String,
    pub delta: f64,
    pub belief_id: String,
}

impl Policy {
    pub fn new(id: &str, pattern: &str, node: &str, delta: f64) -> Self {
        Self {
            policy_id: id.to_string(),
            pattern: pattern.to_string(),
            node: node.to_string(),
            delta,
            belief_id: format!("policy/{id}"),
        }
    }

    pub fn matches(&self, e: &Event) -> bool {
        self.pattern == "*" || self.pattern == e.payload.name()
    }
}

pub fn default_policies() -> Vec<Policy> {
    vec![
        Policy::new("heat-small", "*", HEATER, 5.0),
        Policy::new("heat-large", "*", HEATER, 20.0),
        Policy::new("unheat-small", "*", HEATER, -5.0),
        Policy::new("unheat-large", "*", HEATER, -20.0),
        Policy::new("cool-more", "*", COOLANT, 10.0),
        Policy::new("cool-less", "*", COOLANT, -10.0),
    ]
}

// -- plant -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub ticks: u64,
    pub seed: Seed,
    pub level: AutonomyLevel,
    pub sense_budget: usize,
    pub policies: Vec<Policy>,
    /// Engage the emergency stop at the start of this tick.
    pub emergency_at: Option<u64>,
    pub temp_limit: f64,
    pub rate_limit: f64,
    pub initial_target: f64,
    pub demand_prob: f64,
    pub demand_range: (f64, f64),
    pub drift_prob: f64,
    pub drift_size: f64,
    pub front_prob: f64,
    pub front_size: f64,
    /// Envelope tolerance used for knowledge-gap detection.
    pub tolerance: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            ticks: 100,
            seed: Seed(0),
            level: AutonomyLevel::A5,
            sense_budget: 8,
            policies: default_policies(),
            emergency_at: None,
            temp_limit: 400.0,
            rate_limit: 0.3,
            initial_target: 340.0,
            demand_prob: 0.1,
            demand_range: (300.0, 440.0),
            drift_prob: 0.3,
            drift_size: 1.5,
            front_prob: 0.05,
            front_size: 20.0,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Plant graph, its safety constraints, and one belief per policy.
pub fn plant_runtime(lineage: Arc<LineageStore>, cfg: &LoopConfig) -> Result<Runtime, AaraError> {
    let fail = |e: &dyn std::fmt::Display| AaraError::Plant(e.to_string());
    let mut rt = Runtime::new(lineage);
    let g = &mut rt.graph;
    g.add_node(ContextNode::entity(HEATER, Some(20.0))).map_err(|e| fail(&e))?;
    g.add_node(ContextNode::entity(COOLANT, Some(10.0))).map_err(|e| fail(&e))?;
    g.add_node(ContextNode::entity(AMBIENT, Some(290.0))).map_err(|e| fail(&e))?;
    g.add_node(ContextNode::entity(TEMPERATURE, None)).map_err(|e| fail(&e))?;
    g.add_node(
        ContextNode::model(RATE, &SolverId::ArrheniusRate.model_id())
            .with_meta("bind.T", TEMPERATURE)
            .with_meta("const.A", "1e10")
            .with_meta("const.Ea", "80000"),
    )
    .map_err(|e| fail(&e))?;
    for (from, gain) in [(HEATER, 1.0), (COOLANT, -1.0), (AMBIENT, 1.0)] {
        g.add_edge(ContextEdge::causal(from, TEMPERATURE, gain)).map_err(|e| fail(&e))?;
    }
    g.add_edge(ContextEdge::dep(TEMPERATURE, RATE)).map_err(|e| fail(&e))?;
    g.clear_history();
    let key = |k: &str| Operand::Key(k.to_string());
    rt.constraints
        .add(Constraint::new(
            TEMP_LIMIT_ID,
            Severity::Inviolable,
            Predicate::new(key(TEMPERATURE), CmpOp::Lt, Operand::Const(cfg.temp_limit)),
            "reactor temperature below limit",
        ))
        .map_err(|e| fail(&e))?;
    rt.constraints
        .add(Constraint::new(
            RATE_LIMIT_ID,
            Severity::Emergency,
            Predicate::new(key(RATE), CmpOp::Lt, Operand::Const(cfg.rate_limit)),
            "reaction rate below limit",
        ))
        .map_err(|e| fail(&e))?;
    for p in &cfg.policies {
        rt.beliefs.ensure(&p.belief_id);
    }
    Ok(rt)
}

/// Plant values with `overrides` forced (do-inputs on a snapshot).
pub fn plant_state(rt: &Runtime, overrides: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>, AaraError> {
    let out = rt
        .graph
        .evaluate(&[TEMPERATURE, RATE], overrides, &rt.registry, &Meter::unlimited(), &mut NoObserver, None)
        .map_err(|e| AaraError::Plant(e.to_string()))?;
    Ok(out.values)
}

/// How far `state` is past each safety constraint, summed.
pub fn safety_excess(rt: &Runtime, state: &BTreeMap<String, f64>) -> f64 {
    let resolve = |o: &Operand| match o {
        Operand::Const(c) => Some(*c),
        Operand::Key(k) => state.get(k).copied(),
    };
    rt.constraints
        .iter()
        .filter(|c| c.severity.is_safety())
        .filter_map(|c| {
            let (l, r) = (resolve(&c.predicate.left)?, resolve(&c.predicate.right)?);
            let gap = match c.predicate.op {
                CmpOp::Lt | CmpOp::Le => l - r,
                CmpOp::Gt | CmpOp::Ge => r - l,
            };
            Some(if c.predicate.holds(state).unwrap_or(false) { 0.0 } else { gap.max(0.0) / r.abs().max(1.0) })
        })
        .sum()
}

/// Control cost: distance to the set-point plus a heavy safety penalty.
pub fn cost(rt: &Runtime, state: &BTreeMap<String, f64>, target: f64) -> f64 {
    let t = state.get(TEMPERATURE).copied().unwrap_or(f64::NAN);
    (t - target).abs() + SAFETY_WEIGHT * safety_excess(rt, state)
}

/// Whether `state` breaks an INVIOLABLE or EMERGENCY constraint.
pub fn violates_safety(rt: &Runtime, state: &BTreeMap<String, f64>) -> bool {
    match check_constraints(state, rt.constraints.applicable(state)) {
        Ok(r) => r.verdict == Verdict::Halted,
        Err(_) => true,
    }
}

// -- decide ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub policy_id: String,
    pub action: Action,
    pub utility: f64,
    pub predicted_improvement: f64,
    pub predicted: BTreeMap<String, f64>,
    /// Constraint ids the predicted state violates (non-safety only).
    pub predicted_violations: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub items: Vec<PlanItem>,
    /// Candidates dropped for a predicted safety violation.
    pub filtered: Vec<String>,
}

fn clamp_actuator(node: &str, v: f64) -> f64 {
    let max = if node == COOLANT { COOLANT_MAX } else { HEATER_MAX };
    v.clamp(0.0, max)
}

/// Candidate actions for `events`, simulated and filtered, best first.
pub fn decide(rt: &Runtime, events: &[Event], policies: &[Policy], target: f64) -> Result<Plan, AaraError> {
    let now = plant_state(rt, &BTreeMap::new())?;
    let now_cost = cost(rt, &now, target);
    let mut plan = Plan::default();
    let mut seen = std::collections::BTreeSet::new();
    for e in events {
        for p in policies.iter().filter(|p| p.matches(e)) {
            if !seen.insert(p.policy_id.clone()) {
                continue;
            }
            let Some(current) = now.get(&p.node) else { continue };
            let value = clamp_actuator(&p.node, current + p.delta);
            if value == *current {
                continue;
            }
            let overrides = [(p.node.clone(), value)].into();
            let predicted = plant_state(rt, &overrides)?;
            let check = check_constraints(&predicted, rt.constraints.applicable(&predicted))
                .map_err(|e| AaraError::Plant(e.to_string()))?;
            if check.verdict == Verdict::Halted {
                plan.filtered.push(p.policy_id.clone());
                continue;
            }
            let improvement = now_cost - cost(rt, &predicted, target);
            let belief = rt.beliefs.get(&p.belief_id).map_or(0.5, |b| b.mean());
            plan.items.push(PlanItem {
                policy_id: p.policy_id.clone(),
                action: Action::Actuate {
                    node: p.node.clone(),
                    value,
                },
                utility: improvement * belief,
                predicted_improvement: improvement,
                predicted,
                predicted_violations: check.violated,
            });
        }
    }
    plan.items.sort_by(|a, b| {
        b.utility
            .total_cmp(&a.utility)
            .then_with(|| a.policy_id.cmp(&b.policy_id))
    });
    Ok(plan)
}

// -- act -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReceiptStatus {
    /// A1: plan recorded, nothing executed.
    Logged,
    /// A2: proposal recorded for an external executor.
    Proposed,
    /// A3 without an operator approval.
    AwaitingApproval,
    Denied { reason: String },
    Executed { world_digest: Digest },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub policy_id: String,
    pub action: Action,
    pub status: ReceiptStatus,
    pub notification: bool,
    /// Lineage run of the execution; not part of the loop fingerprint.
    #[serde(skip)]
    pub run_id: Option<RunId>,
}

/// Source of operator approvals for A3.
pub type Approver<'a> = &'a dyn Fn(&ActionDescriptor) -> Option<OperatorApproval>;

/// Carry out the top plan item according to the autonomy level.
pub fn act(dep: &mut Deployment, plan: &Plan, level: AutonomyLevel, approver: Option<Approver>) -> Vec<Receipt> {
    let Some(item) = plan.items.first().filter(|i| i.utility > 0.0) else {
        return Vec::new();
    };
    let receipt = |status, notification| Receipt {
        policy_id: item.policy_id.clone(),
        action: item.action.clone(),
        status,
        notification,
        run_id: None,
    };
    match level {
        AutonomyLevel::A1 => return vec![receipt(ReceiptStatus::Logged, false)],
        AutonomyLevel::A2 => {
            return plan
                .items
                .iter()
                .map(|i| Receipt {
                    policy_id: i.policy_id.clone(),
                    action: i.action.clone(),
                    status: ReceiptStatus::Proposed,
                    notification: false,
                    run_id: None,
                })
                .collect()
        }
        _ => {}
    }
    let descriptor = item.action.descriptor(REQUESTER, level);
    let approval = if level == AutonomyLevel::A3 {
        match approver.and_then(|a| a(&descriptor)) {
            Some(a) => Some(a),
            None => return vec![receipt(ReceiptStatus::AwaitingApproval, false)],
        }
    } else {
        None
    };
    let (token, notify) = match request_token(dep.kernel.as_ref(), &descriptor, None, approval) {
        Ok(Ok(t)) => t,
        Ok(Err(reason)) => return vec![receipt(ReceiptStatus::Denied { reason }, false)],
        Err(e) => {
            return vec![receipt(
                ReceiptStatus::Denied {
                    reason: e.to_string(),
                },
                false,
            )]
        }
    };
    match dep
        .runtime
        .execute(&item.action, REQUESTER, level, Some(&token), &dep.verifier, None)
    {
        Ok(r) => {
            let mut out = receipt(
                ReceiptStatus::Executed {
                    world_digest: r.world_digest,
                },
                notify,
            );
            out.run_id = Some(r.run_id);
            vec![out]
        }
        Err(e) => vec![receipt(ReceiptStatus::Failed { reason: e.to_string() }, false)],
    }
}

// -- learn -----------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub updates: usize,
    pub successes: usize,
    pub gaps: Vec<String>,
}

/// Observed result of one executed action.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub actual: BTreeMap<String, f64>,
    pub actual_improvement: f64,
}

/// Turn outcomes into belief evidence and outcome records; flag states
/// that drifted from the prediction by more than twice the tolerance.
pub fn learn(
    rt: &mut Runtime,
    receipts: &[Receipt],
    plan: &Plan,
    observations: &[Observation],
    tolerance: f64,
    policies: &[Policy],
) -> Result<LearnSummary, AaraError> {
    let mut s = LearnSummary::default();
    let executed = receipts
        .iter()
        .filter(|r| matches!(r.status, ReceiptStatus::Executed { .. }));
    for (r, obs) in executed.zip(observations) {
        let run_id = r.run_id.clone().ok_or_else(|| AaraError::DanglingReceipt(RunId("?".into())))?;
        if !rt.lineage.contains(&run_id) {
            return Err(AaraError::DanglingReceipt(run_id));
        }
        let Some(item) = plan.items.iter().find(|i| i.policy_id == r.policy_id) else {
            continue;
        };
        let success = obs.actual_improvement > 0.0;
        let belief = policies
            .iter()
            .find(|p| p.policy_id == r.policy_id)
            .map(|p| p.belief_id.clone())
            .unwrap_or_else(|| format!("policy/{}", r.policy_id));
        let ev = if success {
            Evidence::success(&belief)
        } else {
            Evidence::failure(&belief)
        };
        rt.beliefs.update(&ev).map_err(|e| AaraError::Plant(e.to_string()))?;
        s.updates += 1;
        s.successes += success as usize;
        rt.lineage
            .record_outcome(OutcomeRecord {
                run_id,
                metric_name: "improvement".into(),
                value: obs.actual_improvement,
                success,
            })
            .map_err(|e| AaraError::Plant(e.to_string()))?;
        for (k, pred) in &item.predicted {
            if let Some(act) = obs.actual.get(k) {
                if crate::constraints::relative_error(*act, *pred) > 2.0 * tolerance {
                    s.gaps.push(k.clone());
                }
            }
        }
    }
    Ok(s)
}

// -- loop ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub events: Vec<u64>,
    pub target: f64,
    pub plan: Vec<(String, f64)>,
    pub filtered: Vec<String>,
    pub receipts: Vec<Receipt>,
    /// Plant state right after the action, before ambient drift.
    pub post_action: BTreeMap<String, f64>,
    /// State after drift.
    pub observed: BTreeMap<String, f64>,
    pub learned: LearnSummary,
    /// A6 only: knowledge gaps submitted for self-improvement.
    pub rsi_submissions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub ticks: Vec<TickRecord>,
    pub executed: usize,
    pub notifications: usize,
    pub denials: usize,
    pub gaps: usize,
    /// Ticks whose drifted state broke a safety constraint with no action
    /// responsible.
    pub excursions: usize,
    pub emergency_snapshot: Option<RunId>,
    #[serde(skip)]
    pub tick_latency_us: Vec<u64>,
    pub run_id: Option<RunId>,
}

impl LoopReport {
    pub fn fingerprint(&self) -> Digest {
        canonical::digest_of(&(&self.ticks, self.executed, self.notifications, self.denials, self.gaps, self.excursions))
    }

    pub fn render(&self) -> String {
        format!(
            "ticks {}  executed {}  notifications {}  denials {}  gaps {}  excursions {}{}\n",
            self.ticks.len(),
            self.executed,
            self.notifications,
            self.denials,
            self.gaps,
            self.excursions,
            if self.emergency_snapshot.is_some() { "  (emergency stop)" } else { "" }
        )
    }
}

/// A fresh plant deployment for `cfg`.
pub fn plant_deployment(lineage: Arc<LineageStore>, cfg: &LoopConfig) -> Result<Deployment, AaraError> {
    let rt = plant_runtime(lineage, cfg)?;
    Deployment::in_process(rt, cfg.seed, cfg.level).map_err(|e| AaraError::Plant(e.to_string()))
}

/// Run the loop for `cfg.ticks` ticks or until an emergency stop.
pub fn run_loop(dep: &mut Deployment, cfg: &LoopConfig, approver: Option<Approver>) -> Result<LoopReport, AaraError> {
    let mut report = LoopReport {
        ticks: Vec::new(),
        executed: 0,
        notifications: 0,
        denials: 0,
        gaps: 0,
        excursions: 0,
        emergency_snapshot: None,
        tick_latency_us: Vec::new(),
        run_id: None,
    };
    let mut queue = EventQueue::new();
    let mut next_id = 0;
    let mut target = cfg.initial_target;
    for tick in 0..cfg.ticks {
        if cfg.emergency_at == Some(tick) {
            let (_, id) = dep
                .runtime
                .emergency_stop(dep.kernel.as_ref(), &format!("operator stop at tick {tick}"), None)
                .map_err(|e| AaraError::Plant(e.to_string()))?;
            report.emergency_snapshot = Some(id);
            break;
        }
        let started = Instant::now();
        let _ = dep.kernel.call(&Request::Tick { now: tick });
        for e in synthetic_events(cfg.seed, tick, &mut next_id, cfg) {
            queue.push(e);
        }
        // sense
        let events = sense(&mut queue, cfg.sense_budget);
        let mut drift = 0.0;
        for e in &events {
            match e.payload {
                EventPayload::Demand { target: t } => target = t,
                EventPayload::Ambient { delta } => drift += delta,
                EventPayload::Control => {}
            }
        }
        let before = plant_state(&dep.runtime, &BTreeMap::new())?;
        let before_cost = cost(&dep.runtime, &before, target);
        // decide + act
        let plan = decide(&dep.runtime, &events, &cfg.policies, target)?;
        let receipts = act(dep, &plan, cfg.level, approver);
        let post_action = plant_state(&dep.runtime, &BTreeMap::new())?;
        for r in &receipts {
            if let (ReceiptStatus::Executed { world_digest }, Some(run)) = (&r.status, &r.run_id) {
                let rec = RunRecord::new(
                    dep.runtime.lineage.mint_id(TICK_KIND),
                    TICK_KIND,
                    cfg.seed,
                    &(tick, &post_action),
                    vec![
                        Datum::text(world_digest.to_hex()),
                        Datum::text(canonical::to_canonical(&post_action)),
                    ],
                )
                .with_parent(Some(run.clone()));
                dep.runtime
                    .lineage
                    .record_run(rec)
                    .map_err(|e| AaraError::Plant(e.to_string()))?;
            }
        }
        // the world moves on
        if drift != 0.0 {
            let now = before.get(AMBIENT).copied().unwrap_or(290.0);
            let next = (now + drift).clamp(AMBIENT_RANGE.0, AMBIENT_RANGE.1);
            dep.runtime
                .graph
                .set_value(AMBIENT, Some(next))
                .map_err(|e| AaraError::Plant(e.to_string()))?;
        }
        let observed = plant_state(&dep.runtime, &BTreeMap::new())?;
        if violates_safety(&dep.runtime, &observed) {
            report.excursions += 1;
        }
        // learn
        let obs: Vec<Observation> = receipts
            .iter()
            .filter(|r| matches!(r.status, ReceiptStatus::Executed { .. }))
            .map(|_| Observation {
                actual_improvement: before_cost - cost(&dep.runtime, &observed, target),
                actual: observed.clone(),
            })
            .collect();
        let learned = learn(&mut dep.runtime, &receipts, &plan, &obs, cfg.tolerance, &cfg.policies)?;
        let rsi_submissions = if cfg.level == AutonomyLevel::A6 {
            learned.gaps.clone()
        } else {
            Vec::new()
        };
        for r in &receipts {
            match r.status {
                ReceiptStatus::Executed { .. } => report.executed += 1,
                ReceiptStatus::Denied { .. } => report.denials += 1,
                _ => {}
            }
            report.notifications += r.notification as usize;
        }
        report.gaps += learned.gaps.len();
        report.ticks.push(TickRecord {
            tick,
            events: events.iter().map(|e| e.event_id).collect(),
            target,
            plan: plan.items.iter().map(|i| (i.policy_id.clone(), i.utility)).collect(),
            filtered: plan.filtered,
            receipts,
            post_action,
            observed,
            learned,
            rsi_submissions,
        });
        report.tick_latency_us.push(started.elapsed().as_micros() as u64);
    }
    let rec = RunRecord::new(
        dep.runtime.lineage.mint_id(LOOP_KIND),
        LOOP_KIND,
        cfg.seed,
        cfg,
        loop_outputs(&report),
    );
    report.run_id = dep.runtime.lineage.record_run(rec).ok();
    Ok(report)
}

pub fn loop_outputs(report: &LoopReport) -> Vec<Datum> {
    vec![
        Datum::Real(report.ticks.len() as f64),
        Datum::Real(report.executed as f64),
        Datum::text(report.fingerprint().to_hex()),
    ]
}

/// Lineage audit: every executed action's recorded post-state, checked
/// against the runtime's safety constraints. Returns offending run ids.
pub fn audit_post_states(rt: &Runtime) -> Vec<RunId> {
    let mut bad = Vec::new();
    for rec in rt.lineage.records_of_kind(TICK_KIND) {
        let Some(Datum::Text(state)) = rec.outputs.get(1) else {
            bad.push(rec.run_id.clone());
            continue;
        };
        let Ok(state) = serde_json::from_str::<BTreeMap<String, f64>>(state) else {
            bad.push(rec.run_id.clone());
            continue;
        };
        let parent_ok = rec.parent_run.as_ref().is_some_and(|p| rt.lineage.contains(p));
        if !parent_ok || violates_safety(rt, &state) {
            bad.push(rec.run_id.clone());
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deployment(cfg: &LoopConfig) -> Deployment {
        plant_deployment(Arc::new(LineageStore::new()), cfg).unwrap()
    }

    fn ev(id: u64, payload: EventPayload) -> Event {
        Event::new(id, EventSource::Synthetic, payload, 0)
    }

    #[test]
    fn sense_examples() {
        let mut q = EventQueue::new();
        assert!(sense(&mut q, 4).is_empty());
        for i in 0..3 {
            q.push(ev(i, EventPayload::Control));
        }
        let got: Vec<u64> = sense(&mut q, 2).iter().map(|e| e.event_id).collect();
        assert_eq!(got, vec![0, 1]);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn plant_temperature_and_rate() {
        let d = deployment(&LoopConfig::default());
        let s = plant_state(&d.runtime, &BTreeMap::new()).unwrap();
        assert_eq!(s[TEMPERATURE], 300.0);
        let k = crate::solvers::arrhenius_rate(1e10, 8e4, 300.0).unwrap();
        assert_eq!(s[RATE], k);
    }

    #[test]
    fn unsafe_move_is_filtered() {
        let cfg = LoopConfig::default();
        let mut d = deployment(&cfg);
        d.runtime.graph.set_value(HEATER, Some(105.0)).unwrap();
        // T = 290 + 105 - 10 = 385; +20 would be 405
        let plan = decide(&d.runtime, &[ev(0, EventPayload::Control)], &cfg.policies, 440.0).unwrap();
        assert!(plan.filtered.contains(&"heat-large".to_string()));
        assert!(plan.items.iter().all(|i| i.policy_id != "heat-large"));
        for i in &plan.items {
            assert!(!violates_safety(&d.runtime, &i.predicted));
        }
    }

    #[test]
    fn plan_is_ranked_by_utility() {
        let cfg = LoopConfig::default();
        let d = deployment(&cfg);
        let plan = decide(&d.runtime, &[ev(0, EventPayload::Control)], &cfg.policies, 340.0).unwrap();
        assert_eq!(plan.items[0].policy_id, "heat-large");
        assert!(plan.items.windows(2).all(|w| w[0].utility >= w[1].utility));
        let none = decide(&d.runtime, &[ev(0, EventPayload::Control)], &[Policy::new("x", "demand", HEATER, 1.0)], 340.0)
            .unwrap();
        assert!(none.items.is_empty());
    }

    #[test]
    fn a2_changes_nothing() {
        let cfg = LoopConfig {
            level: AutonomyLevel::A2,
            ticks: 20,
            ..LoopConfig::default()
        };
        let mut d = deployment(&cfg);
        let before = d.runtime.graph.node(HEATER).unwrap().value;
        let r = run_loop(&mut d, &cfg, None).unwrap();
        assert_eq!(r.executed, 0);
        assert!(r.ticks.iter().any(|t| !t.receipts.is_empty()));
        assert_eq!(before, d.runtime.graph.node(HEATER).unwrap().value);
    }

    #[test]
    fn a4_notifies_each_execution() {
        let cfg = LoopConfig {
            level: AutonomyLevel::A4,
            ..LoopConfig::default()
        };
        let mut d = deployment(&cfg);
        let plan = decide(&d.runtime, &[ev(0, EventPayload::Control)], &cfg.policies, 340.0).unwrap();
        let r = act(&mut d, &plan, AutonomyLevel::A4, None);
        assert_eq!(r.len(), 1);
        assert!(matches!(r[0].status, ReceiptStatus::Executed { .. }));
        assert!(r[0].notification);
    }

    #[test]
    fn a3_needs_operator() {
        let cfg = LoopConfig {
            level: AutonomyLevel::A3,
            ..LoopConfig::default()
        };
        let mut d = deployment(&cfg);
        let plan = decide(&d.runtime, &[ev(0, EventPayload::Control)], &cfg.policies, 340.0).unwrap();
        let r = act(&mut d, &plan, AutonomyLevel::A3, None);
        assert_eq!(r[0].status, ReceiptStatus::AwaitingApproval);
        let op = crate::kernel::Operator::from_seed(cfg.seed);
        let approve = |desc: &ActionDescriptor| Some(op.approve(desc));
        let r = act(&mut d, &plan, AutonomyLevel::A3, Some(&approve));
        assert!(matches!(r[0].status, ReceiptStatus::Executed { .. }), "{r:?}");
    }

    #[test]
    fn emergency_denies_everything() {
        let cfg = LoopConfig::default();
        let mut d = deployment(&cfg);
        d.kernel
            .call(&Request::EmergencyStop {
                reason: "t".into(),
                snapshot_digest: None,
            })
            .unwrap();
        let plan = decide(&d.runtime, &[ev(0, EventPayload::Control)], &cfg.policies, 340.0).unwrap();
        let r = act(&mut d, &plan, AutonomyLevel::A5, None);
        assert!(r.iter().all(|r| matches!(r.status, ReceiptStatus::Denied { .. })));
    }

    #[test]
    fn learning_moves_beliefs() {
        let cfg = LoopConfig::default();
        let mut d = deployment(&cfg);
        let plan = decide(&d.runtime, &[ev(0, EventPayload::Control)], &cfg.policies, 340.0).unwrap();
        let r = act(&mut d, &plan, AutonomyLevel::A5, None);
        let id = format!("policy/{}", r[0].policy_id);
        let m0 = d.runtime.beliefs.get(&id).unwrap().mean();
        let good = Observation {
            actual: plan.items[0].predicted.clone(),
            actual_improvement: 1.0,
        };
        learn(&mut d.runtime, &r, &plan, std::slice::from_ref(&good), 0.02, &cfg.policies).unwrap();
        let m1 = d.runtime.beliefs.get(&id).unwrap().mean();
        assert!(m1 > m0);
        let mut bad = good;
        bad.actual_improvement = -1.0;
        *bad.actual.get_mut(TEMPERATURE).unwrap() *= 1.0 + 3.0 * 0.02;
        let s = learn(&mut d.runtime, &r, &plan, &[bad], 0.02, &cfg.policies).unwrap();
        assert!(d.runtime.beliefs.get(&id).unwrap().mean() < m1);
        assert!(s.gaps.contains(&TEMPERATURE.to_string()));
        let mut dangling = r.clone();
        dangling[0].run_id = Some(RunId("nope".into()));
        assert!(matches!(
            learn(&mut d.runtime, &dangling, &plan, &[Observation { actual: BTreeMap::new(), actual_improvement: 0.0 }], 0.02, &cfg.policies),
            Err(AaraError::DanglingReceipt(_))
        ));
    }

    #[test]
    fn loop_is_deterministic_and_safe() {
        let cfg = LoopConfig {
            ticks: 300,
            seed: Seed(5),
            ..LoopConfig::default()
        };
        let mut d1 = deployment(&cfg);
        let r1 = run_loop(&mut d1, &cfg, None).unwrap();
        let mut d2 = deployment(&cfg);
        let r2 = run_loop(&mut d2, &cfg, None).unwrap();
        assert_eq!(r1.fingerprint(), r2.fingerprint());
        assert!(r1.executed > 0);
        assert!(audit_post_states(&d1.runtime).is_empty());
        assert_eq!(d1.runtime.lineage.records_of_kind(TICK_KIND).len(), r1.executed);
    }

    #[test]
    fn zero_ticks_and_emergency() {
        let cfg = LoopConfig {
            ticks: 0,
            ..LoopConfig::default()
        };
        let mut d = deployment(&cfg);
        assert!(run_loop(&mut d, &cfg, None).unwrap().ticks.is_empty());
        let cfg = LoopConfig {
            ticks: 50,
            emergency_at: Some(7),
            ..LoopConfig::default()
        };
        let mut d = deployment(&cfg);
        let r = run_loop(&mut d, &cfg, None).unwrap();
        assert_eq!(r.ticks.len(), 7);
        let snap = r.emergency_snapshot.unwrap();
        assert_eq!(d.runtime.lineage.get(&snap).unwrap().kind, crate::runtime::SNAPSHOT_KIND);
        assert!(d.runtime.stopped());
    }
}
