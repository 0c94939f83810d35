//! Deterministic toy scenarios, the golden activation graph, and the guarded
//! evaluation observer that enforces constraints while a graph evaluates.
//!
//! A scenario's report is a pure function of (name, config, seed). Wall-clock
//! timings are carried alongside but never enter the report digest or the
//! lineage outputs.

use crate::budget::Meter;
use crate::canonical::{self, Digest};
use crate::config::{Config, ConfigError};
use crate::constraints::{
    check_constraints, validate_output, CmpOp, Constraint, ConstraintSet, Envelope, Operand, Predicate, Severity,
    Verdict,
};
use crate::context::{Control, ContextEdge, ContextGraph, ContextNode, EvalObserver, GraphError};
use crate::lineage::{Datum, LineageStore, RunId, RunRecord, Seed};
use crate::registry::{ModelArtifact, ModelBody, Registry, RegistryError};
use crate::solvers::{SolverId, DEFAULT_RUNAWAY_DT};
use crate::surrogate;
use crate::train::{train_nano, Dataset, Link};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;
use thiserror::Error;

pub const SCENARIO_KIND: &str = "scenario";
pub const SCENARIOS: [&str; 4] = ["beam-design", "thermal-runaway", "cascade", "zero-shot-bootstrap"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("scenario failed: {0}")]
    Failed(String),
}

fn failed(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Failed(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScenarioVerdict {
    Pass,
    /// A safety constraint stopped evaluation after `node`.
    Halted { constraint: String, severity: Severity, node: String },
    /// Non-safety constraints were violated; evaluation completed.
    Advisory { violated: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: Seed,
    /// Canonical config text (sorted keys, defaults filled in).
    pub config: String,
    pub verdict: ScenarioVerdict,
    pub values: BTreeMap<String, f64>,
    /// Human-readable table rows.
    pub lines: Vec<String>,
    /// Wall-clock measurements in milliseconds; not part of the digest.
    #[serde(skip)]
    pub timings_ms: BTreeMap<String, f64>,
    #[serde(skip)]
    pub run_id: Option<RunId>,
}

impl ScenarioReport {
    pub fn digest(&self) -> Digest {
        canonical::digest_of(self)
    }

    pub fn render(&self) -> String {
        let mut s = format!("scenario {}  seed {}\n", self.name, self.seed);
        for l in &self.lines {
            s.push_str("  ");
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(&format!("  verdict: {}\n", canonical::to_canonical(&self.verdict)));
        s
    }
}

/// Lineage outputs of a scenario run.
pub fn scenario_outputs(report: &ScenarioReport) -> Vec<Datum> {
    vec![
        Datum::text(canonical::to_canonical(&report.verdict)),
        Datum::text(canonical::to_canonical(&report.values)),
        Datum::text(report.digest().to_hex()),
    ]
}

/// Replay recipe stored as the run's inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecipe {
    pub name: String,
    pub config: String,
}

/// Run a scenario and record it in `lineage`.
pub fn run_scenario(name: &str, cfg: &Config, seed: Seed, lineage: &LineageStore) -> Result<ScenarioReport, ScenarioError> {
    let mut report = compute(name, cfg, seed)?;
    let recipe = ScenarioRecipe {
        name: report.name.clone(),
        config: cfg.to_string(),
    };
    let rec = RunRecord::new(
        lineage.mint_id(SCENARIO_KIND),
        SCENARIO_KIND,
        seed,
        &recipe,
        scenario_outputs(&report),
    );
    report.run_id = Some(lineage.record_run(rec).map_err(failed)?);
    Ok(report)
}

/// Compute a scenario without recording it.
pub fn compute(name: &str, cfg: &Config, seed: Seed) -> Result<ScenarioReport, ScenarioError> {
    match name {
        "beam-design" => beam_design(cfg, seed),
        "thermal-runaway" => thermal_runaway(cfg, seed),
        "cascade" => cascade(cfg, seed),
        "zero-shot-bootstrap" => zero_shot(cfg, seed),
        other => Err(ScenarioError::Unknown(other.to_string())),
    }
}

/// Read every key in `defaults`, rejecting anything else.
fn read(cfg: &Config, defaults: &[(&str, f64)]) -> Result<(BTreeMap<String, f64>, Config), ConfigError> {
    let keys: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
    cfg.only(&keys)?;
    let mut vals = BTreeMap::new();
    let mut canon = Config::new();
    for (k, d) in defaults {
        let v = cfg.real(k, *d)?;
        vals.insert(k.to_string(), v);
        canon.set(k, v);
    }
    Ok((vals, canon))
}

// -- guarded evaluation ------------------------------------------------------

/// Evaluation observer that validates guarded model outputs against their
/// envelopes (substituting the solver value on violation) and halts as soon
/// as a safety constraint fails.
pub struct GuardedObserver<'a> {
    registry: &'a Registry,
    constraints: &'a ConstraintSet,
    /// (node, model value, delivered value) for every substitution.
    pub substitutions: Vec<(String, f64, f64)>,
    pub rejected: Vec<String>,
    pub checked: usize,
    pub advisories: BTreeSet<String>,
    pub halt: Option<(String, Severity)>,
}

impl<'a> GuardedObserver<'a> {
    pub fn new(registry: &'a Registry, constraints: &'a ConstraintSet) -> Self {
        Self {
            registry,
            constraints,
            substitutions: Vec::new(),
            rejected: Vec::new(),
            checked: 0,
            advisories: BTreeSet::new(),
            halt: None,
        }
    }
}

impl EvalObserver for GuardedObserver<'_> {
    fn after_model(
        &mut self,
        node_id: &str,
        model_id: &str,
        inputs: &BTreeMap<String, f64>,
        outputs: &mut Vec<(String, f64)>,
    ) -> Result<(), GraphError> {
        let Some(env) = self.constraints.envelope(model_id) else {
            return Ok(());
        };
        let Some(first) = outputs.first_mut() else {
            return Ok(());
        };
        self.checked += 1;
        let v = validate_output(first.1, inputs, env, self.registry).map_err(|e| match e {
            crate::constraints::ConstraintError::Domain(error) => GraphError::Model {
                node: node_id.to_string(),
                error,
            },
            other => GraphError::Malformed(other.to_string()),
        })?;
        match v.verdict {
            Verdict::Substituted => {
                let delivered = v.delivered.unwrap_or(f64::NAN);
                self.substitutions.push((node_id.to_string(), first.1, delivered));
                first.1 = delivered;
            }
            Verdict::Rejected => {
                self.rejected.push(node_id.to_string());
                first.1 = f64::NAN;
            }
            _ => {}
        }
        Ok(())
    }

    fn after_node(&mut self, _node_id: &str, values: &BTreeMap<String, f64>) -> Control {
        let applicable: Vec<&Constraint> = self.constraints.applicable(values).collect();
        let Ok(res) = check_constraints(values, applicable.iter().copied()) else {
            return Control::Continue;
        };
        for id in &res.violated {
            let c = self.constraints.get(id).expect("violated constraint exists");
            if c.severity.is_safety() {
                self.halt = Some((id.clone(), c.severity));
                return Control::Halt(format!("{} constraint `{}` violated", c.severity, id));
            }
            self.advisories.insert(id.clone());
        }
        Control::Continue
    }
}

fn verdict_of(obs: &GuardedObserver, halted_at: Option<&(String, String)>) -> ScenarioVerdict {
    match (&obs.halt, halted_at) {
        (Some((c, sev)), Some((node, _))) => ScenarioVerdict::Halted {
            constraint: c.clone(),
            severity: *sev,
            node: node.clone(),
        },
        _ if !obs.advisories.is_empty() => ScenarioVerdict::Advisory {
            violated: obs.advisories.iter().cloned().collect(),
        },
        _ => ScenarioVerdict::Pass,
    }
}

fn key_cmp(id: &str, sev: Severity, left: &str, op: CmpOp, right: &str, what: &str) -> Constraint {
    Constraint::new(
        id,
        sev,
        Predicate::new(Operand::Key(left.into()), op, Operand::Key(right.into())),
        what,
    )
}

// -- beam-design -------------------------------------------------------------

pub const BEAM_DESIGN_KEYS: [(&str, f64); 7] = [
    ("E", 200e9),
    ("F", 100.0),
    ("I", 8e-6),
    ("K", 2.0),
    ("L", 2.0),
    ("axial", 50_000.0),
    ("deflection_limit", 0.01),
];

fn beam_design(cfg: &Config, seed: Seed) -> Result<ScenarioReport, ScenarioError> {
    let (v, canon) = read(cfg, &BEAM_DESIGN_KEYS)?;
    let registry = Registry::with_solvers();
    let mut g = ContextGraph::new();
    let mut inputs = BTreeMap::new();
    for (k, id) in [
        ("F", "beam/F"),
        ("L", "beam/L"),
        ("E", "beam/E"),
        ("I", "beam/I"),
        ("K", "beam/K"),
        ("axial", "beam/axial"),
        ("deflection_limit", "beam/limit"),
    ] {
        g.add_node(ContextNode::entity(id, None)).map_err(failed)?;
        inputs.insert(id.to_string(), v[k]);
    }
    g.add_node(ContextNode::model("beam/delta", &SolverId::BeamDeflection.model_id()))
        .map_err(failed)?;
    g.add_node(ContextNode::model("beam/P_cr", &SolverId::EulerBuckling.model_id()))
        .map_err(failed)?;
    for p in ["beam/F", "beam/L", "beam/E", "beam/I"] {
        g.add_edge(ContextEdge::dep(p, "beam/delta")).map_err(failed)?;
    }
    for p in ["beam/E", "beam/I", "beam/L", "beam/K"] {
        g.add_edge(ContextEdge::dep(p, "beam/P_cr")).map_err(failed)?;
    }
    let mut cs = ConstraintSet::new();
    cs.add(key_cmp(
        "beam/deflection",
        Severity::Critical,
        "beam/delta",
        CmpOp::Le,
        "beam/limit",
        "tip deflection within the serviceability limit",
    ))
    .map_err(failed)?;
    cs.add(key_cmp(
        "beam/buckling",
        Severity::Inviolable,
        "beam/P_cr",
        CmpOp::Ge,
        "beam/axial",
        "critical buckling load at least the axial load",
    ))
    .map_err(failed)?;

    let mut obs = GuardedObserver::new(&registry, &cs);
    let out = g
        .evaluate(
            &["beam/delta", "beam/P_cr", "beam/axial", "beam/limit"],
            &inputs,
            &registry,
            &Meter::unlimited(),
            &mut obs,
            None,
        )
        .map_err(failed)?;
    let verdict = verdict_of(&obs, out.halted.as_ref());
    let mut lines = Vec::new();
    for id in ["beam/delta", "beam/limit", "beam/P_cr", "beam/axial"] {
        match out.values.get(id) {
            Some(x) => lines.push(format!("{id:<12} {x:.6e}")),
            None => lines.push(format!("{id:<12} (not evaluated)")),
        }
    }
    Ok(ScenarioReport {
        name: "beam-design".into(),
        seed,
        config: canon.to_string(),
        verdict,
        values: out.values,
        lines,
        timings_ms: BTreeMap::new(),
        run_id: None,
    })
}

// -- thermal-runaway ---------------------------------------------------------

pub const THERMAL_KEYS: [(&str, f64); 7] = [
    ("A", 1e10),
    ("Ea", 8e4),
    ("T0", 300.0),
    ("T_max", 400.0),
    ("batch_duration", 600.0),
    ("dT_ad", 100.0),
    ("dt", DEFAULT_RUNAWAY_DT),
];

/// Node that only exists when the batch may proceed.
pub const THERMAL_PROCEED: &str = "thermal/proceed";
pub const THERMAL_RUNAWAY_MODEL: &str = "thermal/runaway";

fn runaway_artifact(dt: f64) -> ModelArtifact {
    let mut art = ModelArtifact::solver(SolverId::TimeToRunaway);
    art.spec.model_id = THERMAL_RUNAWAY_MODEL.into();
    if let ModelBody::Solver { coefficients, .. } = &mut art.body {
        coefficients.insert("dt".into(), dt);
    }
    art
}

fn thermal_runaway(cfg: &Config, seed: Seed) -> Result<ScenarioReport, ScenarioError> {
    let (v, canon) = read(cfg, &THERMAL_KEYS)?;
    if !(v["dt"] > 0.0) {
        return Err(ConfigError::BadValue {
            key: "dt".into(),
            value: v["dt"].to_string(),
        }
        .into());
    }
    let mut registry = Registry::with_solvers();
    registry.register(runaway_artifact(v["dt"])).map_err(failed)?;
    let mut g = ContextGraph::new();
    let mut inputs = BTreeMap::new();
    for k in ["T0", "dT_ad", "A", "Ea", "T_max"] {
        let id = format!("thermal/{k}");
        g.add_node(ContextNode::entity(&id, None)).map_err(failed)?;
        inputs.insert(id, v[k]);
    }
    g.add_node(ContextNode::entity("thermal/batch", None)).map_err(failed)?;
    inputs.insert("thermal/batch".into(), v["batch_duration"]);
    g.add_node(ContextNode::model("thermal/t_runaway", THERMAL_RUNAWAY_MODEL).with_meta("output", "t_runaway"))
        .map_err(failed)?;
    for k in ["T0", "dT_ad", "A", "Ea", "T_max"] {
        g.add_edge(ContextEdge::dep(&format!("thermal/{k}"), "thermal/t_runaway"))
            .map_err(failed)?;
    }
    g.add_node(ContextNode::entity(THERMAL_PROCEED, None)).map_err(failed)?;
    g.add_edge(ContextEdge::dep("thermal/t_runaway", THERMAL_PROCEED)).map_err(failed)?;
    g.add_edge(ContextEdge::new("thermal/batch", THERMAL_PROCEED, crate::context::Relation::Dependency, 0.0))
        .map_err(failed)?;

    let mut cs = ConstraintSet::new();
    cs.add(key_cmp(
        "thermal/no-runaway",
        Severity::Inviolable,
        "thermal/t_runaway",
        CmpOp::Ge,
        "thermal/batch",
        "runaway cannot occur within the batch",
    ))
    .map_err(failed)?;

    let mut obs = GuardedObserver::new(&registry, &cs);
    let out = g
        .evaluate(&[THERMAL_PROCEED], &inputs, &registry, &Meter::unlimited(), &mut obs, None)
        .map_err(failed)?;
    let verdict = verdict_of(&obs, out.halted.as_ref());
    let solver_out = out.outputs.get("thermal/t_runaway").cloned().unwrap_or_default();
    let reachable = solver_out
        .iter()
        .find(|(k, _)| k == "reachable")
        .map(|(_, x)| *x)
        .unwrap_or(f64::NAN);
    let mut values = out.values.clone();
    values.insert("thermal/reachable".into(), reachable);
    let t = values.get("thermal/t_runaway").copied().unwrap_or(f64::NAN);
    let lines = vec![
        format!("t_runaway      {t:.3} s"),
        format!("reachable      {}", reachable == 1.0),
        format!("batch          {:.3} s", v["batch_duration"]),
        format!(
            "proceed        {}",
            if out.values.contains_key(THERMAL_PROCEED) { "yes" } else { "no (halted)" }
        ),
    ];
    Ok(ScenarioReport {
        name: "thermal-runaway".into(),
        seed,
        config: canon.to_string(),
        verdict,
        values,
        lines,
        timings_ms: BTreeMap::new(),
        run_id: None,
    })
}

// -- cascade -----------------------------------------------------------------

pub const CASCADE_KEYS: [(&str, f64); 3] = [("gain_building", 0.5), ("gain_traffic", 0.4), ("magnitude", 1.0)];

/// Three-domain toy graph: grid feeds buildings, buildings feed traffic.
pub fn cascade_graph(gain_building: f64, gain_traffic: f64) -> Result<ContextGraph, GraphError> {
    let mut g = ContextGraph::new();
    for id in ["grid/power", "building/hvac", "traffic/signals"] {
        g.add_node(ContextNode::entity(id, Some(0.0)))?;
    }
    g.add_edge(ContextEdge::causal("grid/power", "building/hvac", gain_building))?;
    g.add_edge(ContextEdge::causal("building/hvac", "traffic/signals", gain_traffic))?;
    g.clear_history();
    Ok(g)
}

fn cascade(cfg: &Config, seed: Seed) -> Result<ScenarioReport, ScenarioError> {
    let (v, canon) = read(cfg, &CASCADE_KEYS)?;
    let g = cascade_graph(v["gain_building"], v["gain_traffic"]).map_err(|e| match e {
        GraphError::NonFiniteGain => ScenarioError::Config(ConfigError::BadValue {
            key: "gain".into(),
            value: "non-finite".into(),
        }),
        other => failed(other),
    })?;
    let trace = g.intervene("grid/power", v["magnitude"], None).map_err(failed)?;
    let values = trace
        .entries
        .iter()
        .map(|e| (e.node_id.clone(), e.magnitude))
        .collect();
    Ok(ScenarioReport {
        name: "cascade".into(),
        seed,
        config: canon.to_string(),
        verdict: ScenarioVerdict::Pass,
        values,
        lines: trace.render().lines().map(String::from).collect(),
        timings_ms: BTreeMap::new(),
        run_id: None,
    })
}

// -- zero-shot-bootstrap -----------------------------------------------------

pub const BOOTSTRAP_KEYS: [(&str, f64); 4] = [
    ("eval_points", 500.0),
    ("noise", 0.01),
    ("rows", 20_000.0),
    ("tolerance", 0.02),
];

fn count(v: &BTreeMap<String, f64>, key: &str) -> Result<usize, ConfigError> {
    let x = v[key];
    if x >= 2.0 && x.fract() == 0.0 && x <= 1e7 {
        Ok(x as usize)
    } else {
        Err(ConfigError::BadValue {
            key: key.into(),
            value: x.to_string(),
        })
    }
}

/// Graph with the surrogate as a single model node fed by its four inputs.
fn surrogate_graph() -> Result<ContextGraph, GraphError> {
    let mut g = ContextGraph::new();
    g.add_node(ContextNode::model("beam/delta", surrogate::BEAM_MODEL))?;
    for f in surrogate::BEAM_FIELDS {
        let id = format!("beam/{f}");
        g.add_node(ContextNode::entity(&id, None))?;
        g.add_edge(ContextEdge::dep(&id, "beam/delta"))?;
    }
    Ok(g)
}

/// Fraction of `points` whose surrogate output passes the envelope, routed
/// through guarded graph evaluation.
fn envelope_pass_rate(
    registry: &Registry,
    cs: &ConstraintSet,
    points: &[BTreeMap<String, f64>],
) -> Result<(f64, Vec<(String, f64, f64)>), ScenarioError> {
    let g = surrogate_graph().map_err(failed)?;
    let mut obs = GuardedObserver::new(registry, cs);
    for p in points {
        let inputs = p.iter().map(|(k, x)| (format!("beam/{k}"), *x)).collect();
        g.evaluate(&["beam/delta"], &inputs, registry, &Meter::unlimited(), &mut obs, None)
            .map_err(failed)?;
    }
    let subs = obs.substitutions.len() + obs.rejected.len();
    Ok((1.0 - subs as f64 / obs.checked.max(1) as f64, obs.substitutions))
}

fn zero_shot(cfg: &Config, seed: Seed) -> Result<ScenarioReport, ScenarioError> {
    let (v, canon) = read(cfg, &BOOTSTRAP_KEYS)?;
    let rows = count(&v, "rows")?;
    let eval_points = count(&v, "eval_points")?;
    let noise = v["noise"];
    if !(0.0..0.5).contains(&noise) {
        return Err(ConfigError::BadValue {
            key: "noise".into(),
            value: noise.to_string(),
        }
        .into());
    }
    let tolerance = v["tolerance"];
    let mut timings_ms = BTreeMap::new();

    // day zero: solvers only, plus an untrained surrogate behind an envelope
    let mut registry = Registry::with_solvers();
    let zero = vec![0.0; 1 + surrogate::BEAM_FIELDS.len() + surrogate::BEAM_TILES];
    registry.register(surrogate::beam_artifact(zero, None)).map_err(failed)?;
    let mut cs = ConstraintSet::new();
    let mut env: Envelope = surrogate::beam_envelope();
    env.tolerance_rel = tolerance;
    cs.add_envelope(env, &registry).map_err(failed)?;

    // operational data: solver answers observed with multiplicative noise
    let truth = SolverId::BeamDeflection.model_id();
    let noise_dist = Normal::new(0.0, noise).map_err(failed)?;
    let mut rng = seed.child("bootstrap/noise").rng();
    let mut samples = Vec::with_capacity(rows);
    for x in surrogate::sample_beam_inputs(seed.child("bootstrap/ops"), rows) {
        let (_, y) = registry.call(&truth, None, &x, &Meter::unlimited()).map_err(failed)?;
        let y = y[0].1 * (1.0 + noise_dist.sample(&mut rng)).max(1e-3);
        samples.push((x, y));
    }
    let eval = surrogate::sample_beam_inputs(seed.child("bootstrap/eval"), eval_points);
    let (pre_rate, _) = envelope_pass_rate(&registry, &cs, &eval)?;

    let started = Instant::now();
    let ds = Dataset::from_samples(&surrogate::beam_features(), Link::Log, &samples).map_err(failed)?;
    let fit = train_nano(&ds, seed.child("bootstrap/train")).map_err(failed)?;
    timings_ms.insert("train".to_string(), started.elapsed().as_secs_f64() * 1e3);
    let version = registry
        .register(surrogate::beam_artifact(fit.coefficients, Some(fit.training_digest)))
        .map_err(|e: RegistryError| failed(e))?;
    let (post_rate, post_subs) = envelope_pass_rate(&registry, &cs, &eval)?;

    let mut values = BTreeMap::new();
    values.insert("pre_pass_rate".to_string(), pre_rate);
    values.insert("post_pass_rate".to_string(), post_rate);
    values.insert("post_substitutions".to_string(), post_subs.len() as f64);
    values.insert("rows".to_string(), rows as f64);
    values.insert("version".to_string(), version as f64);
    let verdict = if post_rate >= pre_rate {
        ScenarioVerdict::Pass
    } else {
        ScenarioVerdict::Advisory {
            violated: vec!["bootstrap/pass-rate".into()],
        }
    };
    let lines = vec![
        format!("operational rows      {rows}"),
        format!("training digest       {}", fit.training_digest.short()),
        format!("pre-training pass     {:.4}", pre_rate),
        format!("post-training pass    {:.4}", post_rate),
        format!("substitutions (post)  {}", post_subs.len()),
    ];
    Ok(ScenarioReport {
        name: "zero-shot-bootstrap".into(),
        seed,
        config: canon.to_string(),
        verdict,
        values,
        lines,
        timings_ms,
        run_id: None,
    })
}

// -- golden activation graph -------------------------------------------------

pub const GOLDEN_MODELS: usize = 40;
pub const GOLDEN_TARGET: &str = "golden/m4";

/// Forty model nodes: the target sits at the end of a five-model chain, and
/// the remaining 35 form seven independent five-model chains. Each chain is
/// fed by one entity node.
pub fn golden_activation_graph() -> ContextGraph {
    let mut g = ContextGraph::new();
    let model = SolverId::BeamDeflection.model_id();
    let mut add_chain = |prefix: &str| {
        let src = format!("{prefix}src");
        g.add_node(ContextNode::entity(&src, Some(1.0))).expect("fresh id");
        let mut prev = src;
        for i in 0..5 {
            let id = format!("{prefix}m{i}");
            g.add_node(ContextNode::model(&id, &model)).expect("fresh id");
            g.add_edge(ContextEdge::dep(&prev, &id)).expect("acyclic");
            prev = id;
        }
    };
    add_chain("golden/");
    for c in 0..7 {
        add_chain(&format!("other/c{c}/"));
    }
    g.clear_history();
    g
}
