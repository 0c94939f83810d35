//! The self-improvement engine: evolve a model's core coefficients against
//! its envelope solver, validate the best candidate through the gauntlet,
//! and roll it out behind a canary.
//!
//! Improvement trajectories are independent island populations. UCB1
//! decides which island gets the next generation; stop-loss retires
//! islands that stall.

use crate::canonical::{self, Digest};
use crate::constraints::{relative_error, Envelope};
use crate::gauntlet::{self, FinalVerdict, GauntletConfig, GauntletReport, Payload, Proposal};
use crate::kernel::KernelError;
use crate::lineage::{Datum, RunId, RunRecord, Seed};
use crate::registry::{ModelArtifact, ModelBody};
use crate::runtime::{request_token, Action, Deployment};
use crate::train::LinearModel;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const CYCLE_KIND: &str = "cycle";
pub const CANARY_KIND: &str = "canary";
/// Genes may move this far from the production value in either direction.
pub const GENE_HALF_WIDTH: f64 = 0.5;
pub const ELITE_FRACTION: f64 = 0.1;
pub const TOURNAMENT: usize = 3;
pub const MUTATION_RATE: f64 = 0.1;
/// Mutation σ as a fraction of the gene range.
pub const MUTATION_SIGMA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum RsiError {
    #[error("archive is empty")]
    EmptyArchive,
    #[error("no evaluation point is valid")]
    NoValidPoints,
    #[error("no active trajectory")]
    NoTrajectories,
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("bad target: {0}")]
    Target(String),
    #[error("kernel: {0}")]
    Kernel(String),
    #[error("apply failed: {0}")]
    Apply(String),
}

impl From<KernelError> for RsiError {
    fn from(e: KernelError) -> Self {
        RsiError::Kernel(e.to_string())
    }
}

/// Bounded parameter vector for one model's leading coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub target: String,
    pub genes: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl Genome {
    /// Genes seeded from `coefficients`, each bounded by
    /// [`GENE_HALF_WIDTH`] around its starting value.
    pub fn seeded(target: &str, coefficients: &[f64]) -> Self {
        Self {
            target: target.to_string(),
            genes: coefficients.to_vec(),
            bounds: coefficients
                .iter()
                .map(|&c| (c - GENE_HALF_WIDTH, c + GENE_HALF_WIDTH))
                .collect(),
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.genes
            .iter()
            .zip(&self.bounds)
            .all(|(g, (lo, hi))| lo <= g && g <= hi)
    }

    /// Coefficient assignments in the gauntlet's `c<i>` naming.
    pub fn as_param_set(&self) -> BTreeMap<String, f64> {
        self.genes
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("c{i}"), *g))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub genome: Genome,
    pub fitness: Option<f64>,
    pub parents: Vec<String>,
    pub generation: u32,
}

impl Individual {
    fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Best first; ties broken by id.
fn ranked(archive: &[Individual]) -> Vec<&Individual> {
    let mut v: Vec<&Individual> = archive.iter().collect();
    v.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.id.cmp(&b.id)));
    v
}

pub fn best(archive: &[Individual]) -> Option<&Individual> {
    ranked(archive).first().copied()
}

/// Next generation: elites copied, the rest bred by tournament selection,
/// uniform crossover and clipped Gaussian mutation.
pub fn propose(
    archive: &[Individual],
    population: usize,
    seed: Seed,
    generation: u32,
    prefix: &str,
) -> Result<Vec<Individual>, RsiError> {
    if archive.is_empty() {
        return Err(RsiError::EmptyArchive);
    }
    let mut rng = seed.rng();
    let ranked = ranked(archive);
    let elites = ((population as f64 * ELITE_FRACTION).ceil() as usize).min(ranked.len()).min(population);
    let mut out = Vec::with_capacity(population);
    for (k, e) in ranked.iter().take(elites).enumerate() {
        out.push(Individual {
            id: format!("{prefix}g{generation}-{k}"),
            genome: e.genome.clone(),
            fitness: e.fitness,
            parents: vec![e.id.clone()],
            generation,
        });
    }
    let tournament = |rng: &mut rand_chacha::ChaCha8Rng| -> &Individual {
        // ranked order: the smallest sampled rank wins
        let idx: Vec<usize> = (0..TOURNAMENT).map(|_| rng.gen_range(0..ranked.len())).collect();
        ranked[*idx.iter().min().expect("tournament non-empty")]
    };
    while out.len() < population {
        let a = tournament(&mut rng);
        let b = tournament(&mut rng);
        let mut genome = a.genome.clone();
        for (i, g) in genome.genes.iter_mut().enumerate() {
            if rng.gen_bool(0.5) {
                *g = b.genome.genes[i];
            }
            let (lo, hi) = genome.bounds[i];
            if rng.gen_bool(MUTATION_RATE) {
                let sigma = MUTATION_SIGMA * (hi - lo);
                *g += Normal::new(0.0, sigma).expect("positive sigma").sample(&mut rng);
            }
            *g = g.clamp(lo, hi);
        }
        let mut parents = vec![a.id.clone()];
        if b.id != a.id {
            parents.push(b.id.clone());
        }
        out.push(Individual {
            id: format!("{prefix}g{generation}-{}", out.len()),
            genome,
            fitness: None,
            parents,
            generation,
        });
    }
    Ok(out)
}

/// Held-out evaluation points with cached solver truth and precomputed
/// feature rows.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub inputs: Vec<BTreeMap<String, f64>>,
    rows: Vec<Vec<(usize, f64)>>,
    pub truth: Vec<f64>,
    /// Points dropped because the solver or the model refused them.
    pub skipped: usize,
    base: LinearModel,
}

impl EvalSet {
    pub fn build(
        base: &LinearModel,
        envelope: &Envelope,
        registry: &crate::registry::Registry,
        inputs: Vec<BTreeMap<String, f64>>,
    ) -> Result<Self, RsiError> {
        let mut set = Self {
            inputs: Vec::new(),
            rows: Vec::new(),
            truth: Vec::new(),
            skipped: 0,
            base: base.clone(),
        };
        for x in inputs {
            match (base.features.row(&x), envelope.truth(&x, registry)) {
                (Ok(row), Ok(t)) if t.is_finite() => {
                    set.rows.push(row);
                    set.truth.push(t);
                    set.inputs.push(x);
                }
                _ => set.skipped += 1,
            }
        }
        if set.truth.is_empty() {
            return Err(RsiError::NoValidPoints);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Fitness = −mean relative error of the model with `genome` swapped in
/// for its leading coefficients.
pub fn evaluate(genome: &Genome, eval: &EvalSet) -> Result<f64, RsiError> {
    if eval.is_empty() {
        return Err(RsiError::NoValidPoints);
    }
    let coef = |i: usize| genome.genes.get(i).copied().unwrap_or(eval.base.coefficients[i]);
    let mut total = 0.0;
    for (row, t) in eval.rows.iter().zip(&eval.truth) {
        let mut s = coef(0);
        for &(i, v) in row {
            s += coef(i + 1) * v;
        }
        let y = match eval.base.link {
            crate::train::Link::Identity => s,
            crate::train::Link::Log => s.exp(),
        };
        total += relative_error(y, *t);
    }
    Ok(-total / eval.len() as f64)
}

// -- trajectory allocation -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub pulls: u64,
    pub mean_reward: f64,
    pub active: bool,
    /// Consecutive pulls without improvement.
    pub streak: u32,
    /// Best fitness after each pull, starting with the value before any.
    pub best_history: Vec<f64>,
}

impl Trajectory {
    pub fn new(id: &str, initial_best: f64) -> Self {
        Self {
            trajectory_id: id.to_string(),
            pulls: 0,
            mean_reward: 0.0,
            active: true,
            streak: 0,
            best_history: vec![initial_best],
        }
    }

    /// Fold one reward into the running mean.
    pub fn record_reward(&mut self, reward: f64) {
        self.pulls += 1;
        self.mean_reward += (reward - self.mean_reward) / self.pulls as f64;
    }

    /// Record a pull that produced `best` as the trajectory's best fitness.
    pub fn record_best(&mut self, best: f64) -> f64 {
        let prev = *self.best_history.last().expect("seeded history");
        let reward = (best - prev).clamp(0.0, 1.0);
        if best > prev {
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        self.best_history.push(best.max(prev));
        self.record_reward(reward);
        reward
    }
}

/// UCB1 choice among active trajectories.
pub fn ucb1_select(trajectories: &[Trajectory], c: f64) -> Result<String, RsiError> {
    let mut active: Vec<&Trajectory> = trajectories.iter().filter(|t| t.active).collect();
    if active.is_empty() {
        return Err(RsiError::NoTrajectories);
    }
    active.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    if let Some(t) = active.iter().find(|t| t.pulls == 0) {
        return Ok(t.trajectory_id.clone());
    }
    let n: u64 = active.iter().map(|t| t.pulls).sum();
    let ln_n = (n as f64).ln();
    let mut best: Option<(&Trajectory, f64)> = None;
    for t in active {
        let score = t.mean_reward + c * (ln_n / t.pulls as f64).sqrt();
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((t, score));
        }
    }
    Ok(best.expect("non-empty").0.trajectory_id.clone())
}

/// Retire the trajectory if its best fitness moved less than `min_delta`
/// over the last `window` pulls. Retirement is permanent.
pub fn stop_loss(t: &mut Trajectory, window: usize, min_delta: f64) -> bool {
    if t.active && t.best_history.len() > window {
        let now = t.best_history[t.best_history.len() - 1];
        let then = t.best_history[t.best_history.len() - 1 - window];
        if now - then < min_delta {
            t.active = false;
        }
    }
    t.active
}

// -- canary ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanaryConfig {
    pub schedule: Vec<f64>,
    pub window: usize,
    pub threshold: f64,
}

impl Default for CanaryConfig {
    fn default() -> Self {
        Self {
            schedule: vec![0.1, 0.5, 1.0],
            window: 100,
            threshold: 0.02,
        }
    }
}

/// One completed canary window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanaryState {
    pub candidate_version: u64,
    pub fraction: f64,
    pub window: usize,
    pub routed: usize,
    pub baseline_metric: f64,
    pub candidate_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum CanaryVerdict {
    Promoted { version: u64 },
    RolledBack { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanaryReport {
    pub windows: Vec<CanaryState>,
    pub verdict: CanaryVerdict,
    pub run_id: Option<RunId>,
    /// The promotion's action run, when promoted.
    pub action_run: Option<RunId>,
}

/// Whether request `input` goes to the candidate at schedule step `step`.
pub fn routed(input: &BTreeMap<String, f64>, step: usize, fraction: f64) -> bool {
    let h = canonical::digest_of(&(input, step)).prefix_u64();
    (h as f64) / 18_446_744_073_709_551_616.0 < fraction
}

fn linear_body(art: &ModelArtifact) -> Result<&LinearModel, RsiError> {
    match &art.body {
        ModelBody::Linear(m) => Ok(m),
        ModelBody::Solver { .. } => Err(RsiError::Target(format!("`{}` is not a learned model", art.spec.model_id))),
    }
}

/// Roll an approved proposal out gradually over `traffic`. Production is
/// only touched on promotion, through a kernel-verified apply.
pub fn apply_canary(
    dep: &mut Deployment,
    proposal: &Proposal,
    approval_id: &str,
    traffic: &[BTreeMap<String, f64>],
    cfg: &CanaryConfig,
    gauntlet_cfg: &GauntletConfig,
    parent: Option<RunId>,
) -> Result<CanaryReport, RsiError> {
    let action = Action::Apply {
        proposal: proposal.clone(),
    };
    let descriptor = action.descriptor(&gauntlet_cfg.requester, gauntlet_cfg.level);
    let token = match request_token(dep.kernel.as_ref(), &descriptor, Some(approval_id.to_string()), None)? {
        Ok((t, _)) => t,
        Err(reason) => return Err(RsiError::Unauthorized(reason)),
    };
    let rt = &dep.runtime;
    let target = &proposal.target;
    let Payload::ParamChange { set } = &proposal.payload else {
        return Err(RsiError::Target("canary needs a parameter change".into()));
    };
    let envelope = rt
        .constraints
        .envelope(target)
        .cloned()
        .ok_or_else(|| RsiError::Target(format!("no envelope guards `{target}`")))?;
    let baseline_art = rt.registry.get(target, None).map_err(|e| RsiError::Target(e.to_string()))?;
    let baseline = linear_body(&baseline_art)?.clone();
    let candidate_art = gauntlet::param_changed(&rt.registry, target, set).map_err(RsiError::Target)?;
    let candidate = linear_body(&candidate_art)?.clone();
    let candidate_version = rt.registry.latest(target).map_err(|e| RsiError::Target(e.to_string()))? + 1;

    let mut windows = Vec::new();
    let mut stream = traffic.iter();
    let mut verdict = None;
    for (step, &fraction) in cfg.schedule.iter().enumerate() {
        let (mut base_sum, mut cand_sum, mut routed_n, mut served) = (0.0, 0.0, 0usize, 0usize);
        while served < cfg.window {
            let Some(x) = stream.next() else { break };
            served += 1;
            if !routed(x, step, fraction) {
                continue;
            }
            let (Ok(t), Ok(b), Ok(c)) = (envelope.truth(x, &rt.registry), baseline.predict(x), candidate.predict(x)) else {
                continue;
            };
            base_sum += relative_error(b, t);
            cand_sum += relative_error(c, t);
            routed_n += 1;
        }
        let state = CanaryState {
            candidate_version,
            fraction,
            window: served,
            routed: routed_n,
            baseline_metric: if routed_n > 0 { base_sum / routed_n as f64 } else { f64::NAN },
            candidate_metric: if routed_n > 0 { cand_sum / routed_n as f64 } else { f64::NAN },
        };
        let bad = if served < cfg.window {
            Some("traffic exhausted".to_string())
        } else if routed_n == 0 {
            Some("no routed traffic".to_string())
        } else if state.candidate_metric > state.baseline_metric + cfg.threshold {
            Some(format!(
                "candidate error {:.4} exceeds baseline {:.4} + {}",
                state.candidate_metric, state.baseline_metric, cfg.threshold
            ))
        } else {
            None
        };
        windows.push(state);
        if let Some(reason) = bad {
            verdict = Some(CanaryVerdict::RolledBack { step, reason });
            break;
        }
    }
    let verdict = verdict.unwrap_or(CanaryVerdict::Promoted {
        version: candidate_version,
    });
    let rec = RunRecord::new(
        rt.lineage.mint_id(CANARY_KIND),
        CANARY_KIND,
        Seed(0),
        &(proposal.digest(), approval_id, &windows),
        vec![Datum::text(canonical::to_canonical(&verdict))],
    )
    .with_parent(parent);
    let run_id = rt.lineage.record_run(rec).map_err(|e| RsiError::Apply(e.to_string()))?;
    let mut action_run = None;
    if let CanaryVerdict::Promoted { .. } = verdict {
        let receipt = dep
            .runtime
            .execute(
                &action,
                &gauntlet_cfg.requester,
                gauntlet_cfg.level,
                Some(&token),
                &dep.verifier,
                Some(run_id.clone()),
            )
            .map_err(|e| RsiError::Apply(e.to_string()))?;
        action_run = Some(receipt.run_id);
    }
    Ok(CanaryReport {
        windows,
        verdict,
        run_id: Some(run_id),
        action_run,
    })
}

// -- cycle -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsiConfig {
    pub target: String,
    pub generations: u32,
    pub population: usize,
    pub trajectories: usize,
    pub eval_points: usize,
    pub exploration: f64,
    pub stop_window: usize,
    pub min_delta: f64,
    /// Log-uniform sampling box for evaluation and canary traffic.
    pub domain: Vec<(String, f64, f64)>,
    pub canary: CanaryConfig,
    /// How the starting world was built; carried for replay.
    pub world: String,
}

impl RsiConfig {
    /// Defaults for the learned beam surrogate.
    pub fn beam() -> Self {
        Self {
            target: crate::surrogate::BEAM_MODEL.into(),
            generations: 200,
            population: 30,
            trajectories: 3,
            eval_points: 200,
            exploration: std::f64::consts::SQRT_2,
            stop_window: 10,
            min_delta: 1e-6,
            domain: crate::surrogate::BEAM_FIELDS
                .iter()
                .zip(crate::surrogate::BEAM_RANGES)
                .map(|(n, (lo, hi))| (n.to_string(), lo, hi))
                .collect(),
            canary: CanaryConfig::default(),
            world: "beam-offset".into(),
        }
    }
}

/// `n` records drawn log-uniformly from `domain`.
pub fn sample_domain(domain: &[(String, f64, f64)], seed: Seed, n: usize) -> Vec<BTreeMap<String, f64>> {
    let mut rng = seed.rng();
    (0..n)
        .map(|_| {
            domain
                .iter()
                .map(|(name, lo, hi)| {
                    let z: f64 = rng.gen_range(lo.ln()..=hi.ln());
                    (name.clone(), z.exp())
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CycleOutcome {
    Promoted { version: u64 },
    RolledBack { step: usize, reason: String },
    Rejected { stage: u8, reason: String },
    NoImprovement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub target: String,
    pub seed: Seed,
    pub generations_run: u32,
    pub initial_fitness: f64,
    /// Archive best fitness after each generation.
    pub best_history: Vec<f64>,
    pub best: Individual,
    pub trajectories: Vec<Trajectory>,
    pub evaluations: u64,
    pub skipped_points: usize,
    pub gauntlet: Option<GauntletReport>,
    pub canary: Option<CanaryReport>,
    pub outcome: CycleOutcome,
    pub run_id: Option<RunId>,
}

impl CycleReport {
    pub fn final_fitness(&self) -> f64 {
        self.best.fitness.unwrap_or(f64::NEG_INFINITY)
    }

    /// Digest of the parts that do not depend on lineage numbering.
    pub fn fingerprint(&self) -> Digest {
        canonical::digest_of(&(
            &self.best_history,
            &self.best,
            &self.trajectories,
            &self.outcome,
            // approval ids are kernel nonces, not outcomes
            self.gauntlet.as_ref().map(|g| (&g.stages, g.rejected_at())),
            self.canary.as_ref().map(|c| (&c.windows, &c.verdict)),
        ))
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "target {}  generations {}  evaluations {}\n  mean relative error: {:.6} -> {:.6}\n",
            self.target,
            self.generations_run,
            self.evaluations,
            -self.initial_fitness,
            -self.final_fitness()
        );
        for t in &self.trajectories {
            s.push_str(&format!(
                "  trajectory {}  pulls {}  mean reward {:.6}  {}\n",
                t.trajectory_id,
                t.pulls,
                t.mean_reward,
                if t.active { "active" } else { "stopped" }
            ));
        }
        if let Some(g) = &self.gauntlet {
            s.push_str(&g.render());
        }
        s.push_str(&format!("  outcome: {}\n", canonical::to_canonical(&self.outcome)));
        s
    }
}

/// One full propose → evaluate → validate → apply cycle.
pub fn rsi_cycle(dep: &mut Deployment, cfg: &RsiConfig, gcfg: &GauntletConfig, seed: Seed) -> Result<CycleReport, RsiError> {
    let rt = &dep.runtime;
    let base_art = rt
        .registry
        .get(&cfg.target, None)
        .map_err(|e| RsiError::Target(e.to_string()))?;
    let base = linear_body(&base_art)?.clone();
    let envelope = rt
        .constraints
        .envelope(&cfg.target)
        .cloned()
        .ok_or_else(|| RsiError::Target(format!("no envelope guards `{}`", cfg.target)))?;
    let n_genes = (1 + base.features.input_names().len()).min(base.coefficients.len());
    let eval = EvalSet::build(
        &base,
        &envelope,
        &rt.registry,
        sample_domain(&cfg.domain, seed.child("rsi/eval"), cfg.eval_points),
    )?;

    let root = Genome::seeded(&cfg.target, &base.coefficients[..n_genes]);
    let initial_fitness = evaluate(&root, &eval)?;
    let mut evaluations = 1u64;
    let founder = Individual {
        id: "root".into(),
        genome: root,
        fitness: Some(initial_fitness),
        parents: Vec::new(),
        generation: 0,
    };
    let mut islands: BTreeMap<String, Vec<Individual>> = BTreeMap::new();
    let mut trajectories = Vec::new();
    for k in 0..cfg.trajectories.max(1) {
        let id = format!("t{k}");
        islands.insert(id.clone(), vec![founder.clone()]);
        trajectories.push(Trajectory::new(&id, initial_fitness));
    }

    let mut best_history = Vec::new();
    let mut generations_run = 0;
    for g in 1..=cfg.generations {
        let Ok(tid) = ucb1_select(&trajectories, cfg.exploration) else {
            break;
        };
        let archive = &islands[&tid];
        let mut next = propose(
            archive,
            cfg.population,
            seed.child(&format!("rsi/{tid}")).child_indexed("gen", g as u64),
            g,
            &format!("{tid}/"),
        )?;
        for ind in next.iter_mut().filter(|i| i.fitness.is_none()) {
            ind.fitness = Some(evaluate(&ind.genome, &eval)?);
            evaluations += 1;
        }
        let island_best = best(&next).and_then(|b| b.fitness).expect("evaluated");
        islands.insert(tid.clone(), next);
        let t = trajectories
            .iter_mut()
            .find(|t| t.trajectory_id == tid)
            .expect("selected trajectory exists");
        t.record_best(island_best);
        stop_loss(t, cfg.stop_window, cfg.min_delta);
        let overall = islands
            .values()
            .filter_map(|a| best(a).and_then(|b| b.fitness))
            .fold(f64::NEG_INFINITY, f64::max);
        best_history.push(overall);
        generations_run = g;
    }

    let all: Vec<Individual> = islands.values().flatten().cloned().collect();
    let champion = best(&all).expect("islands seeded").clone();

    let mut report = CycleReport {
        target: cfg.target.clone(),
        seed,
        generations_run,
        initial_fitness,
        best_history,
        best: champion.clone(),
        trajectories,
        evaluations,
        skipped_points: eval.skipped,
        gauntlet: None,
        canary: None,
        outcome: CycleOutcome::NoImprovement,
        run_id: None,
    };

    if champion.fitness.unwrap_or(f64::NEG_INFINITY) > initial_fitness {
        let mut proposal = Proposal::new(
            &format!("rsi/{}/{}", cfg.target, seed.0),
            &cfg.target,
            Payload::ParamChange {
                set: champion.genome.as_param_set(),
            },
        );
        proposal.provenance = champion.id.split('/').next().unwrap_or_default().to_string();
        let g = gauntlet::run_gauntlet(&dep.runtime, dep.kernel.as_ref(), &proposal, gcfg);
        match &g.final_verdict {
            FinalVerdict::Rejected { stage, reason } => {
                report.outcome = CycleOutcome::Rejected {
                    stage: *stage,
                    reason: reason.clone(),
                };
            }
            FinalVerdict::Approved { approval_id } => {
                let traffic = canary_traffic(&base_art, cfg, seed);
                let c = apply_canary(dep, &proposal, approval_id, &traffic, &cfg.canary, gcfg, g.run_id.clone())?;
                report.outcome = match &c.verdict {
                    CanaryVerdict::Promoted { version } => CycleOutcome::Promoted { version: *version },
                    CanaryVerdict::RolledBack { step, reason } => CycleOutcome::RolledBack {
                        step: *step,
                        reason: reason.clone(),
                    },
                };
                report.canary = Some(c);
            }
        }
        report.gauntlet = Some(g);
    }

    let rec = RunRecord::new(
        dep.runtime.lineage.mint_id(CYCLE_KIND),
        CYCLE_KIND,
        seed,
        &(cfg, gcfg.level, &gcfg.requester),
        cycle_outputs(&report),
    );
    report.run_id = dep.runtime.lineage.record_run(rec).ok();
    Ok(report)
}

/// Starting world named by `RsiConfig::world`: `beam-offset` (surrogate
/// 10% off) or `beam-offset:<frac>`.
pub fn world_runtime(world: &str, lineage: std::sync::Arc<crate::lineage::LineageStore>) -> Result<crate::runtime::Runtime, RsiError> {
    let frac = match world.split_once(':') {
        None if world == "beam-offset" => 0.1,
        Some(("beam-offset", f)) => f
            .parse::<f64>()
            .ok()
            .filter(|f| f.is_finite() && *f > -1.0)
            .ok_or_else(|| RsiError::Target(format!("bad offset in world `{world}`")))?,
        _ => return Err(RsiError::Target(format!("unknown world `{world}`"))),
    };
    let mut rt = crate::runtime::Runtime::new(lineage);
    rt.registry
        .register(crate::surrogate::beam_artifact(crate::surrogate::offset_beam_coefficients(frac), None))
        .map_err(|e| RsiError::Target(e.to_string()))?;
    rt.constraints
        .add_envelope(crate::surrogate::beam_envelope(), &rt.registry)
        .map_err(|e| RsiError::Target(e.to_string()))?;
    rt.graph
        .add_node(crate::context::ContextNode::entity("beam/load", Some(crate::surrogate::BEAM_REFERENCES[0])))
        .map_err(|e| RsiError::Target(e.to_string()))?;
    rt.graph.clear_history();
    Ok(rt)
}

/// Lineage outputs of a cycle run.
pub fn cycle_outputs(report: &CycleReport) -> Vec<Datum> {
    vec![
        Datum::text(canonical::to_canonical(&report.outcome)),
        Datum::Real(report.final_fitness()),
        Datum::text(report.fingerprint().to_hex()),
    ]
}

/// Golden probes followed by randomized requests, enough for the schedule.
fn canary_traffic(art: &ModelArtifact, cfg: &RsiConfig, seed: Seed) -> Vec<BTreeMap<String, f64>> {
    let need = cfg.canary.schedule.len() * cfg.canary.window;
    let mut t = gauntlet::probe_inputs(art);
    t.truncate(need);
    t.extend(sample_domain(&cfg.domain, seed.child("rsi/canary"), need - t.len()));
    t
}
