//! The governed world state and the executor that applies state-changing
//! actions only after their kernel token verifies.

use crate::belief::BeliefNetwork;
use crate::canonical::{self, Digest};
use crate::constraints::{ConstraintError, ConstraintSet};
use crate::context::{ContextGraph, Mutation};
use crate::gauntlet::Proposal;
use crate::kernel::policy;
use crate::kernel::{
    ActionClass, ActionDescriptor, AuthToken, AutonomyLevel, KernelClient, KernelConfig, KernelError,
    KernelHandle, Operator, Request, Response,
};
use crate::lineage::{Datum, LineageStore, RunId, RunRecord, Seed};
use crate::registry::{AlertSink, ModelArtifact, Registry};
use crate::solvers::SolverId;
use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Module ids pinned at bootstrap.
pub const PIN_POLICY: &str = "kernel/policy";
pub const PIN_SAFETY_SET: &str = "constraints/safety-set";
pub const PINNED_SOLVERS: [SolverId; 2] = [SolverId::TimeToRunaway, SolverId::ArrheniusRate];

/// Every module id pinned at bootstrap.
pub fn pinned_ids() -> Vec<String> {
    let mut v = vec![PIN_POLICY.to_string(), PIN_SAFETY_SET.to_string()];
    v.extend(PINNED_SOLVERS.iter().map(|s| s.model_id()));
    v
}

/// Lineage kind of executed actions.
pub const ACTION_KIND: &str = "action";
pub const SNAPSHOT_KIND: &str = "snapshot";

/// A state-changing operation. Every variant maps to one action class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Mutate { mutation: Mutation },
    Register { artifact: ModelArtifact },
    Untrain { model_id: String, version: u64 },
    Relax { constraint_id: String },
    SetTolerance { guarded: String, tolerance: f64 },
    Apply { proposal: Proposal },
    /// Drive an actuator node of the plant.
    Actuate { node: String, value: f64 },
}

impl Action {
    pub fn class(&self) -> ActionClass {
        match self {
            Action::Mutate { .. } => ActionClass::GraphMutation,
            Action::Register { .. } => ActionClass::ModelRegistration,
            Action::Untrain { .. } => ActionClass::Untrain,
            Action::Relax { .. } | Action::SetTolerance { .. } => ActionClass::ConstraintRelaxation,
            Action::Apply { .. } => ActionClass::RsiApply,
            Action::Actuate { .. } => ActionClass::ExternalEffect,
        }
    }

    pub fn target(&self) -> String {
        match self {
            Action::Mutate { mutation } => mutation_target(mutation),
            Action::Register { artifact } => artifact.spec.model_id.clone(),
            Action::Untrain { model_id, .. } => model_id.clone(),
            Action::Relax { constraint_id } => constraint_id.clone(),
            Action::SetTolerance { guarded, .. } => format!("envelope/{guarded}"),
            Action::Apply { proposal } => proposal.target.clone(),
            Action::Actuate { node, .. } => node.clone(),
        }
    }

    pub fn is_architectural(&self) -> bool {
        matches!(self, Action::Apply { proposal } if proposal.is_architectural())
    }

    /// The descriptor the kernel signs for this action.
    pub fn descriptor(&self, requester: &str, level: AutonomyLevel) -> ActionDescriptor {
        ActionDescriptor::new(self.class(), &self.target(), self, requester, level).architectural(self.is_architectural())
    }
}

fn mutation_target(m: &Mutation) -> String {
    match m {
        Mutation::AddNode { node, .. } | Mutation::RemoveNode { node, .. } => node.node_id.clone(),
        Mutation::AddEdge { edge } | Mutation::RemoveEdge { edge } => format!("{}->{}", edge.from, edge.to),
        Mutation::SetValue { node_id, .. } => node_id.clone(),
        Mutation::SetGain { from, to, .. } => format!("{from}->{to}"),
    }
}

/// Checks a token before an action is applied.
pub trait TokenVerifier {
    fn verify(&self, token: &AuthToken, descriptor: &ActionDescriptor) -> bool;
}

/// Production verifier: local signature check under the kernel's public key,
/// then the kernel's own verify (binding, expiry, nonce consumption,
/// emergency state).
pub struct KernelVerifier {
    kernel: Arc<dyn KernelClient>,
    key: VerifyingKey,
}

impl KernelVerifier {
    pub fn new(kernel: Arc<dyn KernelClient>) -> Result<Self, KernelError> {
        let key = match kernel.call(&Request::PublicKey)? {
            Response::PublicKey { key } => key
                .verifying_key()
                .ok_or_else(|| KernelError::Frame("unusable kernel key".into()))?,
            other => return Err(KernelError::Frame(format!("unexpected reply {other:?}"))),
        };
        Ok(Self { kernel, key })
    }
}

impl TokenVerifier for KernelVerifier {
    fn verify(&self, token: &AuthToken, descriptor: &ActionDescriptor) -> bool {
        if !token.signature_valid(&self.key) {
            return false;
        }
        matches!(
            self.kernel.call(&Request::Verify {
                token: token.clone(),
                descriptor: descriptor.clone(),
            }),
            Ok(Response::Verified { valid: true, .. })
        )
    }
}

/// Deliberately broken verifier that accepts everything. Exists only so the
/// attack suite can prove it detects a bypass.
pub struct AlwaysTrue;

impl TokenVerifier for AlwaysTrue {
    fn verify(&self, _: &AuthToken, _: &ActionDescriptor) -> bool {
        true
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("no authorization token")]
    MissingToken,
    #[error("token rejected")]
    TokenRejected,
    #[error("action failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("emergency stop engaged")]
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecReceipt {
    pub run_id: RunId,
    pub descriptor_digest: Digest,
    pub world_digest: Digest,
}

/// What the kernel snapshot preserves when the emergency stop fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub graph: Digest,
    pub registry: Digest,
    pub constraints: Digest,
    pub beliefs: Digest,
    pub open_rsi: Option<String>,
}

/// Registry alerts forwarded to the kernel.
pub struct KernelAlerts(pub Arc<dyn KernelClient>);

impl AlertSink for KernelAlerts {
    fn pin_mismatch(&self, module_id: &str, pinned: Digest, found: Digest) {
        let _ = self.0.call(&Request::Alert {
            module_id: module_id.to_string(),
            detail: format!("pinned {pinned} found {found}"),
        });
    }
}

/// All mutable world state plus its lineage store.
#[derive(Debug)]
pub struct Runtime {
    pub registry: Registry,
    pub graph: ContextGraph,
    pub constraints: ConstraintSet,
    pub beliefs: BeliefNetwork,
    pub lineage: Arc<LineageStore>,
    stop: Arc<AtomicBool>,
}

impl Runtime {
    /// Solver pack registered, nothing else.
    pub fn new(lineage: Arc<LineageStore>) -> Self {
        Self {
            registry: Registry::with_solvers(),
            graph: ContextGraph::new(),
            constraints: ConstraintSet::new(),
            beliefs: BeliefNetwork::new(),
            lineage,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Copy of the state over a scratch in-memory lineage store and its own
    /// stop flag. Nothing done to the fork reaches this runtime.
    pub fn fork(&self) -> Runtime {
        Runtime {
            registry: self.registry.clone(),
            graph: self.graph.clone(),
            constraints: self.constraints.clone(),
            beliefs: self.beliefs.clone(),
            lineage: Arc::new(LineageStore::new()),
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn stop_flag(&self) -> &AtomicBool {
        &self.stop
    }

    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Pin the immutable modules and close the pin table. Call once, after
    /// scenario setup and before any loop starts.
    pub fn seal_pins(&mut self) -> Result<(), crate::registry::RegistryError> {
        self.registry.pin_immutable(PIN_POLICY, policy::policy_digest())?;
        self.registry.pin_immutable(PIN_SAFETY_SET, self.constraints.safety_digest())?;
        for s in PINNED_SOLVERS {
            let hash = self.registry.get(&s.model_id(), None)?.content_hash();
            self.registry.pin_immutable(&s.model_id(), hash)?;
        }
        self.registry.seal();
        Ok(())
    }

    /// Re-hash every pinned module; returns the ids that no longer match.
    pub fn check_pins(&mut self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut current = vec![
            (PIN_POLICY.to_string(), policy::policy_digest()),
            (PIN_SAFETY_SET.to_string(), self.constraints.safety_digest()),
        ];
        for s in PINNED_SOLVERS {
            let h = self
                .registry
                .get(&s.model_id(), None)
                .map(|a| a.content_hash())
                .unwrap_or(Digest([0; 32]));
            current.push((s.model_id(), h));
        }
        for (id, h) in current {
            if self.registry.is_pinned(&id) && !self.registry.check_immutable(&id, h) {
                bad.push(id);
            }
        }
        bad
    }

    pub fn snapshot(&self, open_rsi: Option<String>) -> Snapshot {
        Snapshot {
            graph: self.graph.digest(),
            registry: self.registry.digest(),
            constraints: self.constraints.digest(),
            beliefs: self.beliefs.digest(),
            open_rsi,
        }
    }

    /// Digest of all world state (lineage excluded).
    pub fn world_digest(&self) -> Digest {
        canonical::digest_of(&(
            self.registry.digest(),
            self.graph.digest(),
            self.constraints.digest(),
            self.beliefs.digest(),
        ))
    }

    /// Engage the emergency stop: halt in-flight evaluation, snapshot the
    /// state to lineage, and tell the kernel. The local halt happens even if
    /// the kernel cannot be reached.
    pub fn emergency_stop(
        &self,
        kernel: &dyn KernelClient,
        reason: &str,
        open_rsi: Option<String>,
    ) -> Result<(Snapshot, RunId), KernelError> {
        self.stop.store(true, Ordering::SeqCst);
        let snap = self.snapshot(open_rsi);
        let digest = canonical::digest_of(&snap);
        let rec = RunRecord::new(
            self.lineage.mint_id(SNAPSHOT_KIND),
            SNAPSHOT_KIND,
            Seed(0),
            &(reason, &snap),
            vec![Datum::text(digest.to_hex())],
        );
        let id = self
            .lineage
            .record_run(rec)
            .map_err(|e| KernelError::Io(e.to_string()))?;
        kernel.call(&Request::EmergencyStop {
            reason: reason.to_string(),
            snapshot_digest: Some(digest),
        })?;
        Ok((snap, id))
    }

    /// Resume local evaluation after the kernel cleared the emergency.
    pub fn resume(&self) {
        self.stop.store(false, Ordering::SeqCst);
    }

    /// Apply `action` if `token` verifies for the descriptor recomputed from
    /// the action itself. Records one lineage run on success.
    pub fn execute(
        &mut self,
        action: &Action,
        requester: &str,
        level: AutonomyLevel,
        token: Option<&AuthToken>,
        verifier: &dyn TokenVerifier,
        parent: Option<RunId>,
    ) -> Result<ExecReceipt, ExecError> {
        let descriptor = action.descriptor(requester, level);
        let token = token.ok_or(ExecError::MissingToken)?;
        if !verifier.verify(token, &descriptor) {
            return Err(ExecError::TokenRejected);
        }
        self.apply(action)?;
        let world_digest = self.world_digest();
        let descriptor_digest = descriptor.digest();
        let rec = RunRecord::new(
            self.lineage.mint_id(ACTION_KIND),
            ACTION_KIND,
            Seed(0),
            &(action, &descriptor, token),
            vec![Datum::text(world_digest.to_hex())],
        )
        .with_parent(parent);
        let run_id = self
            .lineage
            .record_run(rec)
            .map_err(|e| ExecError::Failed(e.to_string()))?;
        Ok(ExecReceipt {
            run_id,
            descriptor_digest,
            world_digest,
        })
    }

    fn apply(&mut self, action: &Action) -> Result<(), ExecError> {
        let fail = |e: &dyn std::fmt::Display| ExecError::Failed(e.to_string());
        match action {
            Action::Mutate { mutation } => {
                self.graph.apply(mutation.clone()).map_err(|e| fail(&e))?;
            }
            Action::Register { artifact } => {
                self.registry.register(artifact.clone()).map_err(|e| fail(&e))?;
            }
            Action::Untrain { model_id, version } => {
                self.registry.untrain(model_id, *version).map_err(|e| fail(&e))?;
            }
            Action::Relax { constraint_id } => {
                // the token already verified; the set still refuses safety levels
                self.constraints.relax_constraint(constraint_id, "executor", &mut |_| true)?;
            }
            Action::SetTolerance { guarded, tolerance } => {
                if *tolerance > crate::constraints::MAX_TOLERANCE {
                    return Err(ExecError::Failed(format!(
                        "tolerance {tolerance} exceeds {}",
                        crate::constraints::MAX_TOLERANCE
                    )));
                }
                self.constraints.set_tolerance(guarded, *tolerance)?;
            }
            Action::Apply { proposal } => {
                proposal.apply(self).map_err(|e| fail(&e))?;
            }
            Action::Actuate { node, value } => {
                if !value.is_finite() {
                    return Err(ExecError::Failed("non-finite setpoint".into()));
                }
                self.graph.set_value(node, Some(*value)).map_err(|e| fail(&e))?;
            }
        }
        Ok(())
    }
}

/// Ask the kernel for an action token.
pub fn request_token(
    kernel: &dyn KernelClient,
    descriptor: &ActionDescriptor,
    gauntlet_approval: Option<String>,
    operator_approval: Option<crate::kernel::OperatorApproval>,
) -> Result<Result<(AuthToken, bool), String>, KernelError> {
    match kernel.call(&Request::Authorize {
        descriptor: descriptor.clone(),
        gauntlet_approval,
        operator_approval,
    })? {
        Response::Token { token, notify } => Ok(Ok((token, notify))),
        Response::Denied { reason } => Ok(Err(reason)),
        Response::Error { message } => Ok(Err(message)),
        other => Err(KernelError::Frame(format!("unexpected reply {other:?}"))),
    }
}

/// A kernel, its operator, and the runtime it guards.
pub struct Deployment {
    pub runtime: Runtime,
    pub kernel: Arc<dyn KernelClient>,
    pub verifier: KernelVerifier,
    pub operator: Operator,
    pub level: AutonomyLevel,
}

impl Deployment {
    /// Kernel config matching a runtime bootstrapped from `seed`.
    pub fn kernel_config(seed: Seed, level: AutonomyLevel) -> KernelConfig {
        KernelConfig::from_seed(seed)
            .with_operator(Operator::from_seed(seed).public())
            .with_level(level)
            .with_pins(pinned_ids())
    }

    /// Start an in-process kernel for `runtime` (pins sealed here if not yet).
    pub fn in_process(runtime: Runtime, seed: Seed, level: AutonomyLevel) -> Result<Self, KernelError> {
        let kernel: Arc<dyn KernelClient> = Arc::new(KernelHandle::spawn(Self::kernel_config(seed, level)));
        Self::with_kernel(runtime, kernel, seed, level)
    }

    pub fn with_kernel(
        mut runtime: Runtime,
        kernel: Arc<dyn KernelClient>,
        seed: Seed,
        level: AutonomyLevel,
    ) -> Result<Self, KernelError> {
        if !runtime.registry.is_sealed() {
            runtime
                .seal_pins()
                .map_err(|e| KernelError::Frame(e.to_string()))?;
        }
        runtime.registry.set_alert_sink(Arc::new(KernelAlerts(kernel.clone())));
        let verifier = KernelVerifier::new(kernel.clone())?;
        Ok(Self {
            runtime,
            kernel,
            verifier,
            operator: Operator::from_seed(seed),
            level,
        })
    }

    /// Authorize then execute in one step (no operator or gauntlet
    /// approval attached).
    pub fn act(&mut self, action: &Action, requester: &str) -> Result<ExecReceipt, ExecError> {
        let d = action.descriptor(requester, self.level);
        let token = match request_token(self.kernel.as_ref(), &d, None, None) {
            Ok(Ok((t, _))) => t,
            Ok(Err(reason)) => return Err(ExecError::Failed(format!("denied: {reason}"))),
            Err(e) => return Err(ExecError::Failed(e.to_string())),
        };
        self.runtime
            .execute(action, requester, self.level, Some(&token), &self.verifier, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextNode;

    fn deployment() -> Deployment {
        let rt = Runtime::new(Arc::new(LineageStore::new()));
        Deployment::in_process(rt, Seed(11), AutonomyLevel::A5).unwrap()
    }

    fn add_node(id: &str) -> Action {
        Action::Mutate {
            mutation: Mutation::AddNode {
                node: ContextNode::entity(id, Some(1.0)),
                edges: Vec::new(),
            },
        }
    }

    #[test]
    fn authorized_action_applies_and_records() {
        let mut d = deployment();
        let before = d.runtime.world_digest();
        let r = d.act(&add_node("x"), "test").unwrap();
        assert_ne!(r.world_digest, before);
        assert!(d.runtime.lineage.contains(&r.run_id));
    }

    #[test]
    fn token_for_other_action_rejected() {
        let mut d = deployment();
        let a = add_node("x");
        let b = add_node("y");
        let desc = a.descriptor("test", AutonomyLevel::A5);
        let (tok, _) = request_token(d.kernel.as_ref(), &desc, None, None).unwrap().unwrap();
        let before = d.runtime.world_digest();
        let r = d
            .runtime
            .execute(&b, "test", AutonomyLevel::A5, Some(&tok), &d.verifier, None);
        assert_eq!(r, Err(ExecError::TokenRejected));
        assert_eq!(d.runtime.execute(&a, "test", AutonomyLevel::A5, None, &d.verifier, None), Err(ExecError::MissingToken));
        assert_eq!(before, d.runtime.world_digest());
    }

    #[test]
    fn pinned_solver_untrain_denied() {
        let mut d = deployment();
        let a = Action::Untrain {
            model_id: "solver/time_to_runaway".into(),
            version: 1,
        };
        assert!(d.act(&a, "test").is_err());
        assert!(d.runtime.registry.contains("solver/time_to_runaway"));
    }

    #[test]
    fn pins_check_clean_after_seal() {
        let mut d = deployment();
        assert!(d.runtime.check_pins().is_empty());
        assert_eq!(d.runtime.registry.pins().len(), 4);
    }

    #[test]
    fn emergency_snapshot_recorded() {
        let d = deployment();
        let (_, id) = d.runtime.emergency_stop(d.kernel.as_ref(), "test", None).unwrap();
        assert!(d.runtime.stopped());
        assert_eq!(d.runtime.lineage.get(&id).unwrap().kind, SNAPSHOT_KIND);
        let Response::Health(h) = d.kernel.call(&Request::Health).unwrap() else {
            panic!()
        };
        assert!(h.emergency && h.snapshot.is_some());
    }

    #[test]
    fn fork_is_isolated() {
        let d = deployment();
        let mut f = d.runtime.fork();
        f.graph.add_node(ContextNode::entity("z", None)).unwrap();
        assert_ne!(f.world_digest(), d.runtime.world_digest());
        assert!(d.runtime.graph.node("z").is_none());
    }
}
