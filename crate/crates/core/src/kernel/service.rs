//! Kernel state machine. One instance lives on the kernel thread and
//! processes requests strictly in arrival order.

use super::policy::{self, AutonomyLevel, Permission};
use super::transport::{Request, Response};
use super::*;
use crate::lineage::Seed;
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use std::collections::{BTreeMap, BTreeSet, HashSet};

/// Target id used for autonomy-level changes.
pub const AUTONOMY_TARGET: &str = "kernel/autonomy";

/// Where the kernel's signing key comes from.
#[derive(Clone, Debug)]
pub enum KeySource {
    /// Derived from a seed (reproducible deployments and tests).
    Seeded(Seed),
    /// Fresh key from the operating system's RNG.
    Generated,
}

/// Bootstrap configuration. Holds no secret material: the signing key is
/// created on the kernel thread from `keys`.
#[derive(Clone, Debug)]
pub struct KernelConfig {
    pub keys: KeySource,
    /// Seed for nonces and approval ids.
    pub seed: Seed,
    pub operator: Option<PublicKey>,
    /// Module ids no action may target.
    pub pinned: BTreeSet<String>,
    pub level: AutonomyLevel,
    pub token_ttl: u64,
    pub nonce_capacity: usize,
}

impl KernelConfig {
    pub fn from_seed(seed: Seed) -> Self {
        Self {
            keys: KeySource::Seeded(seed.child("kernel/signing")),
            seed: seed.child("kernel/nonces"),
            operator: None,
            pinned: BTreeSet::new(),
            level: AutonomyLevel::A5,
            token_ttl: TOKEN_TTL,
            nonce_capacity: NONCE_CAPACITY,
        }
    }

    pub fn with_operator(mut self, key: PublicKey) -> Self {
        self.operator = Some(key);
        self
    }

    pub fn with_level(mut self, level: AutonomyLevel) -> Self {
        self.level = level;
        self
    }

    pub fn with_pins<I: IntoIterator<Item = String>>(mut self, pins: I) -> Self {
        self.pinned.extend(pins);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub emergency: bool,
    pub epoch: u64,
    pub issued: u64,
    pub denied: u64,
    pub verified: u64,
    pub rejected: u64,
    pub notifications: u64,
    pub alerts: u64,
    pub approvals_issued: u64,
    pub uptime_ticks: u64,
    pub level: AutonomyLevel,
    pub snapshot: Option<Digest>,
    pub last_denial: Option<String>,
}

struct Approval {
    descriptor_digest: Digest,
    consumed: bool,
}

pub(crate) struct KernelState {
    key: SigningKey,
    public: PublicKey,
    operator: Option<VerifyingKey>,
    pinned: BTreeSet<String>,
    level: AutonomyLevel,
    ttl: u64,
    capacity: usize,
    rng: ChaCha20Rng,
    clock: u64,
    emergency: bool,
    epoch: u64,
    snapshot: Option<Digest>,
    consumed: HashSet<[u8; 16]>,
    approvals: BTreeMap<String, Approval>,
    used_operator: HashSet<Vec<u8>>,
    issued: u64,
    denied: u64,
    verified: u64,
    rejected: u64,
    notifications: u64,
    alerts: u64,
    approvals_issued: u64,
    last_denial: Option<String>,
}

impl KernelState {
    pub(crate) fn new(cfg: KernelConfig) -> Self {
        let key = match cfg.keys {
            KeySource::Seeded(s) => signing_key_from(s),
            KeySource::Generated => {
                let mut bytes = [0u8; 32];
                rand::rngs::OsRng.fill_bytes(&mut bytes);
                SigningKey::from_bytes(&bytes)
            }
        };
        let public = PublicKey {
            scheme: SCHEME.into(),
            key: key.verifying_key().to_bytes(),
        };
        Self {
            key,
            public,
            operator: cfg.operator.and_then(|k| k.verifying_key()),
            pinned: cfg.pinned,
            level: cfg.level,
            ttl: cfg.token_ttl,
            capacity: cfg.nonce_capacity,
            rng: ChaCha20Rng::seed_from_u64(cfg.seed.0),
            clock: 0,
            emergency: false,
            epoch: 0,
            snapshot: None,
            consumed: HashSet::new(),
            approvals: BTreeMap::new(),
            used_operator: HashSet::new(),
            issued: 0,
            denied: 0,
            verified: 0,
            rejected: 0,
            notifications: 0,
            alerts: 0,
            approvals_issued: 0,
            last_denial: None,
        }
    }

    pub(crate) fn handle(&mut self, req: Request) -> Response {
        match req {
            Request::PublicKey => Response::PublicKey {
                key: self.public.clone(),
            },
            Request::Authorize {
                descriptor,
                gauntlet_approval,
                operator_approval,
            } => self.authorize(&descriptor, gauntlet_approval.as_deref(), operator_approval.as_ref()),
            Request::AuthorizeProposal { descriptor } => self.authorize_proposal(&descriptor),
            Request::SignApproval {
                token,
                descriptor,
                report_digest: _,
            } => self.sign_approval(&token, &descriptor),
            Request::Verify { token, descriptor } => {
                match self.check_token(&token, &descriptor, TokenPurpose::Action) {
                    Ok(()) => {
                        self.verified += 1;
                        Response::Verified {
                            valid: true,
                            reason: "ok".into(),
                        }
                    }
                    Err(reason) => {
                        self.rejected += 1;
                        Response::Verified {
                            valid: false,
                            reason: reason.into(),
                        }
                    }
                }
            }
            Request::EmergencyStop {
                reason: _,
                snapshot_digest,
            } => {
                if !self.emergency {
                    self.emergency = true;
                    self.epoch += 1;
                }
                if snapshot_digest.is_some() {
                    self.snapshot = snapshot_digest;
                }
                Response::Emergency {
                    engaged: true,
                    epoch: self.epoch,
                }
            }
            Request::ClearEmergency { credential } => self.clear(credential.as_ref()),
            Request::Health => Response::Health(self.health()),
            Request::Tick { now } => {
                if now < self.clock {
                    Response::Error {
                        message: format!("clock cannot move back from {} to {now}", self.clock),
                    }
                } else {
                    self.clock = now;
                    Response::Ack
                }
            }
            Request::Alert { module_id: _, detail: _ } => {
                self.alerts += 1;
                Response::Ack
            }
            Request::SetAutonomy {
                level,
                descriptor,
                token,
                operator_approval,
            } => self.set_autonomy(level, &descriptor, &token, operator_approval.as_ref()),
        }
    }

    fn health(&self) -> HealthRecord {
        HealthRecord {
            emergency: self.emergency,
            epoch: self.epoch,
            issued: self.issued,
            denied: self.denied,
            verified: self.verified,
            rejected: self.rejected,
            notifications: self.notifications,
            alerts: self.alerts,
            approvals_issued: self.approvals_issued,
            uptime_ticks: self.clock,
            level: self.level,
            snapshot: self.snapshot,
            last_denial: self.last_denial.clone(),
        }
    }

    fn deny(&mut self, reason: &str) -> Response {
        self.denied += 1;
        self.last_denial = Some(reason.to_string());
        Response::Denied {
            reason: reason.to_string(),
        }
    }

    /// Checks shared by every issuance path.
    fn gate(&self, d: &ActionDescriptor) -> Result<Permission, &'static str> {
        if self.emergency {
            return Err("emergency");
        }
        if self.pinned.contains(&d.target) {
            return Err("immutable");
        }
        if d.autonomy_level > self.level {
            return Err("autonomy-escalation");
        }
        match policy::permission(d.autonomy_level, d.action_class, d.architectural) {
            Permission::Deny => Err("autonomy"),
            p => Ok(p),
        }
    }

    fn authorize(
        &mut self,
        d: &ActionDescriptor,
        gauntlet: Option<&str>,
        operator: Option<&OperatorApproval>,
    ) -> Response {
        if !d.is_well_formed() {
            return Response::Error {
                message: "malformed descriptor".into(),
            };
        }
        let permission = match self.gate(d) {
            Ok(p) => p,
            Err(reason) => return self.deny(reason),
        };
        let digest = d.digest();
        let operator_sig = if permission == Permission::NeedsOperator {
            match operator {
                Some(a) if self.operator_ok(a, &digest) => Some(a.signature.clone()),
                Some(_) => return self.deny("operator-approval-invalid"),
                None => return self.deny("operator-approval-required"),
            }
        } else {
            None
        };
        if d.action_class == ActionClass::RsiApply {
            let ok = gauntlet
                .and_then(|id| self.approvals.get(id))
                .is_some_and(|a| !a.consumed && a.descriptor_digest == digest);
            if !ok {
                return self.deny("unvalidated");
            }
            self.approvals.get_mut(gauntlet.expect("checked")).expect("checked").consumed = true;
        }
        if let Some(sig) = operator_sig {
            self.used_operator.insert(sig);
        }
        let notify = matches!(permission, Permission::Allow { notify: true });
        if notify {
            self.notifications += 1;
        }
        Response::Token {
            token: self.issue(digest, TokenPurpose::Action),
            notify,
        }
    }

    fn authorize_proposal(&mut self, d: &ActionDescriptor) -> Response {
        if !d.is_well_formed() || d.action_class != ActionClass::RsiApply {
            return Response::Error {
                message: "malformed descriptor".into(),
            };
        }
        if let Err(reason) = self.gate(d) {
            return self.deny(reason);
        }
        Response::Token {
            token: self.issue(d.digest(), TokenPurpose::Proposal),
            notify: false,
        }
    }

    fn sign_approval(&mut self, token: &AuthToken, d: &ActionDescriptor) -> Response {
        if let Err(reason) = self.check_token(token, d, TokenPurpose::Proposal) {
            return self.deny(reason);
        }
        let mut id = [0u8; 16];
        self.rng.fill_bytes(&mut id);
        let approval_id = hex::encode(id);
        self.approvals.insert(
            approval_id.clone(),
            Approval {
                descriptor_digest: d.digest(),
                consumed: false,
            },
        );
        self.approvals_issued += 1;
        Response::Approval { approval_id }
    }

    fn operator_ok(&self, a: &OperatorApproval, digest: &Digest) -> bool {
        let Some(key) = &self.operator else {
            return false;
        };
        a.descriptor_digest == *digest
            && !self.used_operator.contains(&a.signature)
            && verify_operator(key, &approval_message(digest), &a.signature)
    }

    fn issue(&mut self, descriptor_digest: Digest, purpose: TokenPurpose) -> AuthToken {
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        let mut token = AuthToken {
            scheme: SCHEME.into(),
            purpose,
            descriptor_digest,
            nonce,
            issued_at: self.clock,
            expires_at: self.clock + self.ttl,
            signature: Vec::new(),
        };
        token.signature = self.key.sign(&token.signed_message()).to_bytes().to_vec();
        self.issued += 1;
        token
    }

    /// Full token check; consumes the nonce on success.
    fn check_token(
        &mut self,
        token: &AuthToken,
        d: &ActionDescriptor,
        purpose: TokenPurpose,
    ) -> Result<(), &'static str> {
        if self.emergency {
            return Err("emergency");
        }
        if token.scheme != SCHEME {
            return Err("scheme");
        }
        if token.purpose != purpose {
            return Err("purpose");
        }
        let vk = self.key.verifying_key();
        if !token.signature_valid(&vk) {
            return Err("signature");
        }
        if token.descriptor_digest != d.digest() {
            return Err("descriptor-mismatch");
        }
        if token.issued_at > self.clock {
            return Err("not-yet-valid");
        }
        if self.clock > token.expires_at {
            return Err("expired");
        }
        if self.consumed.contains(&token.nonce) {
            return Err("replayed");
        }
        if self.consumed.len() >= self.capacity {
            return Err("nonce-cache-full");
        }
        self.consumed.insert(token.nonce);
        Ok(())
    }

    fn clear(&mut self, credential: Option<&OperatorCredential>) -> Response {
        let Some(c) = credential else {
            return self.deny("unauthorized");
        };
        let Some(key) = &self.operator else {
            return self.deny("unauthorized");
        };
        if !self.emergency {
            return Response::Emergency {
                engaged: false,
                epoch: self.epoch,
            };
        }
        if c.epoch != self.epoch || !verify_operator(key, &clear_message(self.epoch), &c.signature) {
            return self.deny("unauthorized");
        }
        self.emergency = false;
        Response::Emergency {
            engaged: false,
            epoch: self.epoch,
        }
    }

    fn set_autonomy(
        &mut self,
        level: AutonomyLevel,
        d: &ActionDescriptor,
        token: &AuthToken,
        operator: Option<&OperatorApproval>,
    ) -> Response {
        if d.action_class != ActionClass::ConstraintRelaxation
            || d.target != AUTONOMY_TARGET
            || d.params_digest != canonical::digest_of(&level)
        {
            return self.deny("descriptor-mismatch");
        }
        let raising = level > self.level;
        if raising {
            let digest = d.digest();
            let ok = operator.is_some_and(|a| {
                let key = self.operator.as_ref();
                a.descriptor_digest == digest
                    && !self.used_operator.contains(&a.signature)
                    && key.is_some_and(|k| verify_operator(k, &raise_message(&digest), &a.signature))
            });
            if !ok {
                return self.deny("operator-approval-required");
            }
        }
        if let Err(reason) = self.check_token(token, d, TokenPurpose::Action) {
            return self.deny(reason);
        }
        if raising {
            self.used_operator.insert(operator.expect("checked").signature.clone());
        }
        self.level = level;
        Response::Ack
    }
}
