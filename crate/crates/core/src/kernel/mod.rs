//! The safety kernel: an isolated signer that must authorize every
//! state-changing action, with an emergency stop that is always honored.
//!
//! The kernel runs on its own thread and is reached only through
//! length-prefixed request/response frames ([`transport`]), either over an
//! in-process channel or TCP. Its signing key is created inside that thread
//! and never leaves it.

pub mod policy;
pub mod service;
pub mod transport;

use crate::canonical::{self, Digest};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use std::fmt;

pub use policy::{AutonomyLevel, Permission};
pub use service::{HealthRecord, KernelConfig};
pub use transport::{KernelClient, KernelError, KernelHandle, Request, Response, TcpKernel};

/// Signature scheme tag carried on the wire.
pub const SCHEME: &str = "ed25519";
/// Logical-time lifetime of a token.
pub const TOKEN_TTL: u64 = 60;
/// Capacity of the consumed-nonce cache; verification fails closed when full.
pub const NONCE_CAPACITY: usize = 1 << 20;

const TOKEN_DOMAIN: &[u8] = b"nanoworld/token/v1\x00";
const OPERATOR_DOMAIN: &[u8] = b"nanoworld/operator/v1\x00";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionClass {
    GraphMutation,
    ModelRegistration,
    Untrain,
    #[serde(rename = "RSIApply")]
    RsiApply,
    ConstraintRelaxation,
    ExternalEffect,
}

impl ActionClass {
    pub const ALL: [ActionClass; 6] = [
        ActionClass::GraphMutation,
        ActionClass::ModelRegistration,
        ActionClass::Untrain,
        ActionClass::RsiApply,
        ActionClass::ConstraintRelaxation,
        ActionClass::ExternalEffect,
    ];
}

/// What an action is, independent of who signs it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDescriptor {
    pub action_class: ActionClass,
    pub target: String,
    /// Canonical digest of the full parameter record.
    pub params_digest: Digest,
    pub requester: String,
    pub autonomy_level: AutonomyLevel,
    /// Structural self-modification (graph rewiring, new models).
    #[serde(default)]
    pub architectural: bool,
}

impl ActionDescriptor {
    pub fn new<P: Serialize + ?Sized>(
        class: ActionClass,
        target: &str,
        params: &P,
        requester: &str,
        level: AutonomyLevel,
    ) -> Self {
        Self {
            action_class: class,
            target: target.to_string(),
            params_digest: canonical::digest_of(params),
            requester: requester.to_string(),
            autonomy_level: level,
            architectural: false,
        }
    }

    pub fn architectural(mut self, yes: bool) -> Self {
        self.architectural = yes;
        self
    }

    pub fn digest(&self) -> Digest {
        canonical::digest_of(self)
    }

    pub fn is_well_formed(&self) -> bool {
        !self.target.trim().is_empty()
            && !self.requester.trim().is_empty()
            && (!self.architectural || self.action_class == ActionClass::RsiApply)
    }
}

/// What a token may be used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPurpose {
    /// Execute the described action.
    Action,
    /// Gauntlet stage 3: authorizes continued validation of a proposal,
    /// never its execution.
    Proposal,
}

/// Kernel-signed capability for exactly one described action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub scheme: String,
    pub purpose: TokenPurpose,
    pub descriptor_digest: Digest,
    #[serde(with = "canonical::hex_bytes")]
    pub nonce: [u8; 16],
    pub issued_at: u64,
    pub expires_at: u64,
    #[serde(with = "canonical::hex_vec")]
    pub signature: Vec<u8>,
}

impl AuthToken {
    /// Bytes covered by the signature.
    pub fn signed_message(&self) -> Vec<u8> {
        let mut m = Vec::with_capacity(128);
        m.extend_from_slice(TOKEN_DOMAIN);
        m.extend_from_slice(self.scheme.as_bytes());
        m.push(0);
        m.push(match self.purpose {
            TokenPurpose::Action => 1,
            TokenPurpose::Proposal => 2,
        });
        m.extend_from_slice(&self.descriptor_digest.0);
        m.extend_from_slice(&self.nonce);
        m.extend_from_slice(&self.issued_at.to_le_bytes());
        m.extend_from_slice(&self.expires_at.to_le_bytes());
        m
    }

    /// Signature check only (no expiry, nonce, or binding checks).
    pub fn signature_valid(&self, key: &VerifyingKey) -> bool {
        if self.scheme != SCHEME {
            return false;
        }
        let Ok(sig) = Signature::from_slice(&self.signature) else {
            return false;
        };
        key.verify_strict(&self.signed_message(), &sig).is_ok()
    }
}

/// A kernel public key as exported.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: String,
    #[serde(with = "canonical::hex_bytes")]
    pub key: [u8; 32],
}

impl PublicKey {
    pub fn verifying_key(&self) -> Option<VerifyingKey> {
        if self.scheme != SCHEME {
            return None;
        }
        VerifyingKey::from_bytes(&self.key).ok()
    }
}

/// Operator approval for one descriptor (autonomy level A3 and raises).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorApproval {
    pub descriptor_digest: Digest,
    #[serde(with = "canonical::hex_vec")]
    pub signature: Vec<u8>,
}

/// Operator credential to clear the emergency of a given epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorCredential {
    pub epoch: u64,
    #[serde(with = "canonical::hex_vec")]
    pub signature: Vec<u8>,
}

fn operator_message(purpose: &str, payload: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(OPERATOR_DOMAIN.len() + purpose.len() + 1 + payload.len());
    m.extend_from_slice(OPERATOR_DOMAIN);
    m.extend_from_slice(purpose.as_bytes());
    m.push(0);
    m.extend_from_slice(payload);
    m
}

pub(crate) fn approval_message(d: &Digest) -> Vec<u8> {
    operator_message("approve", &d.0)
}

pub(crate) fn raise_message(d: &Digest) -> Vec<u8> {
    operator_message("raise-autonomy", &d.0)
}

pub(crate) fn clear_message(epoch: u64) -> Vec<u8> {
    operator_message("clear-emergency", &epoch.to_le_bytes())
}

pub(crate) fn verify_operator(key: &VerifyingKey, msg: &[u8], sig: &[u8]) -> bool {
    match Signature::from_slice(sig) {
        Ok(s) => key.verify_strict(msg, &s).is_ok(),
        Err(_) => false,
    }
}

/// The out-of-band human operator: holds the key that signs approvals and
/// emergency-clear credentials.
pub struct Operator {
    key: SigningKey,
}

impl fmt::Debug for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Operator").field("public", &self.public()).finish()
    }
}

impl Operator {
    pub fn from_seed(seed: crate::lineage::Seed) -> Self {
        Self {
            key: signing_key_from(seed.child("operator/signing")),
        }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey {
            scheme: SCHEME.into(),
            key: self.key.verifying_key().to_bytes(),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn approve(&self, descriptor: &ActionDescriptor) -> OperatorApproval {
        let d = descriptor.digest();
        OperatorApproval {
            descriptor_digest: d,
            signature: self.key.sign(&approval_message(&d)).to_bytes().to_vec(),
        }
    }

    /// Approval to raise the autonomy level under `descriptor`. Distinct
    /// from [`Operator::approve`], which may already have been spent on
    /// issuing the token for the same descriptor.
    pub fn approve_raise(&self, descriptor: &ActionDescriptor) -> OperatorApproval {
        let d = descriptor.digest();
        OperatorApproval {
            descriptor_digest: d,
            signature: self.key.sign(&raise_message(&d)).to_bytes().to_vec(),
        }
    }

    pub fn clear_credential(&self, epoch: u64) -> OperatorCredential {
        OperatorCredential {
            epoch,
            signature: self.key.sign(&clear_message(epoch)).to_bytes().to_vec(),
        }
    }
}

pub(crate) fn signing_key_from(seed: crate::lineage::Seed) -> SigningKey {
    use rand::RngCore;
    let mut bytes = [0u8; 32];
    seed.rng().fill_bytes(&mut bytes);
    SigningKey::from_bytes(&bytes)
}
