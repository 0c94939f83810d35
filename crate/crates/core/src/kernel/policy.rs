//! Autonomy levels and the default authorization policy table.

use super::ActionClass;
use crate::canonical::{self, Digest};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Graduated transfer of execution authority, A1 (manual) to A6
/// (governed open-ended self-improvement).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AutonomyLevel {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
}

impl AutonomyLevel {
    pub const ALL: [AutonomyLevel; 6] = [
        AutonomyLevel::A1,
        AutonomyLevel::A2,
        AutonomyLevel::A3,
        AutonomyLevel::A4,
        AutonomyLevel::A5,
        AutonomyLevel::A6,
    ];
}

impl fmt::Display for AutonomyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for AutonomyLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        AutonomyLevel::ALL
            .into_iter()
            .find(|l| l.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown autonomy level `{s}` (expected A1..A6)"))
    }
}

/// Outcome of the policy table for one (level, class) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Permission {
    Deny,
    /// Authorized only with an attached operator approval.
    NeedsOperator,
    /// Authorized; `notify` asks for a notification record.
    Allow { notify: bool },
}

impl Permission {
    /// Rank used for monotonicity checks: Deny < NeedsOperator < Allow.
    pub fn rank(self) -> u8 {
        match self {
            Permission::Deny => 0,
            Permission::NeedsOperator => 1,
            Permission::Allow { .. } => 2,
        }
    }
}

/// Default policy.
///
/// A1/A2 never authorize ExternalEffect or RSIApply, and need an operator
/// approval for everything else. A3 needs an operator approval for every
/// class. A4 authorizes with a notification, A5 authorizes silently. RSIApply
/// of architectural changes (graph rewiring, new models) is reserved to A6.
/// RSIApply additionally always requires an approved gauntlet report, which
/// the kernel checks separately.
pub fn permission(level: AutonomyLevel, class: ActionClass, architectural: bool) -> Permission {
    use AutonomyLevel::*;
    if class == ActionClass::RsiApply && architectural && level < A6 {
        return Permission::Deny;
    }
    match level {
        A1 | A2 => match class {
            ActionClass::ExternalEffect | ActionClass::RsiApply => Permission::Deny,
            _ => Permission::NeedsOperator,
        },
        A3 => Permission::NeedsOperator,
        A4 => Permission::Allow { notify: true },
        A5 | A6 => Permission::Allow { notify: false },
    }
}

/// Every row of the table, for export and pinning.
pub fn table() -> Vec<(AutonomyLevel, ActionClass, bool, Permission)> {
    let mut rows = Vec::new();
    for level in AutonomyLevel::ALL {
        for class in ActionClass::ALL {
            for arch in [false, true] {
                if arch && class != ActionClass::RsiApply {
                    continue;
                }
                rows.push((level, class, arch, permission(level, class, arch)));
            }
        }
    }
    rows
}

/// Digest pinned as the immutable kernel policy.
pub fn policy_digest() -> Digest {
    canonical::digest_of(&(
        "autonomy-policy/v1",
        table(),
        super::TOKEN_TTL,
        super::NONCE_CAPACITY,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_monotone_in_level() {
        for class in ActionClass::ALL {
            for arch in [false, true] {
                let ranks: Vec<u8> = AutonomyLevel::ALL
                    .iter()
                    .map(|l| permission(*l, class, arch).rank())
                    .collect();
                assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "{class:?} {arch}: {ranks:?}");
            }
        }
    }

    #[test]
    fn low_levels_never_allow_effects_or_rsi() {
        for l in [AutonomyLevel::A1, AutonomyLevel::A2] {
            assert_eq!(permission(l, ActionClass::ExternalEffect, false), Permission::Deny);
            assert_eq!(permission(l, ActionClass::RsiApply, false), Permission::Deny);
        }
        assert_eq!(
            permission(AutonomyLevel::A4, ActionClass::GraphMutation, false),
            Permission::Allow { notify: true }
        );
        assert_eq!(permission(AutonomyLevel::A5, ActionClass::RsiApply, true), Permission::Deny);
        assert_eq!(
            permission(AutonomyLevel::A6, ActionClass::RsiApply, true),
            Permission::Allow { notify: false }
        );
    }

    #[test]
    fn parse_levels() {
        assert_eq!("a3".parse::<AutonomyLevel>(), Ok(AutonomyLevel::A3));
        assert!("A7".parse::<AutonomyLevel>().is_err());
    }
}
