//! Beta-Bernoulli belief network: conjugate evidence updates, moment and
//! entropy queries, knowledge-gap detection, and information-gain
//! experiment selection.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum BeliefError {
    #[error("evidence weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
    #[error("unknown belief `{0}`")]
    UnknownBelief(String),
    #[error("no candidate experiments")]
    NoCandidates,
    #[error("predicted probability must lie in [0,1], got {0}")]
    InvalidProbability(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub belief_id: String,
    pub outcome: Outcome,
    pub weight: f64,
}

impl Evidence {
    pub fn success(id: &str) -> Self {
        Self {
            belief_id: id.to_string(),
            outcome: Outcome::Success,
            weight: 1.0,
        }
    }

    pub fn failure(id: &str) -> Self {
        Self {
            belief_id: id.to_string(),
            outcome: Outcome::Failure,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaNode {
    pub alpha: f64,
    pub beta: f64,
    pub update_count: u64,
}

impl Default for BetaNode {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            update_count: 0,
        }
    }
}

impl BetaNode {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    pub fn entropy(&self) -> f64 {
        beta_entropy(self.alpha, self.beta)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            alpha: self.alpha,
            beta: self.beta,
            mean: self.mean(),
            variance: self.variance(),
            entropy: self.entropy(),
        }
    }
}

/// Differential entropy of Beta(a, b).
pub fn beta_entropy(a: f64, b: f64) -> f64 {
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    ln_b - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
}

/// Expected entropy reduction from observing one Bernoulli outcome that
/// succeeds with probability `p`.
pub fn expected_gain(a: f64, b: f64, p: f64) -> f64 {
    beta_entropy(a, b) - (p * beta_entropy(a + 1.0, b) + (1.0 - p) * beta_entropy(a, b + 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
    pub variance: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub applied: usize,
    /// (position in the batch, error); invalid items are skipped.
    pub errors: Vec<(usize, BeliefError)>,
}

#[derive(Clone, Debug, Default)]
pub struct BeliefNetwork {
    nodes: HashMap<String, BetaNode>,
}

impl BeliefNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: HashMap::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a node at Beta(1,1) if absent.
    pub fn ensure(&mut self, id: &str) {
        if !self.nodes.contains_key(id) {
            self.nodes.insert(id.to_string(), BetaNode::default());
        }
    }

    pub fn get(&self, id: &str) -> Option<&BetaNode> {
        self.nodes.get(id)
    }

    /// Conjugate update; absent beliefs start at Beta(1,1).
    pub fn update(&mut self, ev: &Evidence) -> Result<Summary, BeliefError> {
        if !(ev.weight > 0.0 && ev.weight.is_finite()) {
            return Err(BeliefError::InvalidWeight(ev.weight));
        }
        let node = match self.nodes.get_mut(&ev.belief_id) {
            Some(n) => n,
            None => self.nodes.entry(ev.belief_id.clone()).or_default(),
        };
        match ev.outcome {
            Outcome::Success => node.alpha += ev.weight,
            Outcome::Failure => node.beta += ev.weight,
        }
        node.update_count += 1;
        Ok(node.summary())
    }

    /// Apply a sequence in order, skipping invalid items.
    pub fn batch_update(&mut self, batch: &[Evidence]) -> BatchResult {
        let mut applied = 0;
        let mut errors = Vec::new();
        for (i, ev) in batch.iter().enumerate() {
            if !(ev.weight > 0.0 && ev.weight.is_finite()) {
                errors.push((i, BeliefError::InvalidWeight(ev.weight)));
                continue;
            }
            let node = match self.nodes.get_mut(&ev.belief_id) {
                Some(n) => n,
                None => self.nodes.entry(ev.belief_id.clone()).or_default(),
            };
            match ev.outcome {
                Outcome::Success => node.alpha += ev.weight,
                Outcome::Failure => node.beta += ev.weight,
            }
            node.update_count += 1;
            applied += 1;
        }
        BatchResult { applied, errors }
    }

    pub fn query(&self, id: &str) -> Result<Summary, BeliefError> {
        self.nodes
            .get(id)
            .map(|n| n.summary())
            .ok_or_else(|| BeliefError::UnknownBelief(id.to_string()))
    }

    /// Beliefs with entropy ≥ threshold, by entropy descending then id.
    pub fn detect_gaps(&self, threshold: f64) -> Vec<String> {
        let mut gaps: Vec<(f64, &String)> = self
            .nodes
            .iter()
            .map(|(id, n)| (n.entropy(), id))
            .filter(|(h, _)| *h >= threshold)
            .collect();
        gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        gaps.into_iter().map(|(_, id)| id.clone()).collect()
    }

    /// Candidate with the largest expected entropy reduction. Unknown
    /// beliefs are scored at the Beta(1,1) prior they would be created with.
    pub fn select_experiment<'a>(&self, candidates: &'a [(String, f64)]) -> Result<&'a (String, f64), BeliefError> {
        let mut best: Option<(f64, &(String, f64))> = None;
        for c in candidates {
            let p = c.1;
            if !(0.0..=1.0).contains(&p) {
                return Err(BeliefError::InvalidProbability(p));
            }
            let n = self.nodes.get(&c.0).copied().unwrap_or_default();
            let g = expected_gain(n.alpha, n.beta, p);
            best = match best {
                Some((bg, bc)) if bg > g || (bg == g && bc.0 <= c.0) => Some((bg, bc)),
                _ => Some((g, c)),
            };
        }
        best.map(|(_, c)| c).ok_or(BeliefError::NoCandidates)
    }

    /// Canonical dump sorted by id: (belief_id, alpha, beta).
    pub fn dump(&self) -> Vec<(String, f64, f64)> {
        let mut v: Vec<(String, f64, f64)> =
            self.nodes.iter().map(|(k, n)| (k.clone(), n.alpha, n.beta)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn digest(&self) -> crate::canonical::Digest {
        crate::canonical::digest_of(&self.dump())
    }
}
