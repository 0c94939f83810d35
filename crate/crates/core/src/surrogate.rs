//! The learned beam-deflection surrogate shared by the bootstrap scenario,
//! the self-improvement engine, and the gauntlet tests.
//!
//! The model is log-linear in the ratios of its inputs to fixed reference
//! values, so the cantilever law is exactly representable: the intercept is
//! the log deflection at the reference point and the four slopes are the
//! exponents (1, 3, -1, -1). Hashed tile features bring the parameter count
//! into the learned-model band; they start at zero.

use crate::constraints::Envelope;
use crate::lineage::Seed;
use crate::registry::ModelArtifact;
use crate::solvers::{Field, SolverId};
use crate::train::{FeatureMap, LinearModel, Link};
use rand::Rng;
use std::collections::BTreeMap;

pub const BEAM_MODEL: &str = "learned/beam";
pub const BEAM_FIELDS: [&str; 4] = ["F", "L", "E", "I"];
pub const BEAM_REFERENCES: [f64; 4] = [100.0, 2.0, 200e9, 8e-6];
/// Tile features; with the intercept and four slopes this gives 10,000
/// parameters.
pub const BEAM_TILES: usize = 9_995;
/// Intercept plus the four slopes.
pub const CORE_GENES: usize = 5;

pub fn beam_features() -> FeatureMap {
    FeatureMap::LogRatio {
        fields: BEAM_FIELDS.iter().map(|s| s.to_string()).collect(),
        references: BEAM_REFERENCES.to_vec(),
        tiles: BEAM_TILES,
    }
}

/// Coefficients that reproduce the closed form exactly.
pub fn exact_beam_coefficients() -> Vec<f64> {
    let [f, l, e, i] = BEAM_REFERENCES;
    let mut c = vec![0.0; 1 + BEAM_FIELDS.len() + BEAM_TILES];
    c[0] = (f * l.powi(3) / (3.0 * e * i)).ln();
    c[1..5].copy_from_slice(&[1.0, 3.0, -1.0, -1.0]);
    c
}

/// Exact coefficients pushed off by `frac`: every slope scaled by
/// `1 + frac`, and the reference-point output scaled by `1 + frac`.
pub fn offset_beam_coefficients(frac: f64) -> Vec<f64> {
    let mut c = exact_beam_coefficients();
    c[0] += (1.0 + frac).ln();
    for g in &mut c[1..5] {
        *g *= 1.0 + frac;
    }
    c
}

pub fn beam_model(coefficients: Vec<f64>) -> LinearModel {
    LinearModel {
        features: beam_features(),
        link: Link::Log,
        coefficients,
    }
}

pub fn beam_artifact(coefficients: Vec<f64>, training: Option<crate::canonical::Digest>) -> ModelArtifact {
    ModelArtifact::linear(
        BEAM_MODEL,
        beam_model(coefficients),
        Field {
            name: "delta".into(),
            unit: "m".into(),
        },
        training,
    )
}

/// Envelope guarding the surrogate with the cantilever solver.
pub fn beam_envelope() -> Envelope {
    Envelope::new(BEAM_MODEL, &SolverId::BeamDeflection.model_id())
}

/// Operating range of the surrogate: log-uniform around the references.
pub const BEAM_RANGES: [(f64, f64); 4] = [(50.0, 200.0), (1.0, 4.0), (150e9, 250e9), (4e-6, 16e-6)];

/// `n` input records drawn log-uniformly over [`BEAM_RANGES`].
pub fn sample_beam_inputs(seed: Seed, n: usize) -> Vec<BTreeMap<String, f64>> {
    let mut rng = seed.rng();
    (0..n)
        .map(|_| {
            BEAM_FIELDS
                .iter()
                .zip(BEAM_RANGES)
                .map(|(name, (lo, hi))| {
                    let z: f64 = rng.gen_range(lo.ln()..=hi.ln());
                    (name.to_string(), z.exp())
                })
                .collect()
        })
        .collect()
}

/// Reference point plus the corners of the operating box.
pub fn beam_probe_inputs() -> Vec<BTreeMap<String, f64>> {
    let mut out = vec![BEAM_FIELDS
        .iter()
        .zip(BEAM_REFERENCES)
        .map(|(n, v)| (n.to_string(), v))
        .collect()];
    for mask in 0..16u32 {
        out.push(
            BEAM_FIELDS
                .iter()
                .zip(BEAM_RANGES)
                .enumerate()
                .map(|(k, (n, (lo, hi)))| (n.to_string(), if mask >> k & 1 == 1 { hi } else { lo }))
                .collect(),
        );
    }
    out
}
