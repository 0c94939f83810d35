//! Nano model registry: specs, versioned artifacts, invocation, untraining,
//! and immutable-module pins.

use crate::budget::Meter;
use crate::canonical::{self, Digest};
use crate::lineage::{Datum, LineageError, LineageStore, RunId, RunRecord, Seed};
use crate::solvers::{Field, SolverError, SolverId};
use crate::train::{FeatureError, LinearModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Parameter bounds for learned model classes.
pub const MIN_LEARNED_PARAMS: usize = 10_000;
pub const MAX_LEARNED_PARAMS: usize = 100_000;
pub const MIN_ACCURACY_TARGET: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{model_id}` has no version {version}")]
    UnknownVersion { model_id: String, version: u64 },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("spec violation: {0}")]
    SpecViolation(String),
    #[error("`{0}` is a pinned immutable module")]
    PinnedModule(String),
    #[error("pin violation: {0}")]
    PinViolation(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

impl From<FeatureError> for RegistryError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Domain(f) => {
                RegistryError::Solver(SolverError::Domain(format!("input `{f}` outside model domain")))
            }
            other => RegistryError::SchemaError(other.to_string()),
        }
    }
}

impl From<crate::budget::BudgetExceeded> for RegistryError {
    fn from(e: crate::budget::BudgetExceeded) -> Self {
        RegistryError::Solver(SolverError::Budget(e))
    }
}

type Result<T> = std::result::Result<T, RegistryError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchitectureClass {
    RulesEngine,
    PhysicsSolver,
    LinearModel,
    DecisionTree,
    NeuralNet,
    Composite,
}

impl ArchitectureClass {
    /// Classes whose outputs are fully auditable.
    pub fn is_glassbox(self) -> bool {
        matches!(
            self,
            ArchitectureClass::RulesEngine
                | ArchitectureClass::PhysicsSolver
                | ArchitectureClass::LinearModel
        )
    }

    /// Classes held to the learned parameter band.
    pub fn is_learned(self) -> bool {
        !matches!(self, ArchitectureClass::RulesEngine | ArchitectureClass::PhysicsSolver)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NanoModelSpec {
    pub model_id: String,
    /// Assigned by [`Registry::register`]; ignored on input.
    pub version: u64,
    pub architecture_class: ArchitectureClass,
    pub glassbox: bool,
    pub cdai: bool,
    pub param_count: usize,
    pub latency_target_ms: f64,
    pub accuracy_target: f64,
    pub input_schema: Vec<Field>,
    pub output_schema: Vec<Field>,
}

/// Executable content of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum ModelBody {
    Solver {
        solver: SolverId,
        coefficients: BTreeMap<String, f64>,
    },
    Linear(LinearModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub spec: NanoModelSpec,
    pub body: ModelBody,
    pub training_digest: Option<Digest>,
}

impl ModelArtifact {
    /// Content hash used by pins and the catalog.
    pub fn content_hash(&self) -> Digest {
        canonical::digest_of(self)
    }

    /// Artifact for a solver from the pack, with its default coefficients.
    pub fn solver(solver: SolverId) -> Self {
        let coefficients = solver.default_coefficients();
        ModelArtifact {
            spec: NanoModelSpec {
                model_id: solver.model_id(),
                version: 0,
                architecture_class: ArchitectureClass::PhysicsSolver,
                glassbox: true,
                cdai: true,
                param_count: coefficients.len(),
                latency_target_ms: 1.0,
                accuracy_target: 1.0,
                input_schema: solver.inputs(),
                output_schema: solver.outputs(),
            },
            body: ModelBody::Solver {
                solver,
                coefficients,
            },
            training_digest: None,
        }
    }

    /// Artifact for a learned linear model with a single named output.
    pub fn linear(model_id: &str, model: LinearModel, output: Field, training: Option<Digest>) -> Self {
        let input_schema = model
            .features
            .input_names()
            .into_iter()
            .map(|name| Field {
                name,
                unit: String::new(),
            })
            .collect();
        ModelArtifact {
            spec: NanoModelSpec {
                model_id: model_id.to_string(),
                version: 0,
                architecture_class: ArchitectureClass::LinearModel,
                glassbox: true,
                cdai: true,
                param_count: model.param_count(),
                latency_target_ms: 1.0,
                accuracy_target: 0.98,
                input_schema,
                output_schema: vec![output],
            },
            body: ModelBody::Linear(model),
            training_digest: training,
        }
    }

    /// Evaluate without recording anything.
    pub fn call(&self, inputs: &BTreeMap<String, f64>, meter: &Meter) -> Result<Vec<(String, f64)>> {
        match &self.body {
            ModelBody::Solver {
                solver,
                coefficients,
            } => {
                check_schema(&self.spec, inputs)?;
                Ok(solver.evaluate(inputs, coefficients, meter)?)
            }
            ModelBody::Linear(m) => {
                meter.charge_steps(1 + inputs.len() as u64)?;
                let y = m.predict(inputs)?;
                Ok(vec![(self.spec.output_schema[0].name.clone(), y)])
            }
        }
    }
}

fn check_schema(spec: &NanoModelSpec, inputs: &BTreeMap<String, f64>) -> Result<()> {
    for f in &spec.input_schema {
        match inputs.get(&f.name) {
            None => return Err(RegistryError::SchemaError(format!("missing input `{}`", f.name))),
            Some(v) if !v.is_finite() => {
                return Err(RegistryError::SchemaError(format!("input `{}` is not finite", f.name)))
            }
            _ => {}
        }
    }
    if let Some(k) = inputs.keys().find(|k| !spec.input_schema.iter().any(|f| &f.name == *k)) {
        return Err(RegistryError::SchemaError(format!("unexpected input `{k}`")));
    }
    Ok(())
}

/// Receives pin-mismatch reports (wired to the kernel's alert channel).
pub trait AlertSink: Send + Sync {
    fn pin_mismatch(&self, module_id: &str, pinned: Digest, found: Digest);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinAlert {
    pub module_id: String,
    pub pinned: Digest,
    pub found: Digest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub model_id: String,
    pub version: u64,
    pub class: ArchitectureClass,
    pub glassbox: bool,
    pub cdai: bool,
    pub param_count: usize,
    pub content_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UntrainReceipt {
    pub model_id: String,
    pub version: u64,
    pub content_hash: Digest,
}

/// Model store. Cloning is cheap (artifacts are shared) and yields an
/// independent registry, which is how sandboxes get a scratch copy.
#[derive(Clone, Default)]
pub struct Registry {
    models: BTreeMap<String, BTreeMap<u64, Arc<ModelArtifact>>>,
    high_water: BTreeMap<String, u64>,
    pins: BTreeMap<String, Digest>,
    sealed: bool,
    alerts: Vec<PinAlert>,
    sink: Option<Arc<dyn AlertSink>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("models", &self.models.len())
            .field("pins", &self.pins.len())
            .field("sealed", &self.sealed)
            .finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding every solver in the pack.
    pub fn with_solvers() -> Self {
        let mut r = Self::new();
        for s in SolverId::ALL {
            r.register(ModelArtifact::solver(s)).expect("solver artifacts are valid");
        }
        r
    }

    pub fn set_alert_sink(&mut self, sink: Arc<dyn AlertSink>) {
        self.sink = Some(sink);
    }

    /// Check spec invariants without registering.
    pub fn validate(artifact: &ModelArtifact) -> Result<()> {
        let spec = &artifact.spec;
        let class = spec.architecture_class;
        if spec.model_id.is_empty() {
            return Err(RegistryError::SpecViolation("empty model id".into()));
        }
        if class.is_glassbox() && !(spec.glassbox && spec.cdai) {
            return Err(RegistryError::SpecViolation(format!(
                "{class:?} must be glassbox and cdai"
            )));
        }
        if class.is_learned()
            && !(MIN_LEARNED_PARAMS..=MAX_LEARNED_PARAMS).contains(&spec.param_count)
        {
            return Err(RegistryError::SpecViolation(format!(
                "param_count {} outside [{MIN_LEARNED_PARAMS}, {MAX_LEARNED_PARAMS}] for {class:?}",
                spec.param_count
            )));
        }
        if !(MIN_ACCURACY_TARGET..=1.0).contains(&spec.accuracy_target) {
            return Err(RegistryError::SpecViolation(format!(
                "accuracy_target {} below {MIN_ACCURACY_TARGET}",
                spec.accuracy_target
            )));
        }
        if spec.output_schema.is_empty() {
            return Err(RegistryError::SpecViolation("empty output schema".into()));
        }
        match (&artifact.body, class) {
            (ModelBody::Solver { solver, coefficients }, ArchitectureClass::PhysicsSolver) => {
                if spec.param_count != coefficients.len() {
                    return Err(RegistryError::SpecViolation(
                        "solver param_count must equal its coefficient count".into(),
                    ));
                }
                if spec.input_schema != solver.inputs() || spec.output_schema != solver.outputs() {
                    return Err(RegistryError::SpecViolation(
                        "solver schema does not match the solver".into(),
                    ));
                }
                if coefficients.values().any(|c| !c.is_finite()) {
                    return Err(RegistryError::SpecViolation("non-finite coefficient".into()));
                }
            }
            (ModelBody::Linear(m), ArchitectureClass::LinearModel) => {
                if m.coefficients.len() != spec.param_count
                    || m.coefficients.len() != m.features.dim() + 1
                {
                    return Err(RegistryError::SpecViolation(
                        "parameter vector length must equal param_count".into(),
                    ));
                }
                if m.coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(RegistryError::SpecViolation("non-finite coefficient".into()));
                }
                if spec.output_schema.len() != 1 {
                    return Err(RegistryError::SpecViolation(
                        "linear models have exactly one output".into(),
                    ));
                }
            }
            (_, c) => {
                return Err(RegistryError::SpecViolation(format!(
                    "no executable body of this kind for class {c:?}"
                )))
            }
        }
        Ok(())
    }

    /// Register a new version; returns the assigned version number.
    pub fn register(&mut self, mut artifact: ModelArtifact) -> Result<u64> {
        Self::validate(&artifact)?;
        let id = artifact.spec.model_id.clone();
        if self.sealed && self.pins.contains_key(&id) {
            return Err(RegistryError::PinnedModule(id));
        }
        let version = self.high_water.get(&id).copied().unwrap_or(0) + 1;
        artifact.spec.version = version;
        self.high_water.insert(id.clone(), version);
        self.models.entry(id).or_default().insert(version, Arc::new(artifact));
        Ok(version)
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.models.get(model_id).is_some_and(|v| !v.is_empty())
    }

    /// Latest (production) version.
    pub fn latest(&self, model_id: &str) -> Result<u64> {
        self.models
            .get(model_id)
            .and_then(|v| v.keys().next_back().copied())
            .ok_or_else(|| RegistryError::UnknownModel(model_id.to_string()))
    }

    pub fn get(&self, model_id: &str, version: Option<u64>) -> Result<Arc<ModelArtifact>> {
        let versions = self
            .models
            .get(model_id)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| RegistryError::UnknownModel(model_id.to_string()))?;
        match version {
            None => Ok(versions.values().next_back().expect("non-empty").clone()),
            Some(v) => versions.get(&v).cloned().ok_or(RegistryError::UnknownVersion {
                model_id: model_id.to_string(),
                version: v,
            }),
        }
    }

    pub fn has_version(&self, model_id: &str, version: u64) -> bool {
        self.models.get(model_id).is_some_and(|v| v.contains_key(&version))
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Pure evaluation of a model version (latest when `None`).
    pub fn call(
        &self,
        model_id: &str,
        version: Option<u64>,
        inputs: &BTreeMap<String, f64>,
        meter: &Meter,
    ) -> Result<(u64, Vec<(String, f64)>)> {
        let art = self.get(model_id, version)?;
        Ok((art.spec.version, art.call(inputs, meter)?))
    }

    /// Evaluate and record exactly one run.
    pub fn invoke(
        &self,
        lineage: &LineageStore,
        model_id: &str,
        version: Option<u64>,
        inputs: &BTreeMap<String, f64>,
        seed: Seed,
    ) -> Result<(Vec<(String, f64)>, RunId)> {
        let (v, out) = self.call(model_id, version, inputs, &Meter::unlimited())?;
        let recipe = InvokeRecipe {
            model_id: model_id.to_string(),
            version: v,
            inputs: inputs.clone(),
        };
        let record = RunRecord::new(
            lineage.mint_id("invoke"),
            INVOKE_KIND,
            seed,
            &recipe,
            out.iter().map(|(_, y)| Datum::Real(*y)).collect(),
        )
        .with_models([(model_id.to_string(), v)].into());
        let id = lineage.record_run(record)?;
        Ok((out, id))
    }

    /// Remove one version. Lineage is untouched; the version number is
    /// never reused.
    pub fn untrain(&mut self, model_id: &str, version: u64) -> Result<UntrainReceipt> {
        if self.pins.contains_key(model_id) {
            return Err(RegistryError::PinnedModule(model_id.to_string()));
        }
        let versions = self
            .models
            .get_mut(model_id)
            .ok_or_else(|| RegistryError::UnknownModel(model_id.to_string()))?;
        let art = versions.remove(&version).ok_or(RegistryError::UnknownVersion {
            model_id: model_id.to_string(),
            version,
        })?;
        if versions.is_empty() {
            self.models.remove(model_id);
        }
        Ok(UntrainReceipt {
            model_id: model_id.to_string(),
            version,
            content_hash: art.content_hash(),
        })
    }

    /// Pin a module hash. Only allowed before [`Registry::seal`].
    pub fn pin_immutable(&mut self, module_id: &str, hash: Digest) -> Result<()> {
        if self.sealed {
            return Err(RegistryError::PinViolation(format!(
                "pins are closed; cannot pin `{module_id}`"
            )));
        }
        if self.pins.contains_key(module_id) {
            return Err(RegistryError::PinViolation(format!("`{module_id}` is already pinned")));
        }
        self.pins.insert(module_id.to_string(), hash);
        Ok(())
    }

    /// Close the pin table (end of bootstrap).
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn is_pinned(&self, module_id: &str) -> bool {
        self.pins.contains_key(module_id)
    }

    pub fn pins(&self) -> &BTreeMap<String, Digest> {
        &self.pins
    }

    /// True iff `hash` matches the pin. A mismatch is logged and reported
    /// to the alert sink.
    pub fn check_immutable(&mut self, module_id: &str, hash: Digest) -> bool {
        match self.pins.get(module_id) {
            Some(p) if *p == hash => true,
            Some(p) => {
                let alert = PinAlert {
                    module_id: module_id.to_string(),
                    pinned: *p,
                    found: hash,
                };
                if let Some(sink) = &self.sink {
                    sink.pin_mismatch(module_id, *p, hash);
                }
                self.alerts.push(alert);
                false
            }
            None => false,
        }
    }

    pub fn alerts(&self) -> &[PinAlert] {
        &self.alerts
    }

    /// One record per registered model version, sorted by (id, version).
    pub fn catalog(&self) -> Vec<CatalogRecord> {
        self.models
            .values()
            .flat_map(|vs| vs.values())
            .map(|a| CatalogRecord {
                model_id: a.spec.model_id.clone(),
                version: a.spec.version,
                class: a.spec.architecture_class,
                glassbox: a.spec.glassbox,
                cdai: a.spec.cdai,
                param_count: a.spec.param_count,
                content_hash: a.content_hash(),
            })
            .collect()
    }

    /// Digest over the catalog and pins.
    pub fn digest(&self) -> Digest {
        canonical::digest_of(&(self.catalog(), &self.pins))
    }
}

/// Lineage kind for single-model invocations.
pub const INVOKE_KIND: &str = "invoke";

/// Replay recipe for an invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvokeRecipe {
    pub model_id: String,
    pub version: u64,
    pub inputs: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{FeatureMap, Link};

    fn linear(params: usize) -> ModelArtifact {
        let model = LinearModel {
            features: FeatureMap::Sparse { dim: params - 1 },
            link: Link::Identity,
            coefficients: vec![0.5; params],
        };
        ModelArtifact::linear(
            "learned/wide",
            model,
            Field {
                name: "y".into(),
                unit: "1".into(),
            },
            None,
        )
    }

    fn beam_inputs() -> BTreeMap<String, f64> {
        [("F", 100.0), ("L", 2.0), ("E", 200e9), ("I", 8e-6)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    #[test]
    fn linear_band_enforced() {
        let mut r = Registry::new();
        assert_eq!(r.register(linear(10_000)), Ok(1));
        assert!(matches!(r.register(linear(9_999)), Err(RegistryError::SpecViolation(_))));
        assert!(matches!(r.register(linear(100_001)), Err(RegistryError::SpecViolation(_))));
    }

    #[test]
    fn neural_net_below_band_rejected() {
        let mut a = linear(10_000);
        a.spec.architecture_class = ArchitectureClass::NeuralNet;
        a.spec.param_count = 5_000;
        assert!(matches!(Registry::new().register(a), Err(RegistryError::SpecViolation(_))));
    }

    #[test]
    fn opaque_solver_rejected() {
        let mut a = ModelArtifact::solver(SolverId::BeamDeflection);
        a.spec.glassbox = false;
        assert!(matches!(Registry::new().register(a), Err(RegistryError::SpecViolation(_))));
    }

    #[test]
    fn versions_are_monotone_across_untrain() {
        let mut r = Registry::new();
        assert_eq!(r.register(linear(10_000)).unwrap(), 1);
        assert_eq!(r.register(linear(10_000)).unwrap(), 2);
        r.untrain("learned/wide", 2).unwrap();
        assert_eq!(r.register(linear(10_000)).unwrap(), 3);
    }

    #[test]
    fn invoke_records_once_and_ignores_seed() {
        let r = Registry::with_solvers();
        let store = LineageStore::new();
        let (a, _) = r.invoke(&store, "solver/beam_deflection", None, &beam_inputs(), Seed(1)).unwrap();
        let (b, _) = r.invoke(&store, "solver/beam_deflection", None, &beam_inputs(), Seed(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn schema_and_unknown_errors() {
        let r = Registry::with_solvers();
        let store = LineageStore::new();
        let mut bad = beam_inputs();
        bad.remove("E");
        assert!(matches!(
            r.invoke(&store, "solver/beam_deflection", None, &bad, Seed(0)),
            Err(RegistryError::SchemaError(_))
        ));
        assert!(matches!(
            r.invoke(&store, "nope", None, &bad, Seed(0)),
            Err(RegistryError::UnknownModel(_))
        ));
        assert!(store.is_empty());
    }

    #[test]
    fn pins() {
        let mut r = Registry::with_solvers();
        let h = Digest::of_str("k");
        r.pin_immutable("kernel/policy", h).unwrap();
        assert!(r.check_immutable("kernel/policy", h));
        assert!(matches!(
            r.pin_immutable("kernel/policy", Digest::of_str("k2")),
            Err(RegistryError::PinViolation(_))
        ));
        assert!(!r.check_immutable("kernel/policy", Digest::of_str("tampered")));
        assert_eq!(r.alerts().len(), 1);
        r.seal();
        assert!(matches!(
            r.pin_immutable("other", h),
            Err(RegistryError::PinViolation(_))
        ));
    }

    #[test]
    fn pinned_model_cannot_be_untrained_or_replaced() {
        let mut r = Registry::with_solvers();
        let art = r.get("solver/arrhenius_rate", None).unwrap();
        r.pin_immutable("solver/arrhenius_rate", art.content_hash()).unwrap();
        r.seal();
        assert_eq!(
            r.untrain("solver/arrhenius_rate", 1),
            Err(RegistryError::PinnedModule("solver/arrhenius_rate".into()))
        );
        assert!(matches!(
            r.register(ModelArtifact::solver(SolverId::ArrheniusRate)),
            Err(RegistryError::PinnedModule(_))
        ));
    }

    #[test]
    fn catalog_has_one_row_per_version() {
        let r = Registry::with_solvers();
        let cat = r.catalog();
        assert_eq!(cat.len(), 12);
        assert!(cat.iter().all(|c| c.glassbox && c.cdai && c.version == 1));
    }
}
