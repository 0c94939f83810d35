//! Re-execution of recorded runs from their lineage recipes.
//!
//! Invocations replay against a live registry (so an untrained version
//! reports `VersionGone`). Scenario, loop, and cycle runs rebuild their whole
//! world from the recorded config and seed, so they replay in a fresh
//! process with nothing but the lineage file.

use crate::aara::{self, LoopConfig, LOOP_KIND};
use crate::budget::Meter;
use crate::config::Config;
use crate::gauntlet::GauntletConfig;
use crate::kernel::AutonomyLevel;
use crate::lineage::{Datum, LineageStore, Reexecute, ReplayError, RunRecord};
use crate::registry::{InvokeRecipe, Registry, INVOKE_KIND};
use crate::rsi::{self, RsiConfig, CYCLE_KIND};
use crate::runtime::Deployment;
use crate::scenarios::{self, ScenarioRecipe, SCENARIO_KIND};
use serde::de::DeserializeOwned;
use std::sync::Arc;

/// Replay kinds this module can rebuild.
pub const REPLAYABLE: [&str; 4] = [INVOKE_KIND, SCENARIO_KIND, LOOP_KIND, CYCLE_KIND];

pub struct Replayer<'a> {
    registry: &'a Registry,
}

impl<'a> Replayer<'a> {
    /// `registry` serves invocation replays.
    pub fn new(registry: &'a Registry) -> Self {
        Self { registry }
    }
}

fn recipe<T: DeserializeOwned>(record: &RunRecord) -> Result<T, ReplayError> {
    serde_json::from_value(record.inputs.clone())
        .map_err(|e| ReplayError::Failed(format!("malformed {} recipe: {e}", record.kind)))
}

fn fail(e: impl std::fmt::Display) -> ReplayError {
    ReplayError::Failed(e.to_string())
}

impl Reexecute for Replayer<'_> {
    fn reexecute(&self, record: &RunRecord) -> Result<Vec<Datum>, ReplayError> {
        match record.kind.as_str() {
            INVOKE_KIND => {
                let r: InvokeRecipe = recipe(record)?;
                if !self.registry.has_version(&r.model_id, r.version) {
                    return Err(ReplayError::VersionGone {
                        model_id: r.model_id,
                        version: r.version,
                    });
                }
                let (_, out) = self
                    .registry
                    .call(&r.model_id, Some(r.version), &r.inputs, &Meter::unlimited())
                    .map_err(fail)?;
                Ok(out.into_iter().map(|(_, y)| Datum::Real(y)).collect())
            }
            SCENARIO_KIND => {
                let r: ScenarioRecipe = recipe(record)?;
                let cfg = Config::parse(&r.config).map_err(fail)?;
                let report = scenarios::compute(&r.name, &cfg, record.seed).map_err(fail)?;
                Ok(scenarios::scenario_outputs(&report))
            }
            LOOP_KIND => {
                let cfg: LoopConfig = recipe(record)?;
                let mut dep = aara::plant_deployment(Arc::new(LineageStore::new()), &cfg).map_err(fail)?;
                let report = aara::run_loop(&mut dep, &cfg, None).map_err(fail)?;
                Ok(aara::loop_outputs(&report))
            }
            CYCLE_KIND => {
                let (cfg, level, requester): (RsiConfig, AutonomyLevel, String) = recipe(record)?;
                let rt = rsi::world_runtime(&cfg.world, Arc::new(LineageStore::new())).map_err(fail)?;
                let mut dep = Deployment::in_process(rt, record.seed, level).map_err(fail)?;
                let gcfg = GauntletConfig {
                    requester,
                    level,
                    ..GauntletConfig::default()
                };
                let report = rsi::rsi_cycle(&mut dep, &cfg, &gcfg, record.seed).map_err(fail)?;
                Ok(rsi::cycle_outputs(&report))
            }
            other => Err(ReplayError::NotReplayable(other.to_string())),
        }
    }
}
