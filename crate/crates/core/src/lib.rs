//! A governed world-model runtime.
//!
//! Small deterministic models ("nano models") are composed through a
//! dependency graph, checked against first-principles solvers, and allowed to
//! change only through a signing safety kernel and a staged validation
//! pipeline. Every run is recorded with enough provenance to replay it.

pub mod budget;
pub mod canonical;
pub mod lineage;
pub mod solvers;
pub mod registry;
pub mod train;
pub mod context;
pub mod constraints;
pub mod belief;
pub mod kernel;
pub mod runtime;
pub mod surrogate;
pub mod gauntlet;
pub mod rsi;
pub mod aara;
pub mod config;
pub mod scenarios;
pub mod replay;
pub mod attack;
pub mod bench;
