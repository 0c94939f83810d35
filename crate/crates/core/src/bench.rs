//! Performance measurements: solver latency, belief throughput, sparse
//! activation, training wall time, and loop tick latency.
//!
//! Timings depend on the host; every workload is seeded so the *work* is
//! identical between runs.

use crate::aara::{self, LoopConfig};
use crate::belief::{BeliefNetwork, Evidence};
use crate::budget::Meter;
use crate::canonical;
use crate::lineage::{LineageStore, Seed};
use crate::registry::Registry;
use crate::scenarios::{golden_activation_graph, GOLDEN_TARGET};
use crate::solvers::SolverId;
use crate::train::{train_nano, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Published single-invocation latency, shown next to the measured P50 for
/// context only.
pub const REFERENCE_P50_MS: f64 = 0.0002;
pub const SOLVER_P50_BOUND_MS: f64 = 1.0;
pub const TICK_BOUND_MS: f64 = 100.0;
pub const TRAIN_BOUND_S: f64 = 20.0;
pub const BELIEF_FLOOR_PER_S: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("workload failed: {0}")]
    Workload(String),
}

fn wl(e: impl std::fmt::Display) -> BenchError {
    BenchError::Workload(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Timed invocations per solver.
    pub solver_calls: usize,
    pub belief_nodes: usize,
    pub belief_updates: usize,
    /// Learned coefficients including the intercept.
    pub train_params: usize,
    pub train_rows: usize,
    pub train_runs: usize,
    pub loop_ticks: u64,
    pub seed: Seed,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            solver_calls: 2_000,
            belief_nodes: 1_000_000,
            belief_updates: 1_000_000,
            train_params: 100_000,
            train_rows: 1_000_000,
            train_runs: 3,
            loop_ticks: 200,
            seed: Seed(7),
        }
    }
}

impl BenchConfig {
    /// Small sizes for smoke tests.
    pub fn quick() -> Self {
        Self {
            solver_calls: 50,
            belief_nodes: 10_000,
            belief_updates: 20_000,
            train_params: 2_000,
            train_rows: 20_000,
            train_runs: 1,
            loop_ticks: 20,
            seed: Seed(7),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTiming {
    pub solver: String,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config: BenchConfig,
    pub solvers: Vec<SolverTiming>,
    pub solver_p50_ms: f64,
    pub solver_p99_ms: f64,
    pub reference_p50_ms: f64,
    pub belief_updates_per_s: f64,
    /// Every touched posterior equals 1 + successes, 1 + failures.
    pub belief_exact: bool,
    pub activation_fraction: f64,
    pub activated_models: usize,
    pub total_models: usize,
    pub train_runs_s: Vec<f64>,
    pub train_median_s: f64,
    pub train_iterations: usize,
    pub tick_p50_ms: f64,
    pub tick_p99_ms: f64,
    pub tick_max_ms: f64,
    /// Peak resident set, where the platform reports it.
    pub peak_rss_mb: Option<f64>,
}

impl Metrics {
    pub fn canonical(&self) -> String {
        canonical::to_canonical(self)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<24} {:>10} {:>10}\n", "solver", "P50 ms", "P99 ms"));
        for t in &self.solvers {
            s.push_str(&format!("{:<24} {:>10.5} {:>10.5}\n", t.solver, t.p50_ms, t.p99_ms));
        }
        let ok = |b: bool| if b { "ok" } else { "OVER" };
        s.push_str(&format!(
            "solver invoke P50 {:.5} ms, P99 {:.5} ms (bound {} ms: {}; reference figure {} ms)\n",
            self.solver_p50_ms,
            self.solver_p99_ms,
            SOLVER_P50_BOUND_MS,
            ok(self.solver_p50_ms < SOLVER_P50_BOUND_MS),
            self.reference_p50_ms
        ));
        s.push_str(&format!(
            "belief updates {:.0}/s on {} nodes (floor {}: {}), posteriors exact: {}\n",
            self.belief_updates_per_s,
            self.config.belief_nodes,
            BELIEF_FLOOR_PER_S,
            ok(self.belief_updates_per_s >= BELIEF_FLOOR_PER_S),
            self.belief_exact
        ));
        s.push_str(&format!(
            "activation {}/{} models = {:.4}\n",
            self.activated_models, self.total_models, self.activation_fraction
        ));
        s.push_str(&format!(
            "train_nano {} params x {} rows: median {:.2} s of {:?} ({} iterations; bound {} s: {})\n",
            self.config.train_params,
            self.config.train_rows,
            self.train_median_s,
            self.train_runs_s.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>(),
            self.train_iterations,
            TRAIN_BOUND_S,
            ok(self.train_median_s < TRAIN_BOUND_S)
        ));
        s.push_str(&format!(
            "loop tick P50 {:.3} ms, P99 {:.3} ms, max {:.3} ms (bound {} ms: {})\n",
            self.tick_p50_ms,
            self.tick_p99_ms,
            self.tick_max_ms,
            TICK_BOUND_MS,
            ok(self.tick_p99_ms < TICK_BOUND_MS)
        ));
        match self.peak_rss_mb {
            Some(mb) => s.push_str(&format!("peak resident memory {mb:.0} MB\n")),
            None => s.push_str("peak resident memory unavailable\n"),
        }
        s
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    percentile(samples, 0.5)
}

/// Time each solver on its probe inputs through the registry.
pub fn bench_solvers(calls: usize) -> Result<(Vec<SolverTiming>, Vec<f64>), BenchError> {
    let reg = Registry::with_solvers();
    let meter = Meter::unlimited();
    let mut all = Vec::new();
    let mut per = Vec::new();
    for id in SolverId::ALL {
        let inputs = id.probe_inputs();
        let model = id.model_id();
        let mut ms = Vec::with_capacity(calls);
        for _ in 0..calls {
            let t = Instant::now();
            let out = reg.call(&model, None, &inputs, &meter).map_err(wl)?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        per.push(SolverTiming {
            solver: id.name().to_string(),
            p50_ms: median(&ms),
            p99_ms: percentile(&ms, 0.99),
        });
        all.extend(ms);
    }
    Ok((per, all))
}

/// Updates per second over `updates` random unit-weight observations on a
/// network of `nodes` beliefs, plus an exactness check of every posterior.
pub fn bench_beliefs(nodes: usize, updates: usize, seed: Seed) -> Result<(f64, bool), BenchError> {
    let ids: Vec<String> = (0..nodes).map(|i| format!("belief/{i}")).collect();
    let mut net = BeliefNetwork::with_capacity(nodes);
    for id in &ids {
        net.ensure(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let mut counts = vec![(0u32, 0u32); nodes];
    let batch: Vec<Evidence> = (0..updates)
        .map(|_| {
            let i = rng.gen_range(0..nodes);
            if rng.gen_bool(0.5) {
                counts[i].0 += 1;
                Evidence::success(&ids[i])
            } else {
                counts[i].1 += 1;
                Evidence::failure(&ids[i])
            }
        })
        .collect();
    let t = Instant::now();
    let r = net.batch_update(&batch);
    let secs = t.elapsed().as_secs_f64().max(1e-9);
    if r.applied != updates {
        return Err(BenchError::Workload(format!("{} updates rejected", r.errors.len())));
    }
    let exact = ids.iter().zip(&counts).all(|(id, &(s, f))| {
        net.get(id)
            .is_some_and(|n| n.alpha == 1.0 + s as f64 && n.beta == 1.0 + f as f64)
    });
    Ok((updates as f64 / secs, exact))
}

/// A wide sparse regression problem with `params` coefficients (intercept
/// included): each row touches a few features with a planted linear truth.
pub fn wide_dataset(params: usize, rows: usize, seed: Seed) -> Dataset {
    const PER_ROW: usize = 4;
    let dim = params.saturating_sub(1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let truth: Vec<f64> = (0..=dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut ds = Dataset::with_capacity(dim, rows, rows * PER_ROW);
    let mut row = Vec::with_capacity(PER_ROW);
    for r in 0..rows {
        row.clear();
        // the first feature cycles so every column is observed
        row.push((r % dim, 1.0));
        while row.len() < PER_ROW.min(dim) {
            let i = rng.gen_range(0..dim);
            if row.iter().all(|&(j, _)| j != i) {
                row.push((i, rng.gen_range(0.5..1.5)));
            }
        }
        let y = truth[0] + row.iter().map(|&(i, v)| truth[i + 1] * v).sum::<f64>() + rng.gen_range(-1e-3..1e-3);
        ds.push_sparse(&row, y);
    }
    ds
}

/// Wall-clock seconds of `runs` fits on the same dataset.
pub fn bench_train(params: usize, rows: usize, runs: usize, seed: Seed) -> Result<(Vec<f64>, usize), BenchError> {
    let ds = wide_dataset(params, rows, seed);
    let mut times = Vec::with_capacity(runs);
    let mut iterations = 0;
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        let fit = train_nano(&ds, seed).map_err(wl)?;
        times.push(t.elapsed().as_secs_f64());
        iterations = fit.iterations;
        if fit.coefficients.len() != params.max(2) {
            return Err(BenchError::Workload(format!("fit has {} coefficients", fit.coefficients.len())));
        }
    }
    Ok((times, iterations))
}

/// Per-tick latency of the plant loop, in milliseconds.
pub fn bench_loop(ticks: u64, seed: Seed) -> Result<Vec<f64>, BenchError> {
    let cfg = LoopConfig {
        ticks,
        seed,
        ..LoopConfig::default()
    };
    let mut dep = aara::plant_deployment(Arc::new(LineageStore::new()), &cfg).map_err(wl)?;
    let report = aara::run_loop(&mut dep, &cfg, None).map_err(wl)?;
    Ok(report.tick_latency_us.iter().map(|&us| us as f64 / 1e3).collect())
}

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Metrics, BenchError> {
    let (solvers, all) = bench_solvers(cfg.solver_calls)?;
    let (belief_updates_per_s, belief_exact) = bench_beliefs(cfg.belief_nodes, cfg.belief_updates, cfg.seed)?;
    let act = golden_activation_graph().activate(&[GOLDEN_TARGET]).map_err(wl)?;
    let (train_runs_s, train_iterations) = bench_train(cfg.train_params, cfg.train_rows, cfg.train_runs, cfg.seed)?;
    let ticks = bench_loop(cfg.loop_ticks, cfg.seed)?;
    Ok(Metrics {
        config: cfg.clone(),
        solver_p50_ms: median(&all),
        solver_p99_ms: percentile(&all, 0.99),
        solvers,
        reference_p50_ms: REFERENCE_P50_MS,
        belief_updates_per_s,
        belief_exact,
        activation_fraction: act.fraction,
        activated_models: act.model_nodes,
        total_models: act.total_model_nodes,
        train_median_s: median(&train_runs_s),
        train_runs_s,
        train_iterations,
        tick_p50_ms: median(&ticks),
        tick_p99_ms: percentile(&ticks, 0.99),
        tick_max_ms: ticks.iter().copied().fold(0.0, f64::max),
        peak_rss_mb: peak_rss_mb(),
    })
}
