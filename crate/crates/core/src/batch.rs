//! Monte Carlo batches over consecutive seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::comms::Performative;
use crate::engine::{run, RunOutcome, RunResult};
use crate::error::{Result, SimError};
use crate::metrics::Stats;
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub n_runs: usize,
    pub base_seed: u64,
    pub completed: usize,
    pub total_seconds: Stats,
    pub no_flow_seconds: Stats,
    pub rosc_rate: f64,
    pub mean_total_messages: f64,
    pub mean_message_counts: BTreeMap<Performative, f64>,
    pub mean_error_events: f64,
    pub mean_hung_directives: f64,
    pub mean_retransmissions: f64,
    /// `(seed, fault)` for every run that aborted.
    pub faults: Vec<(u64, String)>,
}

/// Per-seed results in seed order plus their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub runs: Vec<(u64, std::result::Result<RunResult, String>)>,
    pub summary: BatchSummary,
}

impl Batch {
    pub fn results(&self) -> Vec<RunResult> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect()
    }
}

/// Runs seeds `base_seed .. base_seed + n_runs` on `parallelism` worker threads.
/// A faulted run is recorded against its seed and the batch carries on.
pub fn monte_carlo(sc: &ScenarioConfig, n_runs: usize, base_seed: u64, parallelism: usize) -> Result<Batch> {
    if n_runs == 0 {
        return Err(SimError::Argument("n_runs must be at least 1".into()));
    }
    if parallelism == 0 {
        return Err(SimError::Argument("parallelism must be at least 1".into()));
    }
    let violations = crate::scenario::validate_scenario(sc);
    if !violations.is_empty() {
        return Err(SimError::InvalidScenario(violations));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| SimError::Argument(format!("thread pool: {e}")))?;
    let runs: Vec<_> = pool.install(|| {
        (0..n_runs as u64)
            .into_par_iter()
            .map(|i| {
                let seed = base_seed.wrapping_add(i);
                (seed, run(sc, seed, false).map(|o| o.result).map_err(|e| e.to_string()))
            })
            .collect()
    });
    let summary = summarize(&runs, base_seed);
    Ok(Batch { runs, summary })
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

pub fn summarize(runs: &[(u64, std::result::Result<RunResult, String>)], base_seed: u64) -> BatchSummary {
    let ok: Vec<&RunResult> = runs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    let n = ok.len();
    let total: Vec<f64> = ok.iter().map(|r| r.total_seconds as f64).collect();
    let nf: Vec<f64> = ok.iter().map(|r| r.no_flow_seconds as f64).collect();
    let rosc = ok.iter().filter(|r| r.outcome == RunOutcome::Rosc).count();
    let mean_message_counts = Performative::ALL
        .into_iter()
        .map(|p| (p, mean(ok.iter().map(|r| r.count(p) as f64), n)))
        .collect();
    BatchSummary {
        n_runs: runs.len(),
        base_seed,
        completed: n,
        total_seconds: Stats::of(&total),
        no_flow_seconds: Stats::of(&nf),
        rosc_rate: if n == 0 { 0.0 } else { rosc as f64 / n as f64 },
        mean_total_messages: mean(ok.iter().map(|r| r.total_messages as f64), n),
        mean_message_counts,
        mean_error_events: mean(ok.iter().map(|r| r.error_events as f64), n),
        mean_hung_directives: mean(ok.iter().map(|r| r.hung_directives as f64), n),
        mean_retransmissions: mean(ok.iter().map(|r| r.retransmissions as f64), n),
        faults: runs
            .iter()
            .filter_map(|(s, r)| r.as_ref().err().map(|e| (*s, e.clone())))
            .collect(),
    }
}
