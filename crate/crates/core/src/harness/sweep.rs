//! Deterministic `(V, d)` sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocol::{Cell, SweepProtocol, TrainerSpec};
use super::table::{ResultRow, ResultTable};
use crate::activation::build_paper_activation;
use crate::embed::embeddings_for;
use crate::error::{Error, Result};
use crate::model::{accuracy_on, LayerNormConfig};
use crate::rng::{derive_seed, rng_from_seed, Role};
use crate::taskgen::{sample_dataset_capped, sample_fresh, sample_permutation, Arch, TaskConfig, DEFAULT_TOKEN_CAP};
use crate::trainer::{adam_train, three_step_train};

/// Environment variable read for the worker count when none is given.
pub const WORKERS_ENV: &str = "RECALL_WORKERS";
/// Default cap on `Σ N·L·d` over all cells and seeds.
pub const DEFAULT_BUDGET: u128 = 2_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    /// Cap on `Σ N·L·d` over all runs.
    #[serde(default = "default_budget")]
    pub budget: u128,
    /// Cap on `N·L` for one dataset.
    #[serde(default = "default_token_cap")]
    pub token_cap: usize,
    /// Worker threads; `None` reads the environment, then uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Measured seconds in `wallclock_s`; when off the column is 0 and the
    /// table bytes depend only on the configuration.
    #[serde(default)]
    pub record_wallclock: bool,
}

fn default_budget() -> u128 {
    DEFAULT_BUDGET
}
fn default_token_cap() -> usize {
    DEFAULT_TOKEN_CAP
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, token_cap: DEFAULT_TOKEN_CAP, workers: None, record_wallclock: false }
    }
}

/// Task seed for repetition `s` at vocabulary size `v`. Every `d` at the same
/// `(V, s)` shares the permutation and the dataset.
pub fn task_seed(master_seed: u64, v: usize, s: usize) -> u64 {
    derive_seed(derive_seed(master_seed, Role::Cell, v as u64), Role::Cell, s as u64)
}

pub fn resolve_workers(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|s| s.parse().ok()))
        .filter(|&w| w > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Rejects protocols whose total work exceeds the budget, naming the cells
/// that push the running total over it.
pub fn check_budget(protocol: &SweepProtocol, budget: u128) -> Result<()> {
    let seeds = protocol.seeds_per_cell as u128;
    let mut total = 0u128;
    let mut offending = Vec::new();
    for c in protocol.cells() {
        total += c.cost() * seeds;
        if total > budget {
            offending.push(format!("(V={}, d={}, cost={})", c.v, c.d, c.cost() * seeds));
        }
    }
    if offending.is_empty() {
        Ok(())
    } else {
        let shown = offending.iter().take(8).cloned().collect::<Vec<_>>().join(", ");
        let more = if offending.len() > 8 { format!(" and {} more", offending.len() - 8) } else { String::new() };
        Err(Error::ResourceCap(format!("sweep cost {total} exceeds budget {budget}; over budget: {shown}{more}")))
    }
}

fn task_for(cell: &Cell, seed: u64) -> TaskConfig {
    TaskConfig::new(cell.v, cell.l, cell.n, cell.d, cell.m).with_seed(seed)
}

fn row(cell: &Cell, seed: u64, trainer: &str) -> ResultRow {
    ResultRow {
        v: cell.v,
        l: cell.l,
        n: cell.n,
        d: cell.d,
        m: cell.m,
        seed,
        trainer: trainer.to_string(),
        epoch: None,
        accuracy: None,
        stderr: None,
        wallclock_s: 0.0,
        eta: None,
        gamma: None,
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::Divergence(_) | Error::CannotAutoscale(_))
}

/// Trains and evaluates one `(cell, seed)`; divergence becomes rows with no
/// accuracy.
pub fn run_cell(protocol: &SweepProtocol, cell: &Cell, seed: u64, options: &SweepOptions) -> Result<Vec<ResultRow>> {
    let start = Instant::now();
    let cfg = task_for(cell, seed);
    cfg.validate()?;
    let perm = sample_permutation(cfg.vocab_size, &mut rng_from_seed(cfg.perm_seed()))?;
    let data = sample_dataset_capped(&cfg, &perm, cfg.data_seed(), options.token_cap)?;
    let emb = embeddings_for(&cfg)?;
    let act = (protocol.arch == Arch::AttentionMlp).then(build_paper_activation);
    let arch = protocol.arch;
    let trainer = protocol.trainer.name();
    let elapsed = |start: &Instant| if options.record_wallclock { start.elapsed().as_secs_f64() } else { 0.0 };
    match protocol.trainer {
        TrainerSpec::ThreeStep { .. } => {
            let hyper = protocol.trainer.three_step_hyper(cell.v, cell.l).expect("three-step");
            let mut out = row(cell, seed, trainer);
            match three_step_train(&data, &emb, act.as_ref(), &hyper, arch) {
                Ok(run) => {
                    let fresh = sample_fresh(&cfg, &perm, protocol.n_eval, cfg.eval_seed())?;
                    let est = accuracy_on(&fresh, &run.params, &emb, act.as_ref(), &LayerNormConfig::disabled())?;
                    out.accuracy = Some(est.accuracy);
                    out.stderr = Some(est.stderr);
                    out.eta = Some(run.trace.eta);
                    out.gamma = Some(run.trace.gamma);
                }
                Err(e) if recoverable(&e) => {
                    if !hyper.auto_scale {
                        out.eta = Some(hyper.eta);
                        out.gamma = Some(hyper.gamma);
                    }
                }
                Err(e) => return Err(e),
            }
            out.wallclock_s = elapsed(&start);
            Ok(vec![out])
        }
        TrainerSpec::Adam { layer_norm, lr, .. } => {
            let hyper = protocol.trainer.adam_hyper(cell.n, derive_seed(seed, Role::Shuffle, 0)).expect("adam");
            let ln = if layer_norm { LayerNormConfig::attention_output() } else { LayerNormConfig::disabled() };
            let mut eval_rng = rng_from_seed(cfg.eval_seed());
            match adam_train(&data, &emb, act.as_ref(), &ln, &hyper, arch, protocol.n_eval, &mut eval_rng) {
                Ok(run) => {
                    let wall = elapsed(&start);
                    Ok(run
                        .snapshots
                        .iter()
                        .map(|s| ResultRow {
                            epoch: Some(s.epoch),
                            accuracy: Some(s.accuracy.accuracy),
                            stderr: Some(s.accuracy.stderr),
                            wallclock_s: wall,
                            eta: Some(lr),
                            ..row(cell, seed, trainer)
                        })
                        .collect())
                }
                Err(e) if recoverable(&e) => {
                    let wall = elapsed(&start);
                    Ok(hyper
                        .snapshot_epochs()
                        .into_iter()
                        .map(|epoch| ResultRow { epoch: Some(epoch), wallclock_s: wall, eta: Some(lr), ..row(cell, seed, trainer) })
                        .collect())
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Runs every `(cell, seed)` concurrently and returns rows in canonical
/// `(V, d, seed, epoch)` order.
pub fn run_sweep(protocol: &SweepProtocol, master_seed: u64, options: &SweepOptions) -> Result<ResultTable> {
    protocol.validate()?;
    check_budget(protocol, options.budget)?;
    let jobs: Vec<(Cell, u64)> = protocol
        .cells()
        .into_iter()
        .flat_map(|c| (0..protocol.seeds_per_cell).map(move |s| (c, task_seed(master_seed, c.v, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_workers(options.workers))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let chunks: Vec<Vec<ResultRow>> = pool.install(|| {
        jobs.par_iter().map(|(cell, seed)| run_cell(protocol, cell, *seed, options)).collect::<Result<_>>()
    })?;
    Ok(ResultTable { rows: chunks.into_iter().flatten().collect() })
}
