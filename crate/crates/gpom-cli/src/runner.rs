//! Shared run machinery: one (algorithm, problem, seed) cell at a time.
//!
//! Every algorithm in a cell sees the same derived seed, so two runs of the
//! same algorithm are bit-identical and different algorithms start from the
//! same initial population.

use gpom::baselines::{de_step, es_step, DeConfig, EsConfig};
use gpom::bench::{FunctionId, Problem};
use gpom::error::{GpomError, Result};
use gpom::model::{
    gpom_rollout, AblationMode, GenStat, GpomConfig, Population, RolloutOptions, RolloutResult,
    Theta,
};
use gpom::rng::{derive_seed, RngBundle};

use crate::report::TraceRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Gpom,
    De,
    Es,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Gpom => "gpom",
            Algorithm::De => "de",
            Algorithm::Es => "es",
        }
    }

    pub fn parse(s: &str) -> Result<Algorithm> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gpom" => Ok(Algorithm::Gpom),
            "de" => Ok(Algorithm::De),
            "es" => Ok(Algorithm::Es),
            other => Err(GpomError::InvalidConfig(format!("unknown algorithm '{other}'"))),
        }
    }

    /// Objective evaluations one generation consumes at population size n.
    pub fn evals_per_generation(&self, n: usize) -> u64 {
        match self {
            Algorithm::Gpom => 2 * n as u64,
            Algorithm::De | Algorithm::Es => n as u64,
        }
    }

    /// Generations fitting inside an evaluation budget.
    pub fn generations_for_budget(&self, budget: u64, n: usize) -> Result<u32> {
        let per = self.evals_per_generation(n);
        let gens = budget / per;
        if gens == 0 {
            return Err(GpomError::InvalidConfig(format!(
                "budget {budget} is below one {} generation ({per} evaluations)",
                self.label()
            )));
        }
        Ok(gens as u32)
    }
}

/// Everything produced by one cell.
pub struct CellResult {
    pub rows: Vec<TraceRow>,
    /// Best-so-far at the end of the run.
    pub final_best: f64,
    /// Objective evaluations consumed by the generations (setup excluded).
    pub evals: u64,
}

/// Per-cell rng derivation: identical for every algorithm run on the cell.
pub fn cell_seed(seed: u64, id: FunctionId, dim: usize) -> u64 {
    derive_seed(seed, &format!("{id}/d{dim}"))
}

pub fn run_gpom_cell(
    theta: &Theta,
    cfg: &GpomConfig,
    problem: &Problem,
    n: usize,
    gens: u32,
    seed: u64,
) -> Result<CellResult> {
    let local = problem.clone();
    let mut rngs = RngBundle::new(cell_seed(seed, local.id(), local.dim()));
    let pop = Population::init(&local, n, &mut rngs.init)?;
    let before = local.evals_used();
    let rollout: RolloutResult = gpom_rollout(
        pop,
        &local,
        theta,
        cfg,
        gens,
        &mut rngs,
        &RolloutOptions::default(),
    )?;
    Ok(finish_cell(seed, rollout.trace, local.evals_used() - before))
}

pub fn run_de_cell(
    problem: &Problem,
    de: &DeConfig,
    n: usize,
    gens: u32,
    seed: u64,
) -> Result<CellResult> {
    let local = problem.clone();
    let mut rngs = RngBundle::new(cell_seed(seed, local.id(), local.dim()));
    let mut pop = Population::init(&local, n, &mut rngs.init)?;
    let before = local.evals_used();
    let mut trace = Vec::with_capacity(gens as usize);
    for _ in 0..gens {
        pop = de_step(&pop, &local, de, &mut rngs.de)?;
        trace.push(GenStat {
            best: pop.best(),
            mean: pop.mean_fitness(),
        });
    }
    Ok(finish_cell(seed, trace, local.evals_used() - before))
}

pub fn run_es_cell(
    problem: &Problem,
    n: usize,
    gens: u32,
    seed: u64,
) -> Result<CellResult> {
    let local = problem.clone();
    let cfg = EsConfig::new(n, 0.5)?;
    let mut rngs = RngBundle::new(cell_seed(seed, local.id(), local.dim()));
    let mut pop = Population::init(&local, n, &mut rngs.init)?;
    let before = local.evals_used();
    let mut trace = Vec::with_capacity(gens as usize);
    for _ in 0..gens {
        pop = es_step(&pop, &local, &cfg, &mut rngs.de)?;
        trace.push(GenStat {
            best: pop.best(),
            mean: pop.mean_fitness(),
        });
    }
    Ok(finish_cell(seed, trace, local.evals_used() - before))
}

fn finish_cell(seed: u64, trace: Vec<GenStat>, evals: u64) -> CellResult {
    let rows: Vec<TraceRow> = trace
        .iter()
        .enumerate()
        .map(|(i, g)| TraceRow {
            seed,
            generation: i as u32 + 1,
            best: g.best,
            mean: g.mean,
        })
        .collect();
    let final_best = trace.iter().map(|g| g.best).fold(f64::INFINITY, f64::min);
    CellResult {
        rows,
        final_best,
        evals,
    }
}

/// A fresh, seeded, untrained parameter set for the untrained ablation.
pub fn untrained_theta(cfg: &GpomConfig, seed: u64) -> Theta {
    Theta::init_from_seed(cfg, derive_seed(seed, "untrained-theta"))
}

/// Apply an ablation label to a config.
pub fn with_ablation(cfg: &GpomConfig, mode: AblationMode) -> GpomConfig {
    let mut out = cfg.clone();
    out.ablation = mode;
    out
}
