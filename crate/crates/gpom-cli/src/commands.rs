//! Subcommand definitions and drivers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use gpom::baselines::DeConfig;
use gpom::bench::{FunctionId, Problem};
use gpom::checkpoint::{fmt_f64, Checkpoint, TrainMeta};
use gpom::error::{GpomError, Result};
use gpom::model::{gpom_rollout, AblationMode, GpomConfig, Population, RolloutOptions};
use gpom::rng::RngBundle;
use gpom::train::{train_with, TrainConfig};

use crate::report::{
    finals_from_trace, matrix_csv, parse_trace_csv, stats_over_finals, trace_csv, trace_svg,
    write_file, Stats,
};
use crate::runner::{
    cell_seed, run_de_cell, run_es_cell, run_gpom_cell, untrained_theta, with_ablation,
    Algorithm, CellResult,
};

#[derive(Parser)]
#[command(
    name = "gpom",
    about = "Learnable population-based black-box optimizer: train, run and study",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Meta-train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Run a trained model on one problem and write traces and a summary.
    Optimize(OptimizeArgs),
    /// Compare the model against baselines under an equal evaluation budget.
    Compare(CompareArgs),
    /// Run the ablation grid on shared seeds.
    Ablate(AblateArgs),
    /// Dump strategy matrices and crossover rates at chosen generations.
    Export(ExportArgs),
    /// Recompute summary statistics from a trace CSV.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint output path; rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss log path (defaults to <out>.loss.csv).
    #[arg(long)]
    pub loss: Option<PathBuf>,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Problem id, TF1..TF8.
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub pop: usize,
    #[arg(long, default_value_t = 100)]
    pub gens: u32,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed the problem shift is derived from.
    #[arg(long, default_value_t = 0)]
    pub problem_seed: u64,
    /// Run a specific ablation mode instead of the full model.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Also emit a static SVG of the best-fitness curves.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated baselines out of {de, es}.
    #[arg(long, default_value = "de,es")]
    pub baselines: String,
    /// Comma-separated problem ids.
    #[arg(long)]
    pub problems: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub pop: usize,
    /// Objective-evaluation budget every algorithm must stay within.
    #[arg(long)]
    pub budget: u64,
    #[arg(long)]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Relative tie tolerance on final bests.
    #[arg(long, default_value_t = 1e-9)]
    pub tie_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub problem_seed: u64,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated modes, or "all".
    #[arg(long, default_value = "all")]
    pub modes: String,
    #[arg(long)]
    pub problems: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub pop: usize,
    #[arg(long, default_value_t = 100)]
    pub gens: u32,
    #[arg(long)]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub problem_seed: u64,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub pop: usize,
    #[arg(long, default_value_t = 100)]
    pub gens: u32,
    /// Comma-separated generations (1-based) to dump.
    #[arg(long)]
    pub steps: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub problem_seed: u64,
}

#[derive(Args)]
pub struct SummarizeArgs {
    /// A trace CSV produced by optimize/compare.
    #[arg(long)]
    pub trace: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Export(args) => cmd_export(args),
        Command::Summarize(args) => cmd_summarize(args),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| GpomError::InvalidConfig(format!("bad seed '{p}'")))
        })
        .collect();
    let seeds = seeds?;
    if seeds.is_empty() {
        return Err(GpomError::InvalidConfig("at least one seed required".into()));
    }
    Ok(seeds)
}

fn parse_problems(s: &str) -> Result<Vec<FunctionId>> {
    let ids: Result<Vec<FunctionId>> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(FunctionId::from_str)
        .collect();
    let ids = ids?;
    if ids.is_empty() {
        return Err(GpomError::InvalidConfig("at least one problem required".into()));
    }
    Ok(ids)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, GpomConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config();
    cfg.validate()?;
    Ok((ck, cfg))
}

fn config_hash(desc: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(desc.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::new();
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| GpomError::InvalidConfig(format!("train config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if let Some(warning) = cfg.model.scale_warning() {
        eprintln!("warning: {warning}");
    }
    let task_labels: Vec<String> = cfg.tasks()?.iter().map(|t| t.to_string()).collect();
    let started = Instant::now();

    let meta = |epochs: u32, final_mean_loss: Option<f64>| TrainMeta {
        task_ids: task_labels.clone(),
        epochs,
        seed: cfg.seed,
        lr: cfg.lr,
        final_mean_loss,
    };

    let result = train_with(&cfg, |epoch, theta, records| {
        let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        let ck = Checkpoint::new(&cfg.model, theta.clone(), Some(meta(epoch, Some(mean))))?;
        ck.save(&args.out)?;
        eprintln!("epoch {epoch}/{}: mean loss {mean:.6}", cfg.epochs);
        Ok(())
    })?;

    if cfg.epochs == 0 {
        // No epochs ran: the checkpoint is the seeded initialization.
        let ck = Checkpoint::new(&cfg.model, result.theta.clone(), Some(meta(0, None)))?;
        ck.save(&args.out)?;
    }

    let loss_path = args
        .loss
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    let mut csv = String::from("epoch,generation,task,loss\n");
    for r in &result.records {
        let _ = writeln!(csv, "{},{},{},{}", r.epoch, r.generation, r.task, fmt_f64(r.loss));
    }
    write_file(&loss_path, &csv)?;

    let final_mean = result.epoch_means.last().copied();
    match final_mean {
        Some(m) => println!("final mean loss {m:.6}"),
        None => println!("no epochs trained; wrote the seeded initialization"),
    }
    eprintln!(
        "trained {} epochs in {:.1}s; checkpoint at {}",
        cfg.epochs,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn cmd_optimize(args: OptimizeArgs) -> Result<()> {
    let (ck, mut cfg) = load_checkpoint(&args.model)?;
    if let Some(mode) = &args.ablation {
        cfg.ablation = AblationMode::from_str(mode)?;
    }
    if args.pop < 4 {
        return Err(GpomError::InvalidConfig("population must be at least 4".into()));
    }
    let id = FunctionId::from_str(&args.problem)?;
    let seeds = parse_seeds(&args.seeds)?;
    let problem = Problem::new(id, args.dim, args.problem_seed)?;
    let theta = match cfg.ablation {
        AblationMode::Untrained => untrained_theta(&cfg, args.problem_seed),
        _ => ck.theta.clone(),
    };

    let started = Instant::now();
    let cells: Result<Vec<CellResult>> = seeds
        .par_iter()
        .map(|&seed| run_gpom_cell(&theta, &cfg, &problem, args.pop, args.gens, seed))
        .collect();
    let cells = cells?;

    let mut rows = Vec::new();
    let mut finals = Vec::new();
    let mut evals = Vec::new();
    for (seed, cell) in seeds.iter().zip(&cells) {
        rows.extend(cell.rows.iter().copied());
        finals.push((*seed, cell.final_best));
        evals.push(cell.evals);
    }
    let stats = stats_over_finals(&finals)?;

    write_file(&args.out.join("trace.csv"), &trace_csv(&rows))?;
    let desc = format!(
        "optimize/{id}/d{}/n{}/t{}/ps{}/seeds{:?}/ablation{:?}",
        args.dim, args.pop, args.gens, args.problem_seed, seeds, cfg.ablation
    );
    let summary = summary_json(&desc, &problem, args.pop, args.gens, &stats, &evals, started);
    write_file(&args.out.join("summary.json"), &summary)?;
    if args.svg {
        write_file(&args.out.join("curve.svg"), &trace_svg(&rows))?;
    }
    println!(
        "{id} d={} median final best {:.6e} (iqr {:.3e}) over {} seeds",
        args.dim, stats.median, stats.iqr, seeds.len()
    );
    Ok(())
}

fn summary_json(
    desc: &str,
    problem: &Problem,
    pop: usize,
    gens: u32,
    stats: &Stats,
    evals: &[u64],
    started: Instant,
) -> String {
    let spec = serde_json::to_string(&problem.spec()).unwrap_or_else(|_| "null".into());
    let mut out = String::from("{\"config_hash\":\"");
    out.push_str(&config_hash(desc));
    let _ = write!(out, "\",\"problem\":{spec},\"pop\":{pop},\"gens\":{gens}");
    out.push_str(",\"evals\":[");
    for (i, e) in evals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{e}");
    }
    let _ = write!(
        out,
        "],\"wall_time_s\":{},\"stats\":{}}}\n",
        fmt_f64(started.elapsed().as_secs_f64()),
        stats.to_json()
    );
    out
}

struct CompareCell {
    algorithm: Algorithm,
    problem: FunctionId,
    seed: u64,
    result: CellResult,
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let (ck, cfg) = load_checkpoint(&args.model)?;
    let seeds = parse_seeds(&args.seeds)?;
    let problems = parse_problems(&args.problems)?;
    if seeds.len() < 3 {
        return Err(GpomError::InvalidConfig("compare needs at least 3 seeds".into()));
    }
    let baselines: Result<Vec<Algorithm>> = args
        .baselines
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Algorithm::parse)
        .collect();
    let baselines = baselines?;
    if baselines.is_empty() {
        return Err(GpomError::InvalidConfig("compare needs at least one baseline".into()));
    }
    let mut algorithms = vec![Algorithm::Gpom];
    algorithms.extend(&baselines);

    // Budget parity: every algorithm runs as many whole generations as fit.
    let mut gens_for = Vec::new();
    for alg in &algorithms {
        gens_for.push((*alg, alg.generations_for_budget(args.budget, args.pop)?));
    }

    let mut jobs = Vec::new();
    for problem in &problems {
        for (alg, gens) in &gens_for {
            for seed in &seeds {
                jobs.push((*alg, *problem, *gens, *seed));
            }
        }
    }
    let de_cfg = DeConfig::default();
    let cells: Result<Vec<CompareCell>> = jobs
        .par_iter()
        .map(|&(alg, id, gens, seed)| {
            let problem = Problem::new(id, args.dim, args.problem_seed)?;
            let result = match alg {
                Algorithm::Gpom => {
                    run_gpom_cell(&ck.theta, &cfg, &problem, args.pop, gens, seed)?
                }
                Algorithm::De => run_de_cell(&problem, &de_cfg, args.pop, gens, seed)?,
                Algorithm::Es => run_es_cell(&problem, args.pop, gens, seed)?,
            };
            Ok(CompareCell {
                algorithm: alg,
                problem: id,
                seed,
                result,
            })
        })
        .collect();
    let cells = cells?;

    // Per-(algorithm, problem) traces and summaries.
    let mut summary = String::from("algorithm,problem,median,iqr,mean,std,evals_per_seed\n");
    for alg in &algorithms {
        for id in &problems {
            let group: Vec<&CompareCell> = cells
                .iter()
                .filter(|c| c.algorithm == *alg && c.problem == *id)
                .collect();
            let mut rows = Vec::new();
            let mut finals = Vec::new();
            let mut evals = Vec::new();
            for c in &group {
                rows.extend(c.result.rows.iter().copied());
                finals.push((c.seed, c.result.final_best));
                evals.push(c.result.evals);
            }
            let stats = stats_over_finals(&finals)?;
            write_file(
                &args.out.join(format!("trace_{}_{id}.csv", alg.label())),
                &trace_csv(&rows),
            )?;
            let _ = writeln!(
                summary,
                "{},{id},{},{},{},{},{}",
                alg.label(),
                fmt_f64(stats.median),
                fmt_f64(stats.iqr),
                fmt_f64(stats.mean),
                fmt_f64(stats.std),
                evals[0]
            );
        }
    }
    write_file(&args.out.join("summary.csv"), &summary)?;

    // Win/tie/loss of the model against each baseline, per (problem, seed).
    let final_of = |alg: Algorithm, id: FunctionId, seed: u64| -> f64 {
        cells
            .iter()
            .find(|c| c.algorithm == alg && c.problem == id && c.seed == seed)
            .map(|c| c.result.final_best)
            .unwrap_or(f64::NAN)
    };
    let mut wtl = String::from("baseline,problem,wins,ties,losses\n");
    for base in &baselines {
        for id in &problems {
            let (mut w, mut t, mut l) = (0u32, 0u32, 0u32);
            for &seed in &seeds {
                let ours = final_of(Algorithm::Gpom, *id, seed);
                let theirs = final_of(*base, *id, seed);
                let tol = args.tie_tol * ours.abs().max(theirs.abs()).max(1.0);
                if (ours - theirs).abs() <= tol {
                    t += 1;
                } else if ours < theirs {
                    w += 1;
                } else {
                    l += 1;
                }
            }
            let _ = writeln!(wtl, "{},{id},{w},{t},{l}", base.label());
        }
    }
    write_file(&args.out.join("wtl.csv"), &wtl)?;
    println!(
        "compared {} algorithms on {} problems x {} seeds (budget {} evaluations)",
        algorithms.len(),
        problems.len(),
        seeds.len(),
        args.budget
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (ck, cfg) = load_checkpoint(&args.model)?;
    let seeds = parse_seeds(&args.seeds)?;
    let problems = parse_problems(&args.problems)?;
    let modes: Vec<AblationMode> = if args.modes.trim() == "all" {
        AblationMode::ALL.to_vec()
    } else {
        let parsed: Result<Vec<AblationMode>> = args
            .modes
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(AblationMode::from_str)
            .collect();
        parsed?
    };
    if modes.is_empty() {
        return Err(GpomError::InvalidConfig("no ablation modes selected".into()));
    }

    let mut jobs = Vec::new();
    for mode in &modes {
        for id in &problems {
            for seed in &seeds {
                jobs.push((*mode, *id, *seed));
            }
        }
    }
    let cells: Result<Vec<(AblationMode, FunctionId, u64, f64)>> = jobs
        .par_iter()
        .map(|&(mode, id, seed)| {
            let problem = Problem::new(id, args.dim, args.problem_seed)?;
            let mode_cfg = with_ablation(&cfg, mode);
            let theta = match mode {
                AblationMode::Untrained => untrained_theta(&cfg, seed),
                _ => ck.theta.clone(),
            };
            let cell = run_gpom_cell(&theta, &mode_cfg, &problem, args.pop, args.gens, seed)?;
            Ok((mode, id, seed, cell.final_best))
        })
        .collect();
    let cells = cells?;

    let mut table = String::from("mode,problem,seed,final_best\n");
    for (mode, id, seed, best) in &cells {
        let _ = writeln!(table, "{},{id},{seed},{}", mode.label(), fmt_f64(*best));
    }
    write_file(&args.out.join("ablation.csv"), &table)?;

    let mut summary = String::from("mode,problem,median,iqr,mean,std\n");
    for mode in &modes {
        for id in &problems {
            let finals: Vec<(u64, f64)> = cells
                .iter()
                .filter(|(m, p, _, _)| m == mode && p == id)
                .map(|(_, _, s, f)| (*s, *f))
                .collect();
            let stats = stats_over_finals(&finals)?;
            let _ = writeln!(
                summary,
                "{},{id},{},{},{},{}",
                mode.label(),
                fmt_f64(stats.median),
                fmt_f64(stats.iqr),
                fmt_f64(stats.mean),
                fmt_f64(stats.std)
            );
        }
    }
    write_file(&args.out.join("ablation_summary.csv"), &summary)?;
    println!(
        "ablated {} modes on {} problems x {} seeds",
        modes.len(),
        problems.len(),
        seeds.len()
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let (ck, cfg) = load_checkpoint(&args.model)?;
    let id = FunctionId::from_str(&args.problem)?;
    let steps: Result<Vec<u32>> = args
        .steps
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| GpomError::InvalidConfig(format!("bad generation '{p}'")))
        })
        .collect();
    let steps = steps?;
    if steps.is_empty() || steps.iter().any(|&s| s == 0 || s > args.gens) {
        return Err(GpomError::InvalidConfig(
            "steps must be 1-based generations within --gens".into(),
        ));
    }
    let problem = Problem::new(id, args.dim, args.problem_seed)?;
    let mut rngs = RngBundle::new(cell_seed(args.seed, id, args.dim));
    let pop = Population::init(&problem, args.pop, &mut rngs.init)?;
    let rollout = gpom_rollout(
        pop,
        &problem,
        &ck.theta,
        &cfg,
        args.gens,
        &mut rngs,
        &RolloutOptions {
            record_strategy_at: steps.clone(),
        },
    )?;
    for dump in &rollout.dumps {
        write_file(
            &args.out.join(format!("S_gen{}.csv", dump.generation)),
            &matrix_csv(&dump.s),
        )?;
        let mut cr = String::new();
        for v in &dump.cr {
            let _ = writeln!(cr, "{}", fmt_f64(*v));
        }
        write_file(&args.out.join(format!("cr_gen{}.csv", dump.generation)), &cr)?;
    }
    println!("dumped {} generations to {}", rollout.dumps.len(), args.out.display());
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.trace)?;
    let rows = parse_trace_csv(&text)?;
    let finals = finals_from_trace(&rows);
    let stats = stats_over_finals(&finals)?;
    let json = stats.to_json();
    match &args.out {
        Some(path) => write_file(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}
