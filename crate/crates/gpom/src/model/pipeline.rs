//! One evolution step as a differentiable graph, plus the rollout driver.
//!
//! The same graph serves inference (parameters recorded as constants, values
//! extracted, tape dropped) and training (parameters recorded as trainable
//! leaves, loss backpropagated). Randomness is sampled up front into a
//! [`StepRandomness`] so a step is a deterministic function of (population,
//! parameters, randomness) — tests inject randomness directly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_cols, row_select, st_choice, Tape, Var};
use crate::baselines::{sample_draw, strategy_row, DeStrategy, MutationDraw};
use crate::bench::Problem;
use crate::error::{GpomError, Result};
use crate::model::{AblationMode, GpomConfig, Population, Theta, ThetaLcm, ThetaLmm};
use crate::rng::RngBundle;
use crate::tensor::Tensor;

/// All random draws one step consumes, sampled from per-stage streams.
#[derive(Debug, Clone)]
pub struct StepRandomness {
    /// Per-entry keep flags for the strategy matrix (`None` when the
    /// mutation module is ablated away).
    pub keep_mask: Option<Vec<bool>>,
    /// Uniform [0, 1) draws compared against the crossover rates.
    pub crossover_r: Tensor,
    /// Optional Gumbel logit offsets added to `crossover_r`.
    pub gumbel_offset: Option<Tensor>,
    /// rand/1 index draws backing the no-lmm fallback strategy rows.
    pub de_draws: Option<Vec<MutationDraw>>,
}

impl StepRandomness {
    /// Effective crossover comparison logits.
    pub fn crossover_logits(&self) -> Tensor {
        match &self.gumbel_offset {
            None => self.crossover_r.clone(),
            Some(off) => {
                let mut out = self.crossover_r.clone();
                out.add_scaled(off, 1.0);
                out
            }
        }
    }
}

/// Independent keep/drop flags for an n x n strategy matrix; each entry is
/// dropped with probability `r_mask`.
pub fn sample_keep_mask(n: usize, r_mask: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n * n).map(|_| rng.gen::<f64>() >= r_mask).collect()
}

/// Draw everything one step needs from the bundle's per-stage streams.
pub fn sample_step_randomness(
    cfg: &GpomConfig,
    n: usize,
    d: usize,
    rngs: &mut RngBundle,
) -> Result<StepRandomness> {
    let (keep_mask, de_draws) = if cfg.ablation == AblationMode::NoLmm {
        let mut draws = Vec::with_capacity(n);
        for i in 0..n {
            // rand/1 never reads fitness, so no fitness is threaded through.
            draws.push(sample_draw(DeStrategy::Rand1, n, i, &[], None, &mut rngs.de)?);
        }
        (None, Some(draws))
    } else {
        (
            Some(sample_keep_mask(n, cfg.effective_r_mask(), &mut rngs.mask)),
            None,
        )
    };
    let mut r = Tensor::zeros(n, d);
    for v in r.data_mut() {
        *v = rngs.crossover.gen::<f64>();
    }
    let gumbel_offset = if cfg.gumbel_noise {
        let mut off = Tensor::zeros(n, d);
        for v in off.data_mut() {
            let u0: f64 = rngs.gumbel.gen::<f64>().max(1e-300);
            let u1: f64 = rngs.gumbel.gen::<f64>().max(1e-300);
            let g0 = -(-u0.ln()).ln();
            let g1 = -(-u1.ln()).ln();
            *v = g0 - g1;
        }
        Some(off)
    } else {
        None
    };
    Ok(StepRandomness {
        keep_mask,
        crossover_r: r,
        gumbel_offset,
        de_draws,
    })
}

/// Mutation-module parameters recorded on a tape.
#[derive(Clone, Copy)]
pub struct LmmVars<'t> {
    pub w_m1: Var<'t>,
    pub w_m2: Var<'t>,
    pub w_m3: Var<'t>,
    pub b_m1: Var<'t>,
    pub b_m2: Var<'t>,
    pub b_m3: Var<'t>,
}

/// Crossover-module parameters recorded on a tape.
#[derive(Clone, Copy)]
pub struct LcmVars<'t> {
    pub w_c1: Var<'t>,
    pub b_c1: Var<'t>,
    pub w_c2: Var<'t>,
    pub b_c2: Var<'t>,
    pub ln_gain: Var<'t>,
    pub ln_bias: Var<'t>,
}

/// All parameters recorded on a tape, trainable or frozen.
#[derive(Clone, Copy)]
pub struct ThetaVars<'t> {
    pub lmm: LmmVars<'t>,
    pub lcm: LcmVars<'t>,
}

fn push_one<'t>(tape: &'t Tape, t: &Tensor, trainable: bool) -> Result<Var<'t>> {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

pub fn push_lmm<'t>(tape: &'t Tape, theta: &ThetaLmm, trainable: bool) -> Result<LmmVars<'t>> {
    Ok(LmmVars {
        w_m1: push_one(tape, &theta.w_m1, trainable)?,
        w_m2: push_one(tape, &theta.w_m2, trainable)?,
        w_m3: push_one(tape, &theta.w_m3, trainable)?,
        b_m1: push_one(tape, &theta.b_m1, trainable)?,
        b_m2: push_one(tape, &theta.b_m2, trainable)?,
        b_m3: push_one(tape, &theta.b_m3, trainable)?,
    })
}

pub fn push_lcm<'t>(tape: &'t Tape, theta: &ThetaLcm, trainable: bool) -> Result<LcmVars<'t>> {
    Ok(LcmVars {
        w_c1: push_one(tape, &theta.w_c1, trainable)?,
        b_c1: push_one(tape, &theta.b_c1, trainable)?,
        w_c2: push_one(tape, &theta.w_c2, trainable)?,
        b_c2: push_one(tape, &theta.b_c2, trainable)?,
        ln_gain: push_one(tape, &theta.ln_gain, trainable)?,
        ln_bias: push_one(tape, &theta.ln_bias, trainable)?,
    })
}

/// Record all parameters on the tape, in canonical order.
pub fn push_theta<'t>(tape: &'t Tape, theta: &Theta, trainable: bool) -> Result<ThetaVars<'t>> {
    Ok(ThetaVars {
        lmm: push_lmm(tape, &theta.lmm, trainable)?,
        lcm: push_lcm(tape, &theta.lcm, trainable)?,
    })
}

impl<'t> ThetaVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 12] {
        [
            self.lmm.w_m1,
            self.lmm.w_m2,
            self.lmm.w_m3,
            self.lmm.b_m1,
            self.lmm.b_m2,
            self.lmm.b_m3,
            self.lcm.w_c1,
            self.lcm.b_c1,
            self.lcm.w_c2,
            self.lcm.b_c2,
            self.lcm.ln_gain,
            self.lcm.ln_bias,
        ]
    }

    /// Accumulated gradients in canonical order; parameters must have been
    /// pushed as trainable.
    pub fn grads(&self) -> Result<Vec<Tensor>> {
        self.vars()
            .iter()
            .map(|v| {
                v.grad().ok_or(GpomError::Contract {
                    op: "theta grads",
                    msg: "parameter was not pushed as trainable".into(),
                })
            })
            .collect()
    }
}

fn lmm_graph<'t>(h: Var<'t>, t: &LmmVars<'t>, d_m: usize) -> Result<Var<'t>> {
    let h_hat = h.matmul(t.w_m1)?.add_bias(t.b_m1)?.tanh()?;
    let q = h_hat.matmul(t.w_m2)?.add_bias(t.b_m2)?.tanh()?;
    let k = h_hat.matmul(t.w_m3)?.add_bias(t.b_m3)?.tanh()?;
    q.matmul(k.transpose()?)?
        .scale(1.0 / (d_m as f64).sqrt())?
        .tanh()
}

fn lcm_graph<'t>(z: Var<'t>, t: &LcmVars<'t>) -> Result<Var<'t>> {
    let h = z.matmul(t.w_c1)?.add_bias(t.b_c1)?.tanh()?;
    let hn = h.layer_norm(t.ln_gain, t.ln_bias)?;
    hn.matmul(t.w_c2)?.add_bias(t.b_c2)?.sigmoid()
}

/// Pre-mask strategy matrix from an N x 2 population descriptor.
pub fn lmm_forward(h: &Tensor, theta: &ThetaLmm) -> Result<Tensor> {
    let tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let tv = push_lmm(&tape, theta, false)?;
    Ok(lmm_graph(hv, &tv, theta.w_m2.rows())?.value())
}

/// Per-individual crossover rates from an N x 4 descriptor; all in (0, 1).
pub fn lcm_forward(z: &Tensor, theta: &ThetaLcm) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let tv = push_lcm(&tape, theta, false)?;
    Ok(lcm_graph(zv, &tv)?.value().data().to_vec())
}

/// Zero each strategy entry independently with probability `r_mask`.
pub fn apply_mask(s_hat: &Tensor, r_mask: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = sample_keep_mask(s_hat.rows(), r_mask, rng);
    let mut out = s_hat.clone();
    for (v, k) in out.data_mut().iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
    out
}

/// Linear recombination of the population by the strategy matrix, clipped
/// into the problem bounds.
pub fn mutate(s: &Tensor, x: &Tensor, problem: &Problem) -> Result<Tensor> {
    Ok(problem.clip(&s.matmul(x)?))
}

/// Selection decisions: keep the parent exactly when the trial is strictly
/// worse (ties accept the trial).
pub fn selection_mask(f_x: &[f64], f_u: &[f64]) -> Vec<bool> {
    f_x.iter().zip(f_u).map(|(fx, fu)| fu - fx > 0.0).collect()
}

/// Rowwise 1-to-1 selection between parents and trials.
pub fn select_sm(
    x: &Tensor,
    u: &Tensor,
    f_x: &[f64],
    f_u: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    if x.shape() != u.shape() || f_x.len() != x.rows() || f_u.len() != x.rows() {
        return Err(GpomError::Contract {
            op: "select_sm",
            msg: "population, trials and fitness lengths must agree".into(),
        });
    }
    let keep_x = selection_mask(f_x, f_u);
    let mut out = x.clone();
    let mut fit = f_x.to_vec();
    for (i, keep) in keep_x.iter().enumerate() {
        if !keep {
            out.row_mut(i).copy_from_slice(u.row(i));
            fit[i] = f_u[i];
        }
    }
    Ok((out, fit))
}

/// Hard crossover between parents and mutants from given comparison draws:
/// coordinate k of row i takes the mutant iff `cr[i] >= r[i][k]`.
pub fn crossover_with_r(
    x: &Tensor,
    v: &Tensor,
    cr: &[f64],
    r: &Tensor,
    problem: &Problem,
) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let vv = tape.constant(v.clone())?;
    let rate = tape.constant(Tensor::col_vec(cr))?;
    let u = st_choice(xv, vv, rate, r, 1.0, false)?;
    Ok(problem.clip(&u.value()))
}

/// Hard crossover with freshly drawn comparison uniforms.
pub fn crossover_st(
    x: &Tensor,
    v: &Tensor,
    cr: &[f64],
    problem: &Problem,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut r = Tensor::zeros(x.rows(), x.cols());
    for entry in r.data_mut() {
        *entry = rng.gen::<f64>();
    }
    crossover_with_r(x, v, cr, &r, problem)
}

/// Handles into the recorded step graph.
pub struct StepVars<'t> {
    /// Post-mask strategy matrix (or the constructed fallback rows).
    pub s: Var<'t>,
    /// Clipped mutants.
    pub v: Var<'t>,
    pub fit_v: Var<'t>,
    /// Crossover rates, N x 1.
    pub cr: Var<'t>,
    pub u: Var<'t>,
    pub fit_u: Var<'t>,
    pub x_next: Var<'t>,
    pub fit_next: Var<'t>,
}

/// Evaluate a population node against the problem, recording the fitness as
/// a differentiable per-row function. Consumes one evaluation per row.
fn eval_node<'t>(x: Var<'t>, problem: &Problem) -> Result<Var<'t>> {
    let value = x.value();
    let fitness = problem.eval(&value)?;
    let jac = problem.grad(&value)?;
    x.row_fn(Tensor::col_vec(&fitness), jac)
}

/// Record one full evolution step on the tape. Consumes exactly 2N objective
/// evaluations (mutants and trials).
pub fn build_step<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    fit_x: Var<'t>,
    problem: &Problem,
    theta: &ThetaVars<'t>,
    cfg: &GpomConfig,
    rnd: &StepRandomness,
    soft_crossover: bool,
) -> Result<StepVars<'t>> {
    cfg.validate()?;
    let (n, d) = x.shape();
    let fit_values = fit_x.value();
    if fit_values.shape() != (n, 1) {
        return Err(GpomError::Contract {
            op: "build_step",
            msg: format!("fitness must be {n} x 1, got {:?}", fit_values.shape()),
        });
    }

    // Population descriptors; the rank columns are constants by construction.
    let f_hat_x = fit_x.col_standardize()?;
    let rank_x = tape.constant(Tensor::col_vec(&super::centered_rank(fit_values.data())))?;

    // Strategy matrix.
    let s = if cfg.ablation == AblationMode::NoLmm {
        let draws = rnd.de_draws.as_ref().ok_or(GpomError::Contract {
            op: "build_step",
            msg: "no-lmm ablation requires rand/1 draws".into(),
        })?;
        let mut rows = Tensor::zeros(n, n);
        for (i, draw) in draws.iter().enumerate() {
            rows.row_mut(i)
                .copy_from_slice(&strategy_row(DeStrategy::Rand1, 0.5, n, i, draw));
        }
        tape.constant(rows)?
    } else {
        let h = concat_cols(&[f_hat_x, rank_x])?;
        let s_hat = lmm_graph(h, &theta.lmm, cfg.d_m)?;
        let keep = rnd.keep_mask.as_ref().ok_or(GpomError::Contract {
            op: "build_step",
            msg: "missing mask draws".into(),
        })?;
        if keep.len() != n * n {
            return Err(GpomError::Contract {
                op: "build_step",
                msg: format!("mask has {} entries for n = {n}", keep.len()),
            });
        }
        let mut mask = Tensor::zeros(n, n);
        for (m, k) in mask.data_mut().iter_mut().zip(keep) {
            *m = if *k { 1.0 } else { 0.0 };
        }
        s_hat.mul(tape.constant(mask)?)?
    };

    // Mutants and their fitness.
    let v = s.matmul(x)?.clamp(problem.lower(), problem.upper())?;
    let fit_v = eval_node(v, problem)?;

    // Crossover rates.
    let cr = if cfg.ablation == AblationMode::NoLcm {
        tape.constant(Tensor::filled(n, 1, 0.5))?
    } else {
        let f_hat_v = fit_v.col_standardize()?;
        let rank_v =
            tape.constant(Tensor::col_vec(&super::centered_rank(fit_v.value().data())))?;
        let z = concat_cols(&[f_hat_x, rank_x, f_hat_v, rank_v])?;
        lcm_graph(z, &theta.lcm)?
    };

    // Trials and selection.
    if rnd.crossover_r.shape() != (n, d) {
        return Err(GpomError::Contract {
            op: "build_step",
            msg: format!(
                "crossover draws shaped {:?}, expected ({n}, {d})",
                rnd.crossover_r.shape()
            ),
        });
    }
    let logits = rnd.crossover_logits();
    let u = st_choice(x, v, cr, &logits, cfg.temperature, soft_crossover)?
        .clamp(problem.lower(), problem.upper())?;
    let fit_u = eval_node(u, problem)?;

    let keep_x = selection_mask(fit_values.data(), fit_u.value().data());
    let x_next = row_select(x, u, &keep_x)?;
    let fit_next = row_select(fit_x, fit_u, &keep_x)?;

    Ok(StepVars {
        s,
        v,
        fit_v,
        cr,
        u,
        fit_u,
        x_next,
        fit_next,
    })
}

/// Strategy matrix and crossover rates captured from one step.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub s: Tensor,
    pub cr: Vec<f64>,
}

/// One evolution step from injected randomness (deterministic).
pub fn gpom_step_with(
    pop: &Population,
    problem: &Problem,
    theta: &Theta,
    cfg: &GpomConfig,
    rnd: &StepRandomness,
    soft_crossover: bool,
) -> Result<(Population, StepDetail)> {
    let tape = Tape::new();
    let x = tape.constant(pop.x.clone())?;
    let fit = tape.constant(Tensor::col_vec(&pop.fitness))?;
    let tv = push_theta(&tape, theta, false)?;
    let step = build_step(&tape, x, fit, problem, &tv, cfg, rnd, soft_crossover)?;
    let next = Population::from_parts(
        step.x_next.value(),
        step.fit_next.value().data().to_vec(),
        pop.generation + 1,
    )?;
    let detail = StepDetail {
        s: step.s.value(),
        cr: step.cr.value().data().to_vec(),
    };
    Ok((next, detail))
}

/// One evolution step, drawing randomness from the bundle.
pub fn gpom_step_detailed(
    pop: &Population,
    problem: &Problem,
    theta: &Theta,
    cfg: &GpomConfig,
    rngs: &mut RngBundle,
) -> Result<(Population, StepDetail)> {
    let rnd = sample_step_randomness(cfg, pop.size(), pop.x.cols(), rngs)?;
    gpom_step_with(pop, problem, theta, cfg, &rnd, false)
}

/// One evolution step.
pub fn gpom_step(
    pop: &Population,
    problem: &Problem,
    theta: &Theta,
    cfg: &GpomConfig,
    rngs: &mut RngBundle,
) -> Result<Population> {
    Ok(gpom_step_detailed(pop, problem, theta, cfg, rngs)?.0)
}

/// Per-generation population statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenStat {
    pub best: f64,
    pub mean: f64,
}

/// Strategy matrix and crossover rates recorded at one generation.
#[derive(Debug, Clone)]
pub struct StrategyDump {
    pub generation: u32,
    pub s: Tensor,
    pub cr: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutOptions {
    /// Generations (1-based) whose strategy matrix and rates are captured.
    pub record_strategy_at: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Best/mean fitness after each generation; length equals the generation
    /// count.
    pub trace: Vec<GenStat>,
    pub pop: Population,
    pub dumps: Vec<StrategyDump>,
}

/// Run `t_gens` evolution steps from an evaluated starting population.
pub fn gpom_rollout(
    pop0: Population,
    problem: &Problem,
    theta: &Theta,
    cfg: &GpomConfig,
    t_gens: u32,
    rngs: &mut RngBundle,
    opts: &RolloutOptions,
) -> Result<RolloutResult> {
    if t_gens == 0 {
        return Err(GpomError::InvalidConfig("rollout needs at least one generation".into()));
    }
    let mut pop = pop0;
    let mut trace = Vec::with_capacity(t_gens as usize);
    let mut dumps = Vec::new();
    for t in 1..=t_gens {
        let (next, detail) = gpom_step_detailed(&pop, problem, theta, cfg, rngs)?;
        if opts.record_strategy_at.contains(&t) {
            dumps.push(StrategyDump {
                generation: t,
                s: detail.s,
                cr: detail.cr,
            });
        }
        trace.push(GenStat {
            best: next.best(),
            mean: next.mean_fitness(),
        });
        pop = next;
    }
    Ok(RolloutResult { trace, pop, dumps })
}
