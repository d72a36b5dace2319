//! Classic population baselines: DE/rand/1/bin, (mu,lambda)-ES, and the
//! wider DE mutation-strategy zoo.
//!
//! The zoo implements each strategy by its direct arithmetic form. The model
//! reproduces the same strategies through coefficient rows (see
//! [`strategy_row`]), which gives two independent routes that the tests hold
//! against each other.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bench::Problem;
use crate::error::{GpomError, Result};
use crate::model::Population;
use crate::tensor::Tensor;

/// DE control parameters (population size, dimension and bounds come from the
/// problem and population).
#[derive(Debug, Clone, Copy)]
pub struct DeConfig {
    /// Difference scale factor.
    pub f: f64,
    /// Binomial crossover rate.
    pub cr: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig { f: 0.5, cr: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeStrategy {
    Rand1,
    Rand2,
    Best1,
    CurToRand1,
    CurToBest1,
    CurToPBest1,
}

impl DeStrategy {
    pub const ALL: [DeStrategy; 6] = [
        DeStrategy::Rand1,
        DeStrategy::Rand2,
        DeStrategy::Best1,
        DeStrategy::CurToRand1,
        DeStrategy::CurToBest1,
        DeStrategy::CurToPBest1,
    ];

    /// How many random distinct indices the strategy draws per row.
    pub fn random_indices(&self) -> usize {
        match self {
            DeStrategy::Rand1 | DeStrategy::CurToRand1 => 3,
            DeStrategy::Rand2 => 5,
            DeStrategy::Best1 | DeStrategy::CurToBest1 | DeStrategy::CurToPBest1 => 2,
        }
    }

    /// Smallest population the strategy can run on (random indices are
    /// distinct from each other, from the target and from the anchor).
    pub fn min_population(&self) -> usize {
        self.random_indices() + 2
    }

    fn uses_best(&self) -> bool {
        matches!(self, DeStrategy::Best1 | DeStrategy::CurToBest1)
    }

    fn uses_pbest(&self) -> bool {
        matches!(self, DeStrategy::CurToPBest1)
    }
}

/// Index draw backing one mutant row.
#[derive(Debug, Clone)]
pub struct MutationDraw {
    /// Distinct random population indices.
    pub random: Vec<usize>,
    /// Best (or p-best) index for the strategies that anchor on one.
    pub anchor: Option<usize>,
}

/// Default p-best pool size.
pub fn pbest_pool(n: usize) -> usize {
    ((n as f64 * 0.1) as usize).max(1)
}

fn best_index(fitness: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in fitness.iter().enumerate() {
        if *v < fitness[best] {
            best = i;
        }
    }
    best
}

/// Draw the indices for row `i` of a strategy. Random indices are distinct,
/// exclude `i` and exclude the anchor when one is used.
pub fn sample_draw(
    strategy: DeStrategy,
    n: usize,
    i: usize,
    fitness: &[f64],
    p: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<MutationDraw> {
    if n < strategy.min_population() {
        return Err(GpomError::InvalidConfig(format!(
            "population {n} too small for {strategy:?} (needs {})",
            strategy.min_population()
        )));
    }
    let anchor = if strategy.uses_best() {
        Some(best_index(fitness))
    } else if strategy.uses_pbest() {
        let pool = p.unwrap_or_else(|| pbest_pool(n));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| fitness[a].partial_cmp(&fitness[b]).unwrap().then(a.cmp(&b)));
        Some(order[rng.gen_range(0..pool.min(n))])
    } else {
        None
    };
    let mut random = Vec::with_capacity(strategy.random_indices());
    while random.len() < strategy.random_indices() {
        let r = rng.gen_range(0..n);
        if r == i || Some(r) == anchor || random.contains(&r) {
            continue;
        }
        random.push(r);
    }
    Ok(MutationDraw { random, anchor })
}

/// Mutant row by the strategy's direct arithmetic form.
pub fn mutant_row(
    strategy: DeStrategy,
    f: f64,
    x: &Tensor,
    i: usize,
    draw: &MutationDraw,
) -> Vec<f64> {
    let d = x.cols();
    let r = &draw.random;
    let mut v = vec![0.0; d];
    match strategy {
        DeStrategy::Rand1 => {
            for j in 0..d {
                v[j] = x.get(r[0], j) + f * (x.get(r[1], j) - x.get(r[2], j));
            }
        }
        DeStrategy::Rand2 => {
            for j in 0..d {
                v[j] = x.get(r[0], j)
                    + f * (x.get(r[1], j) - x.get(r[2], j) + x.get(r[3], j) - x.get(r[4], j));
            }
        }
        DeStrategy::Best1 => {
            let b = draw.anchor.unwrap();
            for j in 0..d {
                v[j] = x.get(b, j) + f * (x.get(r[0], j) - x.get(r[1], j));
            }
        }
        DeStrategy::CurToRand1 => {
            for j in 0..d {
                v[j] = (1.0 - f) * x.get(i, j)
                    + f * (x.get(r[0], j) - x.get(r[1], j) + x.get(r[2], j));
            }
        }
        DeStrategy::CurToBest1 | DeStrategy::CurToPBest1 => {
            let b = draw.anchor.unwrap();
            for j in 0..d {
                v[j] = (1.0 - f) * x.get(i, j)
                    + f * x.get(b, j)
                    + f * (x.get(r[0], j) - x.get(r[1], j));
            }
        }
    }
    v
}

/// Coefficient row over the population reproducing the strategy as a linear
/// recombination; coefficients always sum to 1.
pub fn strategy_row(
    strategy: DeStrategy,
    f: f64,
    n: usize,
    i: usize,
    draw: &MutationDraw,
) -> Vec<f64> {
    let r = &draw.random;
    let mut c = vec![0.0; n];
    match strategy {
        DeStrategy::Rand1 => {
            c[r[0]] += 1.0;
            c[r[1]] += f;
            c[r[2]] -= f;
        }
        DeStrategy::Rand2 => {
            c[r[0]] += 1.0;
            c[r[1]] += f;
            c[r[2]] -= f;
            c[r[3]] += f;
            c[r[4]] -= f;
        }
        DeStrategy::Best1 => {
            c[draw.anchor.unwrap()] += 1.0;
            c[r[0]] += f;
            c[r[1]] -= f;
        }
        DeStrategy::CurToRand1 => {
            c[i] += 1.0 - f;
            c[r[0]] += f;
            c[r[1]] -= f;
            c[r[2]] += f;
        }
        DeStrategy::CurToBest1 | DeStrategy::CurToPBest1 => {
            c[i] += 1.0 - f;
            c[draw.anchor.unwrap()] += f;
            c[r[0]] += f;
            c[r[1]] -= f;
        }
    }
    c
}

/// Full mutant matrix sampled with the given rng.
pub fn de_mutation(
    x: &Tensor,
    fitness: &[f64],
    strategy: DeStrategy,
    f: f64,
    p: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = x.rows();
    let mut v = Tensor::zeros(n, x.cols());
    for i in 0..n {
        let draw = sample_draw(strategy, n, i, fitness, p, rng)?;
        v.row_mut(i).copy_from_slice(&mutant_row(strategy, f, x, i, &draw));
    }
    Ok(v)
}

/// One DE/rand/1/bin generation: mutation, binomial crossover with a forced
/// dimension, greedy 1-to-1 selection. Consumes N objective evaluations.
pub fn de_step(
    pop: &Population,
    problem: &Problem,
    cfg: &DeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Population> {
    let n = pop.size();
    let d = pop.x.cols();
    let mut trials = Tensor::zeros(n, d);
    for i in 0..n {
        let draw = sample_draw(DeStrategy::Rand1, n, i, &pop.fitness, None, rng)?;
        let mutant = mutant_row(DeStrategy::Rand1, cfg.f, &pop.x, i, &draw);
        let j_rand = rng.gen_range(0..d);
        let row = trials.row_mut(i);
        for j in 0..d {
            let u: f64 = rng.gen();
            row[j] = if u <= cfg.cr || j == j_rand {
                mutant[j].clamp(problem.lower()[j], problem.upper()[j])
            } else {
                pop.x.get(i, j)
            };
        }
    }
    let trial_fit = problem.eval(&trials)?;
    let mut x_next = pop.x.clone();
    let mut fit_next = pop.fitness.clone();
    for i in 0..n {
        if trial_fit[i] <= pop.fitness[i] {
            x_next.row_mut(i).copy_from_slice(trials.row(i));
            fit_next[i] = trial_fit[i];
        }
    }
    Ok(Population {
        x: x_next,
        fitness: fit_next,
        generation: pop.generation + 1,
    })
}

/// (mu, lambda)-ES parameters.
#[derive(Debug, Clone, Copy)]
pub struct EsConfig {
    /// Parent count after truncation selection.
    pub mu: usize,
    /// Offspring count; must equal the population size.
    pub lambda: usize,
    /// Per-coordinate mutation std as a fraction of the bound width.
    pub sigma_scale: f64,
    /// Fixed std overriding the scaled one when set.
    pub sigma_override: Option<f64>,
}

impl EsConfig {
    /// Build from offspring count and selection fraction.
    pub fn new(lambda: usize, sel_frac: f64) -> Result<Self> {
        let mu = ((lambda as f64 * sel_frac) as usize).max(1);
        if mu > lambda || lambda == 0 {
            return Err(GpomError::InvalidConfig(format!(
                "selection fraction {sel_frac} with lambda {lambda} gives mu {mu}"
            )));
        }
        Ok(EsConfig {
            mu,
            lambda,
            sigma_scale: 0.2,
            sigma_override: None,
        })
    }
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig::new(100, 0.5).unwrap()
    }
}

/// One comma-selection ES generation: truncation-select mu parents, draw
/// lambda Gaussian offspring, discard the parents. Consumes lambda
/// evaluations.
pub fn es_step(
    pop: &Population,
    problem: &Problem,
    cfg: &EsConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Population> {
    let n = pop.size();
    if cfg.mu > n {
        return Err(GpomError::InvalidConfig(format!(
            "mu {} exceeds population size {n}",
            cfg.mu
        )));
    }
    if cfg.lambda != n {
        return Err(GpomError::InvalidConfig(format!(
            "lambda {} must equal population size {n}",
            cfg.lambda
        )));
    }
    let d = pop.x.cols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pop.fitness[a]
            .partial_cmp(&pop.fitness[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let parents = &order[..cfg.mu];
    let sigma: Vec<f64> = (0..d)
        .map(|j| {
            cfg.sigma_override
                .unwrap_or(cfg.sigma_scale * (problem.upper()[j] - problem.lower()[j]))
        })
        .collect();
    let mut offspring = Tensor::zeros(cfg.lambda, d);
    for k in 0..cfg.lambda {
        let parent = parents[rng.gen_range(0..cfg.mu)];
        let row = offspring.row_mut(k);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            row[j] = (pop.x.get(parent, j) + sigma[j] * z)
                .clamp(problem.lower()[j], problem.upper()[j]);
        }
    }
    let fitness = problem.eval(&offspring)?;
    Ok(Population {
        x: offspring,
        fitness,
        generation: pop.generation + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::FunctionId;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_pop(problem: &Problem, n: usize, seed: u64) -> Population {
        let mut r = rng(seed);
        Population::init(problem, n, &mut r).unwrap()
    }

    #[test]
    fn rand1_collapses_when_difference_vanishes() {
        let x = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![3.0, 4.0],
            vec![9.0, -1.0],
        ])
        .unwrap();
        let draw = MutationDraw {
            random: vec![3, 1, 2],
            anchor: None,
        };
        let v = mutant_row(DeStrategy::Rand1, 0.5, &x, 0, &draw);
        assert_eq!(v, vec![9.0, -1.0]);
    }

    #[test]
    fn best1_with_zero_factor_returns_best() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0], vec![9.0, 9.0], vec![2.0, 0.0]])
            .unwrap();
        let fitness = [4.0, 0.5, 7.0, 3.0];
        let mut r = rng(1);
        let draw = sample_draw(DeStrategy::Best1, 4, 0, &fitness, None, &mut r).unwrap();
        assert_eq!(draw.anchor, Some(1));
        let v = mutant_row(DeStrategy::Best1, 0.0, &x, 0, &draw);
        assert_eq!(v, vec![5.0, 5.0]);
    }

    #[test]
    fn zoo_rows_match_coefficient_rows() {
        let n = 12;
        let d = 5;
        let problem = Problem::new(FunctionId::Tf3, d, 3).unwrap();
        let pop = random_pop(&problem, n, 17);
        let mut r = rng(5);
        for strategy in DeStrategy::ALL {
            for i in 0..n {
                let draw = sample_draw(strategy, n, i, &pop.fitness, None, &mut r).unwrap();
                let direct = mutant_row(strategy, 0.5, &pop.x, i, &draw);
                let coeffs = strategy_row(strategy, 0.5, n, i, &draw);
                assert!((coeffs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..d {
                    let lin: f64 = (0..n).map(|k| coeffs[k] * pop.x.get(k, j)).sum();
                    assert!(
                        (lin - direct[j]).abs() <= 1e-12 * direct[j].abs().max(1.0),
                        "{strategy:?} row {i} col {j}: {lin} vs {}",
                        direct[j]
                    );
                }
            }
        }
    }

    #[test]
    fn population_too_small_is_rejected() {
        let fitness = [1.0, 2.0, 3.0];
        let mut r = rng(2);
        assert!(sample_draw(DeStrategy::Rand1, 3, 0, &fitness, None, &mut r).is_err());
        assert!(sample_draw(DeStrategy::Rand2, 6, 0, &fitness, None, &mut r).is_err());
    }

    #[test]
    fn de_step_never_worsens_any_row() {
        let problem = Problem::new(FunctionId::Tf6, 6, 4).unwrap();
        let mut pop = random_pop(&problem, 20, 9);
        let mut r = rng(11);
        for _ in 0..30 {
            let next = de_step(&pop, &problem, &DeConfig::default(), &mut r).unwrap();
            for i in 0..pop.size() {
                assert!(next.fitness[i] <= pop.fitness[i]);
            }
            pop = next;
        }
    }

    #[test]
    fn de_full_crossover_uses_mutant_everywhere() {
        let problem = Problem::new(FunctionId::Tf3, 4, 6).unwrap();
        let pop = random_pop(&problem, 10, 21);
        let cfg = DeConfig { f: 0.5, cr: 1.0 };
        // With CR = 1 every trial coordinate comes from the (clipped) mutant,
        // so replaying the same rng must reproduce the trial matrix.
        let mut r1 = rng(33);
        let next = de_step(&pop, &problem, &cfg, &mut r1).unwrap();
        let mut r2 = rng(33);
        let mut expected = Tensor::zeros(10, 4);
        for i in 0..10 {
            let draw = sample_draw(DeStrategy::Rand1, 10, i, &pop.fitness, None, &mut r2).unwrap();
            let mutant = mutant_row(DeStrategy::Rand1, cfg.f, &pop.x, i, &draw);
            let _j_rand = r2.gen_range(0..4usize);
            let row = expected.row_mut(i);
            for j in 0..4 {
                let _: f64 = r2.gen();
                row[j] = mutant[j].clamp(problem.lower()[j], problem.upper()[j]);
            }
        }
        let trial_fit = problem.eval(&expected).unwrap();
        for i in 0..10 {
            if trial_fit[i] <= pop.fitness[i] {
                assert_eq!(next.x.row(i), expected.row(i));
            } else {
                assert_eq!(next.x.row(i), pop.x.row(i));
            }
        }
    }

    #[test]
    fn de_improves_sphere_by_orders_of_magnitude() {
        // Regression guard: 200 generations on the shifted sphere improve the
        // best fitness by at least two orders of magnitude (median of 5 seeds).
        let mut ratios = Vec::new();
        for seed in 0..5u64 {
            let problem = Problem::new(FunctionId::Tf3, 10, 50 + seed).unwrap();
            let mut pop = random_pop(&problem, 50, 100 + seed);
            let start = pop.best();
            let mut r = rng(200 + seed);
            for _ in 0..200 {
                pop = de_step(&pop, &problem, &DeConfig::default(), &mut r).unwrap();
            }
            ratios.push(start / pop.best());
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            ratios[2] >= 100.0,
            "median improvement ratio {} below 1e2",
            ratios[2]
        );
    }

    #[test]
    fn es_zero_sigma_duplicates_parents() {
        let problem = Problem::new(FunctionId::Tf3, 3, 7).unwrap();
        let pop = random_pop(&problem, 8, 13);
        let cfg = EsConfig {
            sigma_override: Some(0.0),
            ..EsConfig::new(8, 0.5).unwrap()
        };
        let mut r = rng(3);
        let next = es_step(&pop, &problem, &cfg, &mut r).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| pop.fitness[a].partial_cmp(&pop.fitness[b]).unwrap());
        let parents: Vec<&[f64]> = order[..4].iter().map(|&i| pop.x.row(i)).collect();
        for k in 0..8 {
            assert!(parents.contains(&next.x.row(k)));
        }
    }

    #[test]
    fn es_selection_fraction_half() {
        let cfg = EsConfig::new(100, 0.5).unwrap();
        assert_eq!(cfg.mu, 50);
        assert_eq!(cfg.lambda, 100);
    }

    #[test]
    fn es_mu_larger_than_population_is_error() {
        let problem = Problem::new(FunctionId::Tf3, 2, 1).unwrap();
        let pop = random_pop(&problem, 4, 2);
        let cfg = EsConfig {
            mu: 9,
            lambda: 4,
            sigma_scale: 0.2,
            sigma_override: None,
        };
        assert!(es_step(&pop, &problem, &cfg, &mut rng(1)).is_err());
    }

    #[test]
    fn es_perturbation_magnitude_matches_chi_mean() {
        // Mean offspring displacement should be close to sigma * sqrt(d).
        let d = 50;
        let problem = Problem::new(FunctionId::Tf7, d, 5).unwrap();
        let n = 100;
        let pop = {
            // Center the population so clipping never bites.
            let x = Tensor::zeros(n, d);
            let fitness = problem.eval(&x).unwrap();
            Population {
                x,
                fitness,
                generation: 0,
            }
        };
        let sigma = 1.0;
        let cfg = EsConfig {
            sigma_override: Some(sigma),
            ..EsConfig::new(n, 0.5).unwrap()
        };
        let mut r = rng(44);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..100 {
            let next = es_step(&pop, &problem, &cfg, &mut r).unwrap();
            for k in 0..n {
                let norm: f64 = next.x.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
                total += norm;
                count += 1;
            }
        }
        let mean = total / count as f64;
        let expected = sigma * (d as f64).sqrt();
        assert!(
            (mean - expected).abs() / expected < 0.05,
            "mean displacement {mean} vs {expected}"
        );
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let problem = Problem::new(FunctionId::Tf8, 5, 3).unwrap();
        let run = |seed: u64| {
            let mut pop = random_pop(&problem, 12, seed);
            let mut r = rng(seed);
            for _ in 0..10 {
                pop = de_step(&pop, &problem, &DeConfig::default(), &mut r).unwrap();
            }
            pop.fitness
        };
        let a = run(5);
        let b = run(5);
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}
