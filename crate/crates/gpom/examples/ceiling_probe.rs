//! Scratch probe: drive the step pipeline with a hand-built rank-keyed
//! strategy matrix to measure the best convergence the mask/crossover/select
//! stages allow, independent of learning.

use gpom::bench::{FunctionId, Problem};
use gpom::model::{
    apply_mask, centered_rank, crossover_st, mutate, select_sm, Population,
};
use gpom::rng::RngBundle;
use gpom::Tensor;

fn main() {
    let d = 30;
    let n = 100;
    for (r_mask_on, alpha, kappa) in [
        (1.0, 0.3, 5.0),
        (0.0, 0.3, 5.0),
        (0.0, 0.6, 5.0),
        (0.0, 1.0, 5.0),
    ] {
        let r_mask = 0.5 * r_mask_on;
        let pre_mask_gain = 1.0 + r_mask_on; // compensates keep-prob 0.5 so post-mask rows sum ~1
        let problem = Problem::new(FunctionId::Tf3, d, 7).unwrap();
        let mut rngs = RngBundle::new(11);
        let mut pop = Population::init(&problem, n, &mut rngs.init).unwrap();
        for gen in 0..100 {
            // Top-5 contraction base plus zero-sum difference band.
            let ranks = centered_rank(&pop.fitness);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| ranks[a].partial_cmp(&ranks[b]).unwrap());
            let mut s_hat = Tensor::zeros(n, n);
            let top_k = 5usize;
            let band = 30usize;
            for i in 0..n {
                for &j in order.iter().take(top_k) {
                    s_hat.set(i, j, s_hat.get(i, j) + pre_mask_gain / top_k as f64);
                }
                for (pos, &j) in order.iter().enumerate().skip(top_k).take(2 * band) {
                    let sign = if pos < top_k + band { 1.0 } else { -1.0 };
                    s_hat.set(
                        i,
                        j,
                        s_hat.get(i, j) + sign * pre_mask_gain * alpha / band as f64,
                    );
                }
            }
            let s = apply_mask(&s_hat, r_mask, &mut rngs.mask);
            let v = mutate(&s, &pop.x, &problem).unwrap();
            let fv = problem.eval(&v).unwrap();
                        // Conditional crossover: adopt mutant coordinates only when the
            // mutant's standardized fitness beats the parent's.
            let joint: Vec<f64> = pop
                .fitness
                .iter()
                .map(|v| *v)
                .chain(fv.iter().copied())
                .collect();
            let joint_hat = gpom::model::normalize_fitness(&joint).unwrap();
            let cr: Vec<f64> = (0..n)
                .map(|i| {
                    let gap = joint_hat[i] - joint_hat[n + i];
                    1.0 / (1.0 + (-kappa * gap).exp())
                })
                .collect();
            let u = crossover_st(&pop.x, &v, &cr, &problem, &mut rngs.crossover).unwrap();
            let fu = problem.eval(&u).unwrap();
            let (x2, f2) = select_sm(&pop.x, &u, &pop.fitness, &fu).unwrap();
            pop = Population::from_parts(x2, f2, pop.generation + 1).unwrap();
            if (gen + 1) % 50 == 0 {
                println!("  gen {:3}: best {:.3e}", gen + 1, pop.best());
            }
        }
        let _ = r_mask;
        println!(
            "mask={r_mask_on} alpha={alpha} kappa={kappa}: best {:.3e} mean {:.3e}",
            pop.best(),
            pop.mean_fitness()
        );
    }
}
