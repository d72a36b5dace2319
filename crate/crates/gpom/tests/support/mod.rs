//! Finite-difference oracle shared by the gradient and acceptance suites.
//!
//! Central differences over forward evaluations only; the backward rules
//! under test are never consulted here.

use gpom::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar-valued function at `x`.
pub fn finite_diff_grad(
    x: &Tensor,
    h: f64,
    mut scalar_fn: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (scalar_fn(&plus) - scalar_fn(&minus)) / (2.0 * h);
    }
    grad
}

/// Elementwise relative comparison with an absolute floor.
pub fn assert_close(ad: &Tensor, fd: &Tensor, tol: f64, label: &str) {
    assert_eq!(ad.shape(), fd.shape(), "{label}: shape mismatch");
    for i in 0..ad.len() {
        let a = ad.data()[i];
        let f = fd.data()[i];
        let denom = a.abs().max(f.abs()).max(1e-6);
        assert!(
            (a - f).abs() / denom <= tol,
            "{label} entry {i}: autodiff {a} vs finite-diff {f} (rel {})",
            (a - f).abs() / denom
        );
    }
}

/// Uniform tensor in [-2, 2], optionally pushed away from zero so kinked
/// functions are sampled on smooth regions.
pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng, avoid_zero: bool) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        let mut x: f64 = rng.gen_range(-2.0..2.0);
        if avoid_zero && x.abs() < 0.05 {
            x += 0.1_f64.copysign(x + 0.5);
        }
        *v = x;
    }
    t
}

/// Finite-difference check of the loss of one full training step on the
/// micro configuration, in every parameter tensor, at `gens` successive
/// generations. Panics with a description on any mismatch.
pub fn check_micro_step_gradients(gens: u32, tol: f64) {
    use gpom::bench::{FunctionId, Problem};
    use gpom::model::{
        build_step, push_theta, sample_step_randomness, GpomConfig, Population, StepRandomness,
        Theta,
    };
    use gpom::rng::RngBundle;
    use gpom::train::{one_step_loss, EPS_LOSS};

    let model = GpomConfig {
        d_m: 4,
        d_c: 3,
        ..GpomConfig::default()
    };
    let problem = Problem::new(FunctionId::Tf3, 2, 77).unwrap();
    let mut rngs = RngBundle::new(78);
    let mut pop = Population::init(&problem, 8, &mut rngs.init).unwrap();
    let theta = Theta::init_from_seed(&model, 79);

    let loss_of = |theta: &Theta, pop: &Population, rnd: &StepRandomness| -> f64 {
        let tape = gpom::autodiff::Tape::new();
        let x = tape.constant(pop.x.clone()).unwrap();
        let fit = tape.constant(Tensor::col_vec(&pop.fitness)).unwrap();
        let tv = push_theta(&tape, theta, false).unwrap();
        let step = build_step(&tape, x, fit, &problem, &tv, &model, rnd, true).unwrap();
        let mean_prev = pop.mean_fitness();
        step.fit_next
            .mean()
            .unwrap()
            .sub(tape.constant(Tensor::filled(1, 1, mean_prev)).unwrap())
            .unwrap()
            .scale(1.0 / mean_prev.abs().max(EPS_LOSS))
            .unwrap()
            .value()
            .scalar()
    };

    for generation in 1..=gens {
        let rnd = sample_step_randomness(&model, pop.size(), pop.x.cols(), &mut rngs).unwrap();
        let soft = one_step_loss(&theta, &pop, &problem, &model, &rnd, true).unwrap();
        for (k, base) in theta.tensors().iter().enumerate() {
            let fd = finite_diff_grad(base, FD_STEP, |t| {
                let mut perturbed = theta.clone();
                *perturbed.tensors_mut()[k] = t.clone();
                loss_of(&perturbed, &pop, &rnd)
            });
            assert_close(
                &soft.grads[k],
                &fd,
                tol,
                &format!("generation {generation} parameter {k}"),
            );
        }
        let hard = one_step_loss(&theta, &pop, &problem, &model, &rnd, false).unwrap();
        pop = hard.next;
    }
}
