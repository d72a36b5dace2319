//! Finite-difference verification of every differentiable tensor operation
//! and of the full training step on a micro configuration.

mod support;

use gpom::autodiff::{concat_cols, row_select, st_choice, Tape, Var};
use gpom::tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{assert_close, finite_diff_grad, random_tensor, FD_STEP};

const TOL_OP: f64 = 1e-4;
const TOL_E2E: f64 = 1e-3;

/// Gradient-check one input of an op: `forward` maps the perturbed input to
/// the scalar under test, `tape_grad` computes the same scalar on a tape and
/// returns the input's accumulated gradient.
fn check_input(
    label: &str,
    x0: &Tensor,
    forward: impl FnMut(&Tensor) -> f64,
    tape_grad: impl Fn(&Tensor) -> Tensor,
) {
    let fd = finite_diff_grad(x0, FD_STEP, forward);
    let ad = tape_grad(x0);
    assert_close(&ad, &fd, TOL_OP, label);
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a0 = random_tensor(3, 4, &mut rng, false);
    let b0 = random_tensor(4, 2, &mut rng, false);
    let f_a = |a: &Tensor| {
        let tape = Tape::new();
        let av = tape.constant(a.clone()).unwrap();
        let bv = tape.constant(b0.clone()).unwrap();
        av.matmul(bv).unwrap().sum().unwrap().value().scalar()
    };
    check_input("matmul wrt a", &a0, f_a, |a| {
        let tape = Tape::new();
        let av = tape.param(a.clone()).unwrap();
        let bv = tape.constant(b0.clone()).unwrap();
        av.matmul(bv).unwrap().sum().unwrap().backward().unwrap();
        av.grad().unwrap()
    });
    let f_b = |b: &Tensor| {
        let tape = Tape::new();
        let av = tape.constant(a0.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        av.matmul(bv).unwrap().sum().unwrap().value().scalar()
    };
    check_input("matmul wrt b", &b0, f_b, |b| {
        let tape = Tape::new();
        let av = tape.constant(a0.clone()).unwrap();
        let bv = tape.param(b.clone()).unwrap();
        av.matmul(bv).unwrap().sum().unwrap().backward().unwrap();
        bv.grad().unwrap()
    });
}

fn unary_case(label: &str, seed: u64, avoid_zero: bool, apply: fn(Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random_tensor(5, 5, &mut rng, avoid_zero);
    check_input(
        label,
        &x0,
        |x| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            apply(xv).sum().unwrap().value().scalar()
        },
        |x| {
            let tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            apply(xv).sum().unwrap().backward().unwrap();
            xv.grad().unwrap()
        },
    );
}

#[test]
fn unary_gradients() {
    unary_case("tanh", 2, false, |v| v.tanh().unwrap());
    unary_case("sigmoid", 3, false, |v| v.sigmoid().unwrap());
    unary_case("abs away from kink", 4, true, |v| v.abs().unwrap());
    unary_case("neg", 5, false, |v| v.neg().unwrap());
    unary_case("scale", 6, false, |v| v.scale(-1.7).unwrap());
    unary_case("transpose", 7, false, |v| v.transpose().unwrap());
}

fn binary_case(label: &str, seed: u64, shape_b: (usize, usize), kind: u8) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a0 = random_tensor(4, 3, &mut rng, false);
    let mut b0 = random_tensor(shape_b.0, shape_b.1, &mut rng, false);
    if kind == 3 {
        // Keep divisors well away from the guard.
        for v in b0.data_mut() {
            if v.abs() < 0.3 {
                *v = 0.5_f64.copysign(*v + 0.1);
            }
        }
    }
    fn apply_kind<'t>(kind: u8, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        match kind {
            0 => a.add(b).unwrap(),
            1 => a.sub(b).unwrap(),
            2 => a.mul(b).unwrap(),
            _ => a.div(b).unwrap(),
        }
    }
    let fd_a = |a: &Tensor| {
        let tape = Tape::new();
        let av = tape.constant(a.clone()).unwrap();
        let bv = tape.constant(b0.clone()).unwrap();
        apply_kind(kind, av, bv).mean().unwrap().value().scalar()
    };
    check_input(&format!("{label} wrt a"), &a0, fd_a, |a| {
        let tape = Tape::new();
        let av = tape.param(a.clone()).unwrap();
        let bv = tape.constant(b0.clone()).unwrap();
        apply_kind(kind, av, bv).mean().unwrap().backward().unwrap();
        av.grad().unwrap()
    });
    let fd_b = |b: &Tensor| {
        let tape = Tape::new();
        let av = tape.constant(a0.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        apply_kind(kind, av, bv).mean().unwrap().value().scalar()
    };
    check_input(&format!("{label} wrt b"), &b0, fd_b, |b| {
        let tape = Tape::new();
        let av = tape.constant(a0.clone()).unwrap();
        let bv = tape.param(b.clone()).unwrap();
        apply_kind(kind, av, bv).mean().unwrap().backward().unwrap();
        bv.grad().unwrap()
    });
}

#[test]
fn binary_gradients() {
    binary_case("add", 8, (4, 3), 0);
    binary_case("sub", 9, (4, 3), 1);
    binary_case("mul", 10, (4, 3), 2);
    binary_case("div", 11, (4, 3), 3);
    // Scalar second operand broadcast.
    binary_case("add scalar", 12, (1, 1), 0);
    binary_case("mul scalar", 13, (1, 1), 2);
    binary_case("div scalar", 14, (1, 1), 3);
}

#[test]
fn add_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x0 = random_tensor(5, 3, &mut rng, false);
    let b0 = random_tensor(1, 3, &mut rng, false);
    check_input(
        "add_bias wrt x",
        &x0,
        |x| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let bv = tape.constant(b0.clone()).unwrap();
            xv.add_bias(bv).unwrap().sum().unwrap().value().scalar()
        },
        |x| {
            let tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            let bv = tape.constant(b0.clone()).unwrap();
            xv.add_bias(bv).unwrap().sum().unwrap().backward().unwrap();
            xv.grad().unwrap()
        },
    );
    check_input(
        "add_bias wrt bias",
        &b0,
        |b| {
            let tape = Tape::new();
            let xv = tape.constant(x0.clone()).unwrap();
            let bv = tape.constant(b.clone()).unwrap();
            xv.add_bias(bv).unwrap().sum().unwrap().value().scalar()
        },
        |b| {
            let tape = Tape::new();
            let xv = tape.constant(x0.clone()).unwrap();
            let bv = tape.param(b.clone()).unwrap();
            xv.add_bias(bv).unwrap().sum().unwrap().backward().unwrap();
            bv.grad().unwrap()
        },
    );
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x0 = random_tensor(4, 6, &mut rng, false);
    let g0 = random_tensor(1, 6, &mut rng, false);
    let b0 = random_tensor(1, 6, &mut rng, false);
    // Weighted sum output so gradients are non-uniform across columns.
    let w = random_tensor(4, 6, &mut rng, false);
    let run = |x: &Tensor, g: &Tensor, b: &Tensor, param: u8| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let push = |t: &Tensor, is_param: bool| {
            if is_param {
                tape.param(t.clone()).unwrap()
            } else {
                tape.constant(t.clone()).unwrap()
            }
        };
        let xv = push(x, param == 0);
        let gv = push(g, param == 1);
        let bv = push(b, param == 2);
        let wv = tape.constant(w.clone()).unwrap();
        let out = xv
            .layer_norm(gv, bv)
            .unwrap()
            .mul(wv)
            .unwrap()
            .sum()
            .unwrap();
        let value = out.value().scalar();
        if param <= 2 {
            out.backward().unwrap();
        }
        let grad = [xv, gv, bv].get(param as usize).and_then(|v| v.grad());
        (value, grad)
    };
    // The spec's layer_norm gradient tolerance is one notch looser.
    let tol = 1e-5_f64.max(TOL_OP);
    for (param, target, label) in [
        (0u8, x0.clone(), "layer_norm wrt x"),
        (1u8, g0.clone(), "layer_norm wrt gain"),
        (2u8, b0.clone(), "layer_norm wrt bias"),
    ] {
        let fd = finite_diff_grad(&target, FD_STEP, |t| {
            let (x, g, b) = match param {
                0 => (t.clone(), g0.clone(), b0.clone()),
                1 => (x0.clone(), t.clone(), b0.clone()),
                _ => (x0.clone(), g0.clone(), t.clone()),
            };
            run(&x, &g, &b, 9).0
        });
        let (_, ad) = match param {
            0 => run(&target, &g0, &b0, 0),
            1 => run(&x0, &target, &b0, 1),
            _ => run(&x0, &g0, &target, 2),
        };
        assert_close(&ad.unwrap(), &fd, tol, label);
    }
}

#[test]
fn reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x0 = random_tensor(4, 5, &mut rng, false);
    for (label, which) in [("mean", 0u8), ("sum", 1u8), ("rowmax", 2u8)] {
        check_input(
            label,
            &x0,
            |x| {
                let tape = Tape::new();
                let xv = tape.constant(x.clone()).unwrap();
                match which {
                    0 => xv.mean().unwrap().value().scalar(),
                    1 => xv.sum().unwrap().value().scalar(),
                    _ => xv.rowmax().unwrap().sum().unwrap().value().scalar(),
                }
            },
            |x| {
                let tape = Tape::new();
                let xv = tape.param(x.clone()).unwrap();
                let out = match which {
                    0 => xv.mean().unwrap(),
                    1 => xv.sum().unwrap(),
                    _ => xv.rowmax().unwrap().sum().unwrap(),
                };
                out.backward().unwrap();
                xv.grad().unwrap()
            },
        );
    }
}

#[test]
fn col_standardize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x0 = random_tensor(7, 1, &mut rng, false);
    let w = random_tensor(7, 1, &mut rng, false);
    check_input(
        "col_standardize",
        &x0,
        |x| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            xv.col_standardize()
                .unwrap()
                .mul(wv)
                .unwrap()
                .sum()
                .unwrap()
                .value()
                .scalar()
        },
        |x| {
            let tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            xv.col_standardize()
                .unwrap()
                .mul(wv)
                .unwrap()
                .sum()
                .unwrap()
                .backward()
                .unwrap();
            xv.grad().unwrap()
        },
    );
}

#[test]
fn row_fn_gradients() {
    // Per-row quadratic with analytic row gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x0 = random_tensor(5, 3, &mut rng, false);
    let eval = |x: &Tensor| -> (Tensor, Tensor) {
        let mut vals = Tensor::zeros(x.rows(), 1);
        let mut jac = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let mut acc = 0.0;
            for j in 0..x.cols() {
                let v = x.get(i, j);
                acc += v * v + 0.3 * v;
                jac.set(i, j, 2.0 * v + 0.3);
            }
            vals.set(i, 0, acc);
        }
        (vals, jac)
    };
    check_input(
        "row_fn",
        &x0,
        |x| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let (vals, jac) = eval(x);
            xv.row_fn(vals, jac).unwrap().sum().unwrap().value().scalar()
        },
        |x| {
            let tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            let (vals, jac) = eval(x);
            xv.row_fn(vals, jac)
                .unwrap()
                .sum()
                .unwrap()
                .backward()
                .unwrap();
            xv.grad().unwrap()
        },
    );
}

#[test]
fn clamp_and_select_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x0 = random_tensor(4, 3, &mut rng, true);
    let lower = vec![-1.5; 3];
    let upper = vec![1.5; 3];
    // Finite differences only make sense away from the clamp boundary.
    let mut interior = x0.clone();
    for v in interior.data_mut() {
        *v = v.clamp(-1.2, 1.2);
    }
    check_input(
        "clamp interior",
        &interior,
        |x| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            xv.clamp(&lower, &upper).unwrap().sum().unwrap().value().scalar()
        },
        |x| {
            let tape = Tape::new();
            let xv = tape.param(x.clone()).unwrap();
            xv.clamp(&lower, &upper)
                .unwrap()
                .sum()
                .unwrap()
                .backward()
                .unwrap();
            xv.grad().unwrap()
        },
    );

    let b0 = random_tensor(4, 3, &mut rng, false);
    let take = [true, false, true, false];
    check_input(
        "row_select wrt a",
        &x0,
        |x| {
            let tape = Tape::new();
            let av = tape.constant(x.clone()).unwrap();
            let bv = tape.constant(b0.clone()).unwrap();
            row_select(av, bv, &take).unwrap().sum().unwrap().value().scalar()
        },
        |x| {
            let tape = Tape::new();
            let av = tape.param(x.clone()).unwrap();
            let bv = tape.constant(b0.clone()).unwrap();
            row_select(av, bv, &take)
                .unwrap()
                .sum()
                .unwrap()
                .backward()
                .unwrap();
            av.grad().unwrap()
        },
    );
}

#[test]
fn concat_and_detach_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a0 = random_tensor(4, 2, &mut rng, false);
    let b0 = random_tensor(4, 3, &mut rng, false);
    let w = random_tensor(4, 5, &mut rng, false);
    check_input(
        "concat_cols wrt a",
        &a0,
        |a| {
            let tape = Tape::new();
            let av = tape.constant(a.clone()).unwrap();
            let bv = tape.constant(b0.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            concat_cols(&[av, bv])
                .unwrap()
                .mul(wv)
                .unwrap()
                .sum()
                .unwrap()
                .value()
                .scalar()
        },
        |a| {
            let tape = Tape::new();
            let av = tape.param(a.clone()).unwrap();
            let bv = tape.constant(b0.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            concat_cols(&[av, bv])
                .unwrap()
                .mul(wv)
                .unwrap()
                .sum()
                .unwrap()
                .backward()
                .unwrap();
            av.grad().unwrap()
        },
    );
    // Detach: gradient is exactly zero.
    let tape = Tape::new();
    let av = tape.param(a0.clone()).unwrap();
    av.detach()
        .unwrap()
        .mul(av)
        .unwrap()
        .sum()
        .unwrap()
        .backward()
        .unwrap();
    let fd = finite_diff_grad(&a0, FD_STEP, |a| {
        // The function the tape actually computes treats the detached copy
        // as a constant at the base point.
        a.data()
            .iter()
            .zip(a0.data())
            .map(|(x, c)| c * x)
            .sum::<f64>()
    });
    assert_close(&av.grad().unwrap(), &fd, TOL_OP, "detach");
}

#[test]
fn st_choice_soft_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x0 = random_tensor(4, 6, &mut rng, false);
    let v0 = random_tensor(4, 6, &mut rng, false);
    let mut rate0 = random_tensor(4, 1, &mut rng, false);
    for r in rate0.data_mut() {
        *r = (*r + 2.0) / 4.0; // rates in [0, 1]
    }
    let logits = random_tensor(4, 6, &mut rng, false);
    let tau = 0.7;
    let run = |x: &Tensor, v: &Tensor, rate: &Tensor, param: u8| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let push = |t: &Tensor, is_param: bool| {
            if is_param {
                tape.param(t.clone()).unwrap()
            } else {
                tape.constant(t.clone()).unwrap()
            }
        };
        let xv = push(x, param == 0);
        let vv = push(v, param == 1);
        let rv = push(rate, param == 2);
        let out = st_choice(xv, vv, rv, &logits, tau, true)
            .unwrap()
            .sum()
            .unwrap();
        let value = out.value().scalar();
        if param <= 2 {
            out.backward().unwrap();
        }
        (value, [xv, vv, rv].get(param as usize).and_then(|w| w.grad()))
    };
    for (param, target, label) in [
        (0u8, x0.clone(), "st_choice wrt x"),
        (1u8, v0.clone(), "st_choice wrt v"),
        (2u8, rate0.clone(), "st_choice wrt rate"),
    ] {
        let fd = finite_diff_grad(&target, FD_STEP, |t| {
            let (x, v, r) = match param {
                0 => (t.clone(), v0.clone(), rate0.clone()),
                1 => (x0.clone(), t.clone(), rate0.clone()),
                _ => (x0.clone(), v0.clone(), t.clone()),
            };
            run(&x, &v, &r, 9).0
        });
        let ad = match param {
            0 => run(&target, &v0, &rate0, 0).1,
            1 => run(&x0, &target, &rate0, 1).1,
            _ => run(&x0, &v0, &target, 2).1,
        };
        assert_close(&ad.unwrap(), &fd, TOL_OP, label);
    }
}

/// The composite chain of the spec's backward example.
#[test]
fn tanh_matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x0 = random_tensor(3, 4, &mut rng, false);
    let w0 = random_tensor(4, 3, &mut rng, false);
    let fd = finite_diff_grad(&w0, FD_STEP, |w| {
        let tape = Tape::new();
        let xv = tape.constant(x0.clone()).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        xv.matmul(wv)
            .unwrap()
            .tanh()
            .unwrap()
            .mean()
            .unwrap()
            .value()
            .scalar()
    });
    let tape = Tape::new();
    let xv = tape.constant(x0).unwrap();
    let wv = tape.param(w0).unwrap();
    xv.matmul(wv)
        .unwrap()
        .tanh()
        .unwrap()
        .mean()
        .unwrap()
        .backward()
        .unwrap();
    assert_close(&wv.grad().unwrap(), &fd, 1e-5, "tanh(matmul) chain");
}

/// Loss of a full training step on the micro configuration, checked against
/// finite differences in every parameter, with the population advanced three
/// generations the same way training advances it.
#[test]
fn micro_training_step_gradients() {
    support::check_micro_step_gradients(3, TOL_E2E);
}
