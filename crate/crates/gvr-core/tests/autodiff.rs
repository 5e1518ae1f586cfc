//! Gradient correctness: every tape op is checked against central finite
//! differences, and gradient-of-gradient paths (the gradient-penalty
//! pattern) are checked the same way.

use gvr_core::rng::{seeded_stream, standard_normal};
use gvr_core::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};

type ScalarFn = dyn Fn(&mut Tape, &[Var]) -> Var;

fn eval_scalar(inputs: &[ArrayD<f32>], f: &ScalarFn) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf_grad(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.scalar_value(out) as f64
}

/// Compare analytic gradients of a scalar function against central finite
/// differences, elementwise, with combined absolute/relative tolerance.
fn fd_check(name: &str, inputs: &[ArrayD<f32>], tol: f64, f: &ScalarFn) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf_grad(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.grad(out, &vars);

    let h = 5e-3f32;
    for (i, x) in inputs.iter().enumerate() {
        let analytic: ArrayD<f32> = match grads[i] {
            Some(g) => tape.value(g).clone(),
            None => ArrayD::zeros(x.raw_dim()),
        };
        let indices: Vec<_> = x.indexed_iter().map(|(idx, _)| idx).collect();
        for idx in indices {
            let mut plus = inputs.to_vec();
            plus[i][idx.clone()] += h;
            let mut minus = inputs.to_vec();
            minus[i][idx.clone()] -= h;
            let fd = (eval_scalar(&plus, f) - eval_scalar(&minus, f)) / (2.0 * h as f64);
            let got = analytic[idx.clone()] as f64;
            assert!(
                (got - fd).abs() <= tol * (1.0 + fd.abs()),
                "{name}: input {i} element {idx:?}: analytic {got}, finite-difference {fd}"
            );
        }
    }
}

/// Deterministic test tensor with entries kept away from the
/// non-differentiable points of abs/selu/step (|x| >= 0.1).
fn tensor(seed: u64, shape: &[usize]) -> ArrayD<f32> {
    let mut rng = seeded_stream(900 + seed, 0);
    standard_normal(&mut rng, shape).mapv(|v| {
        let v = v * 0.7;
        if v.abs() < 0.1 {
            v + 0.25
        } else {
            v
        }
    })
}

/// Strictly positive test tensor (for ln, sqrt, div denominators).
fn positive_tensor(seed: u64, shape: &[usize]) -> ArrayD<f32> {
    tensor(seed, shape).mapv(|v| v.abs() + 0.5)
}

/// Reduce an arbitrary output to a scalar through fixed random weights so
/// every adjoint element is exercised with a distinct value.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = seeded_stream(7700 + seed, 0);
    let w = tape.leaf(standard_normal(&mut rng, &shape));
    let p = tape.mul(y, w);
    tape.sum_all(p)
}

#[test]
fn fd_elementwise_binary() {
    let a = tensor(1, &[2, 3]);
    let b = positive_tensor(2, &[2, 3]);
    fd_check("add", &[a.clone(), b.clone()], 1e-3, &|t, v| {
        let y = t.add(v[0], v[1]);
        weighted_sum(t, y, 1)
    });
    fd_check("sub", &[a.clone(), b.clone()], 1e-3, &|t, v| {
        let y = t.sub(v[0], v[1]);
        weighted_sum(t, y, 2)
    });
    fd_check("mul", &[a.clone(), b.clone()], 1e-3, &|t, v| {
        let y = t.mul(v[0], v[1]);
        weighted_sum(t, y, 3)
    });
    fd_check("div", &[a, b], 1e-3, &|t, v| {
        let y = t.div(v[0], v[1]);
        weighted_sum(t, y, 4)
    });
}

#[test]
fn fd_elementwise_unary() {
    let x = tensor(3, &[3, 2]);
    let xp = positive_tensor(4, &[3, 2]);
    fd_check("neg", &[x.clone()], 1e-3, &|t, v| {
        let y = t.neg(v[0]);
        weighted_sum(t, y, 5)
    });
    fd_check("add_scalar", &[x.clone()], 1e-3, &|t, v| {
        let y = t.add_scalar(v[0], 0.37);
        weighted_sum(t, y, 6)
    });
    fd_check("mul_scalar", &[x.clone()], 1e-3, &|t, v| {
        let y = t.mul_scalar(v[0], -1.91);
        weighted_sum(t, y, 7)
    });
    fd_check("exp", &[x.clone()], 1e-3, &|t, v| {
        let y = t.exp(v[0]);
        weighted_sum(t, y, 8)
    });
    fd_check("ln", &[xp.clone()], 1e-3, &|t, v| {
        let y = t.ln(v[0]);
        weighted_sum(t, y, 9)
    });
    fd_check("sqrt", &[xp], 1e-3, &|t, v| {
        let y = t.sqrt(v[0]);
        weighted_sum(t, y, 10)
    });
    fd_check("tanh", &[x.clone()], 1e-3, &|t, v| {
        let y = t.tanh(v[0]);
        weighted_sum(t, y, 11)
    });
    fd_check("abs", &[x.clone()], 1e-3, &|t, v| {
        let y = t.abs(v[0]);
        weighted_sum(t, y, 12)
    });
    fd_check("square", &[x.clone()], 1e-3, &|t, v| {
        let y = t.square(v[0]);
        weighted_sum(t, y, 13)
    });
    fd_check("selu", &[x], 1e-3, &|t, v| {
        let y = t.selu(v[0]);
        weighted_sum(t, y, 14)
    });
}

#[test]
fn fd_shape_ops() {
    let x = tensor(5, &[2, 3]);
    fd_check("broadcast", &[tensor(6, &[2, 1])], 1e-3, &|t, v| {
        let y = t.broadcast(v[0], &[2, 4]);
        weighted_sum(t, y, 15)
    });
    fd_check("sum_to", &[tensor(7, &[3, 4])], 1e-3, &|t, v| {
        let y = t.sum_to(v[0], &[3, 1]);
        weighted_sum(t, y, 16)
    });
    fd_check("sum_all", &[x.clone()], 1e-3, &|t, v| t.sum_all(v[0]));
    fd_check("mean_all", &[x.clone()], 1e-3, &|t, v| t.mean_all(v[0]));
    fd_check("reshape", &[x.clone()], 1e-3, &|t, v| {
        let y = t.reshape(v[0], &[3, 2]);
        weighted_sum(t, y, 17)
    });
    fd_check("transpose2", &[x], 1e-3, &|t, v| {
        let y = t.transpose2(v[0]);
        weighted_sum(t, y, 18)
    });
}

#[test]
fn fd_matmul_and_linear() {
    let a = tensor(8, &[2, 3]);
    let b = tensor(9, &[3, 4]);
    fd_check("matmul", &[a.clone(), b.clone()], 1e-3, &|t, v| {
        let y = t.matmul(v[0], v[1]);
        weighted_sum(t, y, 19)
    });
    let bias = tensor(10, &[1, 4]);
    fd_check("linear", &[a, b, bias], 1e-3, &|t, v| {
        let y = t.linear(v[0], v[1], v[2]);
        weighted_sum(t, y, 20)
    });
}

#[test]
fn fd_softmax_losses() {
    let logits = tensor(11, &[3, 5]);
    fd_check("softmax", &[logits.clone()], 1e-3, &|t, v| {
        let y = t.softmax(v[0]);
        weighted_sum(t, y, 21)
    });
    fd_check("log_softmax", &[logits], 1e-3, &|t, v| {
        let y = t.log_softmax(v[0]);
        weighted_sum(t, y, 22)
    });
    let a = tensor(12, &[2, 4]);
    let b = tensor(13, &[2, 4]);
    fd_check("mse", &[a.clone(), b], 1e-3, &|t, v| t.mse(v[0], v[1]));
    fd_check("mean_l1", &[a], 1e-3, &|t, v| t.mean_l1(v[0]));
}

#[test]
fn fd_conv_ops() {
    let x = tensor(14, &[2, 2, 5, 5]);
    let k = tensor(15, &[3, 2, 3, 3]);
    fd_check("conv2d", &[x.clone(), k.clone()], 1e-3, &|t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1);
        weighted_sum(t, y, 23)
    });
    let y0 = tensor(16, &[2, 3, 3, 3]);
    fd_check("conv2d_transpose", &[y0, k], 1e-3, &|t, v| {
        let y = t.conv2d_transpose(v[0], v[1], 2, 1, (5, 5));
        weighted_sum(t, y, 24)
    });
}

#[test]
fn softmax_rows_are_distributions() {
    let logits = tensor(17, &[4, 7]);
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let s = tape.softmax(l);
    let ls = tape.log_softmax(l);
    let sv = tape.value(s).clone();
    let lsv = tape.value(ls).clone();
    for row in sv.rows() {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5, "softmax row sums to {sum}");
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    for (p, lp) in sv.iter().zip(lsv.iter()) {
        assert!((p.ln() - lp).abs() < 1e-5, "log_softmax disagrees with ln(softmax)");
    }
}

#[test]
fn selu_matches_closed_form() {
    let lambda = 1.050_701_f64;
    let alpha = 1.673_263_2_f64;
    let xs: Vec<f32> = vec![-3.0, -1.0, -0.25, 0.0, 0.25, 1.0, 3.0, 40.0];
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[8]), xs.clone()).unwrap());
    let y = tape.selu(x);
    let yv = tape.value(y).clone();
    for (x0, got) in xs.iter().zip(yv.iter()) {
        let x0 = *x0 as f64;
        let want = if x0 > 0.0 {
            lambda * x0
        } else {
            lambda * alpha * (x0.exp() - 1.0)
        };
        assert!(
            ((*got as f64) - want).abs() < 1e-5,
            "selu({x0}) = {got}, want {want}"
        );
    }
    assert!(yv.iter().all(|v| v.is_finite()), "selu overflowed");
}

#[test]
fn second_order_cubic_is_analytic() {
    // y = sum(x^3): dy/dx = 3x^2, and d(sum(dy/dx))/dx = 6x.
    let x0 = tensor(18, &[3]);
    let mut tape = Tape::new();
    let x = tape.leaf_grad(x0.clone());
    let x2 = tape.mul(x, x);
    let x3 = tape.mul(x2, x);
    let y = tape.sum_all(x3);
    let g = tape.grad(y, &[x])[0].expect("gradient exists");
    for (gv, xv) in tape.value(g).iter().zip(x0.iter()) {
        assert!((gv - 3.0 * xv * xv).abs() < 1e-4);
    }
    let gs = tape.sum_all(g);
    let g2 = tape.grad(gs, &[x])[0].expect("second gradient exists");
    for (gv, xv) in tape.value(g2).iter().zip(x0.iter()) {
        assert!((gv - 6.0 * xv).abs() < 1e-4, "second derivative {gv} vs {}", 6.0 * xv);
    }
}

#[test]
fn fd_second_order_tanh_chain() {
    // phi(x) = sum((d/dx sum(tanh(x) * c))^2); checked against finite
    // differences of the full inner-gradient computation.
    let x0 = tensor(19, &[2, 3]);
    fd_check("grad-of-grad tanh", &[x0], 1e-2, &|t, v| {
        let y = t.tanh(v[0]);
        let s = weighted_sum(t, y, 25);
        let g = t.grad(s, &[v[0]])[0].expect("inner gradient");
        let g2 = t.square(g);
        t.sum_all(g2)
    });
}

#[test]
fn fd_second_order_conv_gradient_penalty_pattern() {
    // The critic-penalty shape: differentiate the squared norm of an input
    // gradient that itself flows through conv, selu and matmul.
    let x0 = tensor(20, &[1, 1, 4, 4]);
    let k0 = tensor(21, &[2, 1, 3, 3]);
    let w0 = tensor(22, &[2 * 4 * 4, 1]);
    fd_check("grad-of-grad conv critic", &[x0, k0, w0], 1e-2, &|t, v| {
        let h = t.conv2d(v[0], v[1], 1, 1);
        let a = t.selu(h);
        let flat = t.reshape(a, &[1, 2 * 4 * 4]);
        let d = t.matmul(flat, v[2]);
        let s = t.sum_all(d);
        let g = t.grad(s, &[v[0]])[0].expect("inner gradient");
        let g2 = t.square(g);
        let n2 = t.sum_all(g2);
        let eps = t.scalar(1e-8);
        let n2e = t.add(n2, eps);
        let n = t.sqrt(n2e);
        let nm1 = t.add_scalar(n, -1.0);
        t.square(nm1)
    });
}

#[test]
fn gradient_penalty_value_is_analytic_for_linear_critic() {
    // For D(x) = sum(x .* w), the input gradient is w everywhere, so
    // lambda * (||grad|| - 1)^2 = lambda * (||w|| - 1)^2 exactly.
    for k in [4usize, 3, 7] {
        let lambda = 10.0f64;
        let w0 = ArrayD::from_elem(IxDyn(&[k, 1]), 1.0f32);
        let x0 = tensor(23, &[1, k]);
        let mut tape = Tape::new();
        let x = tape.leaf_grad(x0);
        let w = tape.leaf(w0);
        let d = tape.matmul(x, w);
        let s = tape.sum_all(d);
        let g = tape.grad(s, &[x])[0].unwrap();
        let g2 = tape.square(g);
        let n2 = tape.sum_all(g2);
        let n = tape.sqrt(n2);
        let nm1 = tape.add_scalar(n, -1.0);
        let gp = tape.square(nm1);
        let gp = tape.mul_scalar(gp, lambda as f32);
        let want = lambda * ((k as f64).sqrt() - 1.0).powi(2);
        let got = tape.scalar_value(gp) as f64;
        assert!(
            (got - want).abs() < 1e-5,
            "penalty for k={k}: got {got}, want {want}"
        );
    }
}

#[test]
fn grad_is_none_without_a_path() {
    let mut tape = Tape::new();
    let a = tape.leaf_grad(tensor(24, &[2]));
    let b = tape.leaf_grad(tensor(25, &[2]));
    let y = tape.sum_all(a);
    let grads = tape.grad(y, &[a, b]);
    assert!(grads[0].is_some());
    assert!(grads[1].is_none(), "no path from b to y");
}

#[test]
fn grad_accumulates_reused_operands() {
    // y = sum(x * x) must differentiate to 2x even though x feeds both slots.
    let x0 = tensor(26, &[4]);
    let mut tape = Tape::new();
    let x = tape.leaf_grad(x0.clone());
    let y0 = tape.mul(x, x);
    let y = tape.sum_all(y0);
    let g = tape.grad(y, &[x])[0].unwrap();
    for (gv, xv) in tape.value(g).iter().zip(x0.iter()) {
        assert!((gv - 2.0 * xv).abs() < 1e-5);
    }
}

#[test]
fn constants_block_gradient_flow() {
    let mut tape = Tape::new();
    let x = tape.leaf_grad(tensor(27, &[3]));
    let c = tape.leaf(tensor(28, &[3]));
    let m = tape.step_mask(x);
    let y0 = tape.mul(c, m);
    let y1 = tape.mul(y0, x);
    let y = tape.sum_all(y1);
    let g = tape.grad(y, &[x])[0].unwrap();
    // step_mask is constant wrt x, so dy/dx = c * mask exactly.
    let mv = tape.value(m).clone();
    let cv = tape.value(c).clone();
    for ((gv, m0), c0) in tape.value(g).iter().zip(mv.iter()).zip(cv.iter()) {
        assert!((gv - c0 * m0).abs() < 1e-6);
    }
}
