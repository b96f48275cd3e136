//! Every differentiable primitive against central finite differences.

use pavad_core::autodiff::check::{finite_difference, relative_error, FD_STEP};
use pavad_core::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces a primitive's output to a scalar with fixed random weights and
/// compares analytic and numeric gradients for every input.
fn check<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let o = build(&mut g, &vs);
        g.value(o).shape().to_vec()
    };
    let weights = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let objective = |g: &mut Graph, vs: &[Var]| {
        let o = build(g, vs);
        let w = g.constant(weights.clone());
        let p = g.mul(o, w).unwrap();
        g.sum(p)
    };

    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = objective(&mut g, &vs);
    g.backward(loss).unwrap();

    for (i, x0) in inputs.iter().enumerate() {
        let analytic = g.grad(vs[i]).unwrap().to_vec();
        let numeric = finite_difference(x0, FD_STEP, |x| {
            let mut h = Graph::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| h.constant(if j == i { x.clone() } else { t.clone() }))
                .collect();
            let l = objective(&mut h, &vs);
            h.item(l)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "{name} input {i}: relative error {err}");
    }
}

fn seeds() -> impl Iterator<Item = ChaCha8Rng> {
    (0..5).map(ChaCha8Rng::seed_from_u64)
}

#[test]
fn matmul_transpose() {
    for mut r in seeds() {
        let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
        check("matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]).unwrap());
        check("transpose", &[a], |g, v| g.transpose(v[0]).unwrap());
    }
}

#[test]
fn add_sub_broadcasts() {
    for mut r in seeds() {
        let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let row = rand_tensor(&mut r, &[4], -1.0, 1.0);
        let s = rand_tensor(&mut r, &[1], -1.0, 1.0);
        for other in [b, row, s] {
            check("add", &[a.clone(), other.clone()], |g, v| g.add(v[0], v[1]).unwrap());
            check("sub", &[a.clone(), other], |g, v| g.sub(v[0], v[1]).unwrap());
        }
    }
}

#[test]
fn elementwise() {
    for mut r in seeds() {
        let a = rand_tensor(&mut r, &[2, 5], -2.0, 2.0);
        let b = rand_tensor(&mut r, &[2, 5], -2.0, 2.0);
        check("mul", &[a.clone(), b], |g, v| g.mul(v[0], v[1]).unwrap());
        check("scale", std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7));
        check("offset", std::slice::from_ref(&a), |g, v| g.offset(v[0], 0.3));
        check("sigmoid", std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]));
        // Kinks sampled away from zero.
        let away = Tensor::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .map(|&x| if x.abs() < 0.1 { x + 0.3 } else { x })
                .collect(),
        )
        .unwrap();
        check("relu", std::slice::from_ref(&away), |g, v| g.relu(v[0]));
        check("hinge", &[away], |g, v| g.hinge(v[0]));
    }
}

#[test]
fn concatenation() {
    for mut r in seeds() {
        let a = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let c = rand_tensor(&mut r, &[2, 2], -1.0, 1.0);
        check("concat_cols", &[a.clone(), b], |g, v| {
            g.concat_cols(v[0], v[1]).unwrap()
        });
        check("concat_rows", &[a, c], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
    }
}

#[test]
fn normalization_and_softmax() {
    for mut r in seeds() {
        let a = rand_tensor(&mut r, &[4, 5], -2.0, 2.0);
        check("row_l2_normalize", std::slice::from_ref(&a), |g, v| {
            g.row_l2_normalize(v[0])
        });
        check("softmax", &[a], |g, v| g.softmax(v[0]).unwrap());
    }
}

#[test]
fn reductions() {
    for mut r in seeds() {
        let a = rand_tensor(&mut r, &[4, 3], -2.0, 2.0);
        check("mean_axis0", std::slice::from_ref(&a), |g, v| {
            g.mean_axis(v[0], 0).unwrap()
        });
        check("mean_axis1", std::slice::from_ref(&a), |g, v| {
            g.mean_axis(v[0], 1).unwrap()
        });
        check("sum", std::slice::from_ref(&a), |g, v| g.sum(v[0]));
        check("squared_l2_norm", std::slice::from_ref(&a), |g, v| {
            g.squared_l2_norm(v[0])
        });
        check("topk_mean", &[a], |g, v| g.topk_mean(v[0], 3).unwrap());
    }
}

#[test]
fn bce_inside_clamp() {
    for mut r in seeds() {
        let p = rand_tensor(&mut r, &[5], 0.05, 0.95);
        let y: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
        check("bce", &[p], |g, v| g.bce(v[0], &y).unwrap());
    }
}

#[test]
fn conv_and_attention() {
    for mut r in seeds() {
        let x = rand_tensor(&mut r, &[6, 16], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[8, 16, 3], -0.3, 0.3);
        let b = rand_tensor(&mut r, &[8], -0.3, 0.3);
        check("conv1d_same", &[x, w, b], |g, v| {
            g.conv1d_same(v[0], v[1], v[2]).unwrap()
        });
        let q = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
        let vv = rand_tensor(&mut r, &[6, 8], -1.0, 1.0);
        check("attention", &[q, k, vv], |g, v| {
            g.attention(v[0], v[1], v[2], 2).unwrap()
        });
    }
}

#[test]
fn grad_reverse_flips_numeric_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x0 = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
    for lambda in [0.0, 0.1, 0.2, 1.5] {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = g.grad_reverse(x, lambda);
        let s = g.sigmoid(y);
        let l = g.sum(s);
        g.backward(l).unwrap();
        let numeric = finite_difference(&x0, FD_STEP, |x| {
            x.data().iter().map(|&v| pavad_core::autodiff::sigmoid(v)).sum()
        });
        let expected: Vec<f64> = numeric.iter().map(|d| -lambda * d).collect();
        let err = relative_error(g.grad(x).unwrap(), &expected);
        assert!(err <= TOL, "lambda {lambda}: {err}");
    }
}
