//! Catalog-wide gradient verification: every operation passes a central
//! finite-difference check at 10 seeded random points, epsilon 1e-5,
//! max relative error 1e-6.

use rand::Rng;
use vlcl_core::autodiff::{grad_check, OpKind, Tape, Tensor, Var};
use vlcl_core::rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random_tensor(r: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Reduce an arbitrary op output to a scalar through linear probes so the
/// checked gradient is the op's own.
fn scalarize(tape: &mut Tape, y: Var, probe: &Tensor) -> vlcl_core::Result<Var> {
    let y = if tape.value(y).rank() == 2 { tape.mean_pool(y)? } else { y };
    if tape.value(y).shape() == [1] {
        return Ok(y);
    }
    let p = tape.constant(probe.clone());
    tape.dot(y, p)
}

/// Run grad_check for one input slot of an op at 10 random points.
fn check_slot(
    tag: &str,
    point_shape: Vec<usize>,
    build: impl Fn(&mut Tape, Var, &mut rand_chacha::ChaCha12Rng) -> vlcl_core::Result<Var>,
) {
    for trial in 0..10 {
        let mut r = rng::stream(trial, tag);
        let point = random_tensor(&mut r, point_shape.clone());
        let err = grad_check(
            |tape, x| {
                let mut r2 = rng::stream(trial, &format!("{tag}/inner"));
                build(tape, x, &mut r2)
            },
            &point,
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{tag} trial {trial}: error {err}");
    }
}

#[test]
fn matmul_grads() {
    check_slot("matmul/a", vec![2, 3], |tape, x, r| {
        let b = tape.constant(random_tensor(r, vec![3, 2]));
        let y = tape.matmul(x, b)?;
        scalarize(tape, y, &random_tensor(r, vec![2]))
    });
    check_slot("matmul/b", vec![3, 2], |tape, x, r| {
        let a = tape.constant(random_tensor(r, vec![2, 3]));
        let y = tape.matmul(a, x)?;
        scalarize(tape, y, &random_tensor(r, vec![2]))
    });
    check_slot("matmul/matvec", vec![3], |tape, x, r| {
        let a = tape.constant(random_tensor(r, vec![4, 3]));
        let y = tape.matmul(a, x)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("matmul/vecmat", vec![3], |tape, x, r| {
        let b = tape.constant(random_tensor(r, vec![3, 4]));
        let y = tape.matmul(x, b)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
}

#[test]
fn matmul_bt_grads() {
    check_slot("matmul_bt/a", vec![2, 3], |tape, x, r| {
        let b = tape.constant(random_tensor(r, vec![4, 3]));
        let y = tape.matmul_bt(x, b)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("matmul_bt/b", vec![4, 3], |tape, x, r| {
        let a = tape.constant(random_tensor(r, vec![2, 3]));
        let y = tape.matmul_bt(a, x)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("matmul_bt/vec", vec![3], |tape, x, r| {
        let b = tape.constant(random_tensor(r, vec![4, 3]));
        let y = tape.matmul_bt(x, b)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
}

#[test]
fn add_scale_mul_scalar_grads() {
    check_slot("add", vec![2, 3], |tape, x, r| {
        let b = tape.constant(random_tensor(r, vec![2, 3]));
        let y = tape.add(x, b)?;
        scalarize(tape, y, &random_tensor(r, vec![3]))
    });
    check_slot("scale", vec![5], |tape, x, r| {
        let y = tape.scale(x, -1.7)?;
        scalarize(tape, y, &random_tensor(r, vec![5]))
    });
    check_slot("mul_scalar/x", vec![2, 3], |tape, x, r| {
        let s = tape.constant(random_tensor(r, vec![1]));
        let y = tape.mul_scalar(x, s)?;
        scalarize(tape, y, &random_tensor(r, vec![3]))
    });
    check_slot("mul_scalar/s", vec![1], |tape, x, r| {
        let t = tape.constant(random_tensor(r, vec![2, 3]));
        let y = tape.mul_scalar(t, x)?;
        scalarize(tape, y, &random_tensor(r, vec![3]))
    });
}

#[test]
fn concat_rows_grads() {
    check_slot("concat_rows", vec![2, 3], |tape, x, r| {
        let other = tape.constant(random_tensor(r, vec![3, 3]));
        let y = tape.concat_rows(&[x, other])?;
        scalarize(tape, y, &random_tensor(r, vec![3]))
    });
}

#[test]
fn softmax_logsoftmax_grads() {
    check_slot("softmax", vec![2, 4], |tape, x, r| {
        let y = tape.softmax(x)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("log_softmax", vec![2, 4], |tape, x, r| {
        let y = tape.log_softmax(x)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
}

#[test]
fn layer_norm_grads() {
    check_slot("layer_norm/x", vec![2, 4], |tape, x, r| {
        let g = tape.constant(random_tensor(r, vec![4]));
        let b = tape.constant(random_tensor(r, vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("layer_norm/gamma", vec![4], |tape, x, r| {
        let t = tape.constant(random_tensor(r, vec![2, 4]));
        let b = tape.constant(random_tensor(r, vec![4]));
        let y = tape.layer_norm(t, x, b, 1e-5)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("layer_norm/beta", vec![4], |tape, x, r| {
        let t = tape.constant(random_tensor(r, vec![2, 4]));
        let g = tape.constant(random_tensor(r, vec![4]));
        let y = tape.layer_norm(t, g, x, 1e-5)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
}

#[test]
fn lookup_grads_with_repeated_rows() {
    check_slot("lookup", vec![5, 3], |tape, x, r| {
        let y = tape.apply(OpKind::Lookup { indices: vec![1, 3, 1, 0] }, &[x])?;
        scalarize(tape, y, &random_tensor(r, vec![3]))
    });
}

#[test]
fn mean_pool_and_dot_grads() {
    check_slot("mean_pool", vec![3, 4], |tape, x, r| {
        let y = tape.mean_pool(x)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
    check_slot("dot/lhs", vec![5], |tape, x, r| {
        let b = tape.constant(random_tensor(r, vec![5]));
        tape.dot(x, b)
    });
    check_slot("dot/same-var", vec![4], |tape, x, _| tape.dot(x, x));
}

#[test]
fn causal_scores_grads() {
    check_slot("causal_scores/q", vec![3, 4], |tape, x, r| {
        let k = tape.constant(random_tensor(r, vec![3, 4]));
        let y = tape.causal_scores(x, k, 0)?;
        let sm = tape.softmax(y)?;
        scalarize(tape, sm, &random_tensor(r, vec![3]))
    });
    check_slot("causal_scores/k", vec![3, 4], |tape, x, r| {
        let q = tape.constant(random_tensor(r, vec![3, 4]));
        let y = tape.causal_scores(q, x, 0)?;
        let sm = tape.softmax(y)?;
        scalarize(tape, sm, &random_tensor(r, vec![3]))
    });
    check_slot("causal_scores/prefix", vec![2, 4], |tape, x, r| {
        let q = tape.constant(random_tensor(r, vec![3, 4]));
        // x acts as fully visible prefix keys
        let y = tape.causal_scores(q, x, 2)?;
        let sm = tape.softmax(y)?;
        scalarize(tape, sm, &random_tensor(r, vec![2]))
    });
}

#[test]
fn silu_grads() {
    check_slot("silu", vec![2, 4], |tape, x, r| {
        let y = tape.silu(x)?;
        scalarize(tape, y, &random_tensor(r, vec![4]))
    });
}

#[test]
fn cross_entropy_grads() {
    check_slot("cross_entropy", vec![3, 5], |tape, x, _| {
        tape.cross_entropy(x, vec![(0, 2), (1, 4), (2, 0), (1, 1)])
    });
    check_slot("cross_entropy/rank1", vec![5], |tape, x, _| {
        tape.cross_entropy(x, vec![(0, 3)])
    });
}
