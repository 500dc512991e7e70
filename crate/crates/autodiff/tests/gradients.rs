use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rnpe_autodiff::{
    evaluate_with_gradient, finite_difference_check, gradient_discrepancy, Result, Tape, Tensor,
    Var,
};

const LN_2PI: f64 = 1.8378770664093453;

#[test]
fn square_at_three() {
    let f = |t: &mut Tape, x: Var| {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    };
    let (value, grad) = evaluate_with_gradient(f, &Tensor::scalar(3.0)).unwrap();
    assert_eq!(value, 9.0);
    assert_eq!(grad.data(), &[6.0]);
}

#[test]
fn log_sum_exp_symmetry() {
    let f = |t: &mut Tape, x: Var| {
        let m = t.reshape(x, vec![1, 2])?;
        let lse = t.log_sum_exp_rows(m)?;
        t.sum(lse)
    };
    let (value, grad) = evaluate_with_gradient(f, &Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert!((value - 2.0f64.ln()).abs() < 1e-12);
    assert!((grad.data()[0] - 0.5).abs() < 1e-12);
    assert!((grad.data()[1] - 0.5).abs() < 1e-12);
}

#[test]
fn standard_normal_log_density_gradient() {
    // log N(x) = -x^2/2 - log(2 pi)/2
    let f = |t: &mut Tape, x: Var| {
        let sq = t.mul(x, x)?;
        let term = t.axpb(sq, -0.5, -0.5 * LN_2PI)?;
        t.sum(term)
    };
    let at = Tensor::scalar(1.2);
    let (_, grad) = evaluate_with_gradient(f, &at).unwrap();
    assert!((grad.data()[0] + 1.2).abs() < 1e-12);
    let err = finite_difference_check(f, &at, 1e-5).unwrap();
    assert!(err < 1e-6, "finite difference mismatch: {err}");
}

#[test]
fn linear_program_exact() {
    let f = |t: &mut Tape, x: Var| {
        let scaled = t.axpb(x, 3.5, 1.0)?;
        t.sum(scaled)
    };
    let at = Tensor::vector(vec![0.3, -2.0, 7.0]);
    let err = finite_difference_check(f, &at, 1e-4).unwrap();
    assert!(err < 1e-9, "linear gradient should be exact: {err}");
}

#[test]
fn planted_bug_detected() {
    // Claiming the gradient of x^2 is 4x (off by 2x) must yield error ~1.
    let f = |t: &mut Tape, x: Var| {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    };
    let at = Tensor::scalar(3.0);
    let wrong = Tensor::scalar(12.0);
    let err = gradient_discrepancy(f, &at, 1e-5, &wrong).unwrap();
    assert!((err - 0.5).abs() < 1e-6 || (err - 1.0).abs() < 1e-6);
    // With the convention |claimed - numeric| / |claimed|, off-by-2x gives 0.5
    // exactly when claimed is the doubled one; claiming half gives ~1.0.
    let half = Tensor::scalar(3.0);
    let err = gradient_discrepancy(f, &at, 1e-5, &half).unwrap();
    assert!((err - 1.0).abs() < 1e-6, "expected ~1.0, got {err}");
}

/// Exercises one primitive inside a scalar program built from otherwise
/// well-conditioned pieces, at several random points.
fn check_primitive<F>(name: &str, dims: usize, build: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Copy,
{
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed);
    for trial in 0..10 {
        let at = Tensor::vector((0..dims).map(|_| rng.random_range(-1.5..1.5)).collect());
        let err = finite_difference_check(build, &at, 1e-5)
            .unwrap_or_else(|e| panic!("{name} trial {trial} failed: {e}"));
        assert!(err < 1e-4, "{name} trial {trial}: rel error {err}");
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    check_primitive("neg", 4, |t, x| {
        let y = t.neg(x)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("exp", 4, |t, x| {
        let y = t.exp(x)?;
        t.sum(y)
    });
    check_primitive("log", 4, |t, x| {
        let shifted = t.axpb(x, 0.25, 2.0)?;
        let y = t.log(shifted)?;
        t.sum(y)
    });
    check_primitive("tanh", 4, |t, x| {
        let y = t.tanh(x)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("sigmoid", 4, |t, x| {
        let y = t.sigmoid(x)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("softplus", 4, |t, x| {
        let y = t.softplus(x)?;
        t.sum(y)
    });
    check_primitive("sat_tanh", 4, |t, x| {
        let wide = t.axpb(x, 4.0, 0.0)?;
        let y = t.sat_tanh(wide, 3.0)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("sat_tanh_log_deriv", 4, |t, x| {
        let y = t.sat_tanh_log_deriv(x, 3.0)?;
        t.sum(y)
    });
    check_primitive("add", 4, |t, x| {
        let y = t.exp(x)?;
        let s = t.add(x, y)?;
        let sq = t.mul(s, s)?;
        t.sum(sq)
    });
    check_primitive("sub_div", 4, |t, x| {
        let e = t.exp(x)?;
        let d = t.sub(x, e)?;
        let q = t.div(d, e)?;
        let sq = t.mul(q, q)?;
        t.sum(sq)
    });
    check_primitive("matmul", 6, |t, x| {
        let a = t.reshape(x, vec![2, 3])?;
        let w = t.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap())?;
        let y = t.matmul(a, w)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("matmul_both_sides", 8, |t, x| {
        let a = t.slice(x, 0, 4)?;
        let b = t.slice(x, 4, 4)?;
        let am = t.reshape(a, vec![2, 2])?;
        let bm = t.reshape(b, vec![2, 2])?;
        let y = t.matmul(am, bm)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("sum_rows", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let rows = t.sum_rows(m)?;
        let sq = t.mul(rows, rows)?;
        t.sum(sq)
    });
    check_primitive("log_sum_exp_rows", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let lse = t.log_sum_exp_rows(m)?;
        let sq = t.mul(lse, lse)?;
        t.sum(sq)
    });
    check_primitive("broadcast_row", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let b = t.constant(Tensor::vector(vec![0.5, -0.25, 1.0]))?;
        let y = t.mul(m, b)?;
        t.sum(y)
    });
    check_primitive("broadcast_col", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let rows = t.sum_rows(m)?;
        let col = t.reshape(rows, vec![2, 1])?;
        let y = t.sub(m, col)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    });
    check_primitive("concat_select", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let picked = t.select_cols(m, &[2, 0])?;
        let joined = t.concat_cols(&[m, picked])?;
        let sq = t.mul(joined, joined)?;
        t.sum(sq)
    });
    check_primitive("gather_per_row", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let g = t.gather_per_row(m, &[1, 2])?;
        let sq = t.mul(g, g)?;
        t.sum(sq)
    });
    check_primitive("gather_flat", 6, |t, x| {
        let g = t.gather_flat(x, &[5, 0, 3, 3])?;
        let sq = t.mul(g, g)?;
        t.sum(sq)
    });
    check_primitive("cumsum_rows", 6, |t, x| {
        let m = t.reshape(x, vec![2, 3])?;
        let c = t.cumsum_rows(m)?;
        let sq = t.mul(c, c)?;
        t.sum(sq)
    });
    check_primitive("slice_reshape", 6, |t, x| {
        let s = t.slice(x, 1, 4)?;
        let m = t.reshape(s, vec![2, 2])?;
        let sq = t.mul(m, m)?;
        t.sum(sq)
    });
}

#[test]
fn gradient_linearity() {
    // grad(f + g) == grad(f) + grad(g) up to rounding.
    let f = |t: &mut Tape, x: Var| {
        let e = t.exp(x)?;
        t.sum(e)
    };
    let g = |t: &mut Tape, x: Var| {
        let s = t.tanh(x)?;
        let sq = t.mul(s, s)?;
        t.sum(sq)
    };
    let combined = |t: &mut Tape, x: Var| {
        let e = t.exp(x)?;
        let a = t.sum(e)?;
        let s = t.tanh(x)?;
        let sq = t.mul(s, s)?;
        let b = t.sum(sq)?;
        t.add(a, b)
    };
    let at = Tensor::vector(vec![0.3, -0.8, 1.7]);
    let (_, gf) = evaluate_with_gradient(f, &at).unwrap();
    let (_, gg) = evaluate_with_gradient(g, &at).unwrap();
    let (_, gc) = evaluate_with_gradient(combined, &at).unwrap();
    for i in 0..at.numel() {
        let sum = gf.data()[i] + gg.data()[i];
        assert!((sum - gc.data()[i]).abs() < 1e-14);
    }
}
