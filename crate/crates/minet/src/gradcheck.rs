//! Finite-difference oracles for gradients and Jacobian-vector products.
//!
//! These run in `f64` only; central differences need the headroom. The
//! probes evaluate the forward pass alone, so they are independent of the
//! backward rules they are used to check.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{shape_string, Scalar, Tensor};

/// Central-difference Jacobian-vector product `(f(x+εv) - f(x-εv)) / (2ε)`,
/// an O(ε²) approximation of `∂f(x)·v`.
pub fn finite_diff_jvp<F>(f: F, x: &Tensor<f64>, v: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_jvp: eps must be positive, got {eps}"
        )));
    }
    if v.shape != x.shape {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_jvp",
            expected: shape_string(&x.shape),
            got: shape_string(&v.shape),
        });
    }
    let probe = |sign: f64| -> Result<Tensor<f64>> {
        let mut xp = x.clone();
        for (a, &b) in xp.data.iter_mut().zip(&v.data) {
            *a += sign * eps * b;
        }
        f(&xp)
    };
    let plus = probe(1.0)?;
    let minus = probe(-1.0)?;
    if plus.shape != minus.shape {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_jvp",
            expected: shape_string(&plus.shape),
            got: shape_string(&minus.shape),
        });
    }
    let data = plus
        .data
        .iter()
        .zip(&minus.data)
        .map(|(&p, &m)| (p - m) / (2.0 * eps))
        .collect();
    Tensor::from_vec(plus.shape, data)
}

/// Relative error between two gradient vectors:
/// max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Checks the tape gradient of a scalar-valued function against central
/// finite differences. `build` records the function on a fresh tape from the
/// input node; the same recording serves both the analytic gradient (one
/// backward pass) and the finite-difference probes (forward only).
///
/// Returns the max relative error per [`max_rel_err`].
pub fn grad_check<F>(build: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check: eps must be positive, got {eps}"
        )));
    }
    x.validate_finite("grad_check input")?;

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(&probe.clone().requires_grad(false));
        let loss = build(&mut tape, id)?;
        if *tape.shape(loss) != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss {
                shape: shape_string(tape.shape(loss)),
            });
        }
        Ok(tape.value(loss)[0])
    };

    let mut tape = Tape::new();
    let id = tape.leaf(&x.clone().requires_grad(true));
    let loss = build(&mut tape, id)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(id)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        numeric[i] = (plus - minus) / (2.0 * eps);
    }

    Ok(max_rel_err(&analytic, &numeric))
}

/// Convenience for tests: uniform random tensor in `[lo, hi)` from a seeded
/// generator.
pub fn random_tensor<T: Scalar, R: rand::Rng>(
    rng: &mut R,
    shape: crate::tensor::Shape,
    lo: f64,
    hi: f64,
) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn jvp_linear_is_eps_independent() {
        let f = |x: &Tensor<f64>| Ok(x.map(|v| 3.0 * v));
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let v = Tensor::from_vec([1, 1, 1, 3], vec![0.3, 1.0, -4.0]).unwrap();
        let a = finite_diff_jvp(f, &x, &v, 1e-4).unwrap();
        let b = finite_diff_jvp(f, &x, &v, 1e-2).unwrap();
        for ((av, bv), vv) in a.data.iter().zip(&b.data).zip(&v.data) {
            assert!((av - 3.0 * vv).abs() < 1e-10);
            assert!((av - bv).abs() < 1e-10);
        }
    }

    #[test]
    fn jvp_quadratic_diagonal() {
        // f(x) = x⊙x has J = diag(2x); at x=[1,2], v=[1,1] the JVP is [2,4]
        let f = |x: &Tensor<f64>| Ok(x.map(|v| v * v));
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let v = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let j = finite_diff_jvp(f, &x, &v, 1e-5).unwrap();
        assert!((j.data[0] - 2.0).abs() < 1e-9);
        assert!((j.data[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn jvp_constant_field_is_zero() {
        let f = |x: &Tensor<f64>| Ok(Tensor::full(x.shape, 7.0));
        let x = Tensor::full([1, 1, 2, 2], 1.0);
        let v = Tensor::full([1, 1, 2, 2], 3.0);
        let j = finite_diff_jvp(f, &x, &v, 1e-4).unwrap();
        assert!(j.data.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn jvp_rejects_bad_inputs() {
        let f = |x: &Tensor<f64>| Ok(x.clone());
        let x = Tensor::full([1, 1, 1, 2], 0.0);
        let v = Tensor::full([1, 1, 2, 1], 0.0);
        assert!(finite_diff_jvp(f, &x, &x, 0.0).is_err());
        assert!(matches!(
            finite_diff_jvp(f, &x, &v, 1e-4),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = random_tensor(&mut rng, [1, 1, 2, 2], -1.0, 1.0);
        let err = grad_check(
            |tape, id| {
                let sq = tape.mul(id, id)?;
                Ok(tape.mean_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "sum-of-squares grad error {err}");
    }

    #[test]
    fn affine_gradient_is_exact() {
        // loss = mean(a*x + b): analytic gradient is a/n with no rounding slack
        let a = 1.5f64;
        let x = Tensor::from_vec([1, 1, 1, 1], vec![0.3]).unwrap().requires_grad(true);
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let s = tape.scale(id, a);
        let b = tape.constant([1, 1, 1, 1], vec![2.0]);
        let y = tape.add(s, b).unwrap();
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap()[0], a);
    }

    #[test]
    fn relu_grad_away_from_kink() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.4, -0.7]).unwrap();
        let err = grad_check(
            |tape, id| {
                let r = tape.relu(id);
                Ok(tape.mean_all(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "relu grad error {err}");
    }
}
