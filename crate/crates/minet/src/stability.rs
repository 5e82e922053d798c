//! Stability diagnostics for the fixed-point recursion.
//!
//! The recursion `g_{κ+1} = g_0 + η f(g_κ)` converges when every eigenvalue
//! λ of `∂f/∂x` satisfies `|λ| < 1/η`. This module estimates the dominant
//! `|λ|` (the spectral radius) by power iteration on finite-difference
//! Jacobian-vector products, classifies the result against the `1/η`
//! threshold, and provides the classic stiff-ODE comparison of explicit and
//! implicit Euler steps on `dx/dt = λx`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::finite_diff_jvp;
use crate::tensor::{shape_string, Tensor};

/// Step size for the finite-difference Jacobian-vector products.
pub const JVP_EPS: f64 = 1e-4;

/// Result of power iteration on `∂f/∂x` at a point.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    /// Dominant eigenvalue magnitude.
    pub rho: f64,
    /// Power-iteration steps actually performed.
    pub iterations: usize,
    /// Whether the trailing norm ratios settled (relative spread < 5%).
    pub converged: bool,
    /// Per-step norm ratios `‖J v_k‖` with `‖v_k‖ = 1`.
    pub growth_history: Vec<f64>,
}

/// Outcome of testing `rho < 1/η`.
#[derive(Debug, Clone)]
pub struct StabilityVerdict {
    pub rho: f64,
    /// `1/η`.
    pub threshold: f64,
    /// `rho < threshold`. Disregard when `indeterminate` is set.
    pub stable: bool,
    /// `threshold - rho`.
    pub margin: f64,
    /// The estimate sits in the marginal band `|rho·η - 1| < 0.05`, too
    /// close to the strict-inequality boundary to trust numerically.
    pub indeterminate: bool,
    pub estimate: SpectralEstimate,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_unit(rng: &mut ChaCha8Rng, like: &Tensor<f64>) -> Tensor<f64> {
    loop {
        let data: Vec<f64> = (0..like.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&data);
        if n > 1e-6 {
            return Tensor::from_vec(like.shape, data.iter().map(|v| v / n).collect())
                .expect("length matches shape");
        }
    }
}

/// Estimates the spectral radius of `∂f/∂x` at `x` by power iteration with
/// finite-difference JVPs.
///
/// `rho` is the geometric mean of the last `max(5, iters/4)` norm ratios,
/// which tolerates the oscillation caused by complex-conjugate dominant
/// pairs; `converged` requires those ratios to agree within 5% relative
/// spread. A vanishing JVP triggers one reseed of the probe vector; if the
/// second probe also vanishes the Jacobian is treated as zero and the
/// estimate reports `rho = 0` immediately.
pub fn estimate_spectral_radius<F>(
    f: &F,
    x: &Tensor<f64>,
    iters: usize,
    eps: f64,
    seed: u64,
) -> Result<SpectralEstimate>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if iters < 10 {
        return Err(Error::InvalidArgument(format!(
            "estimate_spectral_radius: need at least 10 iterations, got {iters}"
        )));
    }
    let fx = f(x)?;
    if fx.shape != x.shape {
        return Err(Error::ShapeMismatch {
            op: "estimate_spectral_radius",
            expected: shape_string(&x.shape),
            got: shape_string(&fx.shape),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = random_unit(&mut rng, x);
    let mut history = Vec::with_capacity(iters);
    let mut reseeded = false;

    for _ in 0..iters {
        let jv = finite_diff_jvp(f, x, &v, eps)?;
        let n = norm(&jv.data);
        if n < 1e-12 {
            if reseeded {
                // two independent probes annihilated: Jacobian is zero
                history.push(0.0);
                let iterations = history.len();
                return Ok(SpectralEstimate {
                    rho: 0.0,
                    iterations,
                    converged: true,
                    growth_history: history,
                });
            }
            reseeded = true;
            v = random_unit(&mut rng, x);
            continue;
        }
        history.push(n);
        v = Tensor::from_vec(x.shape, jv.data.iter().map(|a| a / n).collect())
            .expect("length matches shape");
    }

    let window = history.len().min(5.max(iters / 4));
    let tail = &history[history.len() - window..];
    let log_mean = tail.iter().map(|r| r.ln()).sum::<f64>() / window as f64;
    let rho = log_mean.exp();
    let (lo, hi) = tail
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let converged = rho > 0.0 && (hi - lo) / rho < 0.05;
    let iterations = history.len();

    Ok(SpectralEstimate {
        rho,
        iterations,
        converged,
        growth_history: history,
    })
}

/// Default power-iteration depth for [`check_theorem1`].
pub const DEFAULT_POWER_ITERS: usize = 50;
const CHECK_SEED: u64 = 17;

/// Tests the eigenvalue bound `rho < 1/η` for a field at a point.
pub fn check_theorem1<F>(f: &F, x: &Tensor<f64>, eta: f64, iters: usize) -> Result<StabilityVerdict>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if eta <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "check_theorem1: eta must be positive, got {eta}"
        )));
    }
    let estimate = estimate_spectral_radius(f, x, iters, JVP_EPS, CHECK_SEED)?;
    Ok(verdict_from_rho(estimate, eta))
}

/// Classification step of [`check_theorem1`], separated so a precomputed
/// estimate can be reused.
pub fn verdict_from_rho(estimate: SpectralEstimate, eta: f64) -> StabilityVerdict {
    let threshold = 1.0 / eta;
    let rho = estimate.rho;
    StabilityVerdict {
        rho,
        threshold,
        stable: rho < threshold,
        margin: threshold - rho,
        indeterminate: (rho * eta - 1.0).abs() < 0.05,
        estimate,
    }
}

/// Explicit and implicit Euler trajectories for `dx/dt = λx`:
/// `x_{k+1} = (1+ηλ)x_k` versus `x_{k+1} = x_k/(1-ηλ)`. Both sequences
/// include the initial value, so their length is `steps + 1`.
pub fn euler_compare(lambda: f64, eta: f64, steps: usize, x0: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let denom = 1.0 - eta * lambda;
    if denom == 0.0 {
        return Err(Error::ImplicitPole);
    }
    let ef = 1.0 + eta * lambda;
    let mut explicit = Vec::with_capacity(steps + 1);
    let mut implicit = Vec::with_capacity(steps + 1);
    explicit.push(x0);
    implicit.push(x0);
    for k in 0..steps {
        explicit.push(explicit[k] * ef);
        implicit.push(implicit[k] / denom);
    }
    Ok((explicit, implicit))
}

/// CSV with one row per step: `step,explicit,implicit`.
pub fn euler_csv(explicit: &[f64], implicit: &[f64]) -> String {
    let mut out = String::from("step,explicit,implicit\n");
    for (k, (e, i)) in explicit.iter().zip(implicit).enumerate() {
        out.push_str(&format!("{k},{e},{i}\n"));
    }
    out
}

/// CSV with one row per power-iteration step: `step,norm_ratio`.
pub fn spectral_csv(estimate: &SpectralEstimate) -> String {
    let mut out = String::from("step,norm_ratio\n");
    for (k, r) in estimate.growth_history.iter().enumerate() {
        out.push_str(&format!("{k},{r}\n"));
    }
    out
}

/// Dense matrix-vector field over `(1, d, 1, 1)` tensors; the standard test
/// subject for the estimator.
pub fn matvec_field(a: Vec<f64>, d: usize) -> impl Fn(&Tensor<f64>) -> Result<Tensor<f64>> {
    move |x: &Tensor<f64>| {
        let mut y = vec![0.0; d];
        for (i, yi) in y.iter_mut().enumerate() {
            for j in 0..d {
                *yi += a[i * d + j] * x.data[j];
            }
        }
        Tensor::from_vec(x.shape, y)
    }
}
