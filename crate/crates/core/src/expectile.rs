//! Expectiles: asymmetric squared loss, weighted expectiles of discrete
//! distributions, expectile variance, and expectile value iteration.

use crate::envs::{PolicyTable, TabularMDP};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpectileError {
    #[error("expectile of an empty sample set")]
    EmptySamples,
    #[error("{what} has {got} entries, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("asymmetry level {tau} outside the open interval (0, 1)")]
    BadTau { tau: f64 },
    #[error("weight {index} is negative or non-finite")]
    BadWeight { index: usize },
    #[error("weights sum to zero")]
    ZeroMass,
    #[error("value {index} is non-finite")]
    NonFiniteValue { index: usize },
    #[error("value iteration did not reach tolerance {tol} in {iters} sweeps")]
    NoConvergence { tol: f64, iters: usize },
}

/// Asymmetric squared loss: `u^2` weighted by `tau` for non-negative `u`
/// and by `1 - tau` for negative `u`.
pub fn l2_tau(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Guaranteed absolute accuracy of the bisection root; in practice the
/// solver runs to float convergence, far past this bound.
pub const EXPECTILE_TOL: f64 = 1e-10;

fn check_samples(values: &[f64], weights: &[f64]) -> Result<f64, ExpectileError> {
    if values.is_empty() {
        return Err(ExpectileError::EmptySamples);
    }
    if weights.len() != values.len() {
        return Err(ExpectileError::LengthMismatch {
            what: "weights",
            got: weights.len(),
            expected: values.len(),
        });
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(ExpectileError::NonFiniteValue { index: i });
        }
    }
    let mut mass = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(ExpectileError::BadWeight { index: i });
        }
        mass += w;
    }
    if mass <= 0.0 {
        return Err(ExpectileError::ZeroMass);
    }
    Ok(mass)
}

fn check_tau(tau: f64) -> Result<(), ExpectileError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ExpectileError::BadTau { tau });
    }
    Ok(())
}

/// Weighted `tau`-expectile of discrete samples.
///
/// The expectile is the unique root of the stationarity condition of the
/// asymmetric squared loss,
/// `g(v) = sum_i w_i * k_i * (x_i - v)` with `k_i = tau` above `v` and
/// `1 - tau` below. `g` is continuous and strictly decreasing, so bisection
/// over the weighted support converges; it runs to float convergence, well
/// within [`EXPECTILE_TOL`].
pub fn expectile(values: &[f64], weights: &[f64], tau: f64) -> Result<f64, ExpectileError> {
    check_tau(tau)?;
    expectile_by(values, weights, |_| tau)
}

/// Weighted expectile with one asymmetry level per sample.
pub fn expectile_per_sample(
    values: &[f64],
    weights: &[f64],
    taus: &[f64],
) -> Result<f64, ExpectileError> {
    if taus.len() != values.len() {
        return Err(ExpectileError::LengthMismatch {
            what: "asymmetry levels",
            got: taus.len(),
            expected: values.len(),
        });
    }
    for t in taus {
        check_tau(*t)?;
    }
    expectile_by(values, weights, |i| taus[i])
}

fn expectile_by(
    values: &[f64],
    weights: &[f64],
    tau_at: impl Fn(usize) -> f64,
) -> Result<f64, ExpectileError> {
    check_samples(values, weights)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, w) in values.iter().zip(weights) {
        if *w > 0.0 {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo == hi {
        return Ok(lo);
    }
    let g = |v: f64| -> f64 {
        let mut sum = 0.0;
        for (i, (x, w)) in values.iter().zip(weights).enumerate() {
            let t = tau_at(i);
            let k = if *x < v { 1.0 - t } else { t };
            sum += w * k * (x - v);
        }
        sum
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Weighted mean.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64, ExpectileError> {
    let mass = check_samples(values, weights)?;
    let mut sum = 0.0;
    for (x, w) in values.iter().zip(weights) {
        sum += w * x;
    }
    Ok(sum / mass)
}

/// Expectile variance: the plain-expectation mean squared deviation around
/// the `tau`-expectile. At `tau = 0.5` this is the ordinary variance.
pub fn expectile_variance(
    values: &[f64],
    weights: &[f64],
    tau: f64,
) -> Result<f64, ExpectileError> {
    let e = expectile(values, weights, tau)?;
    let mass = check_samples(values, weights)?;
    let mut sum = 0.0;
    for (x, w) in values.iter().zip(weights) {
        sum += w * (x - e) * (x - e);
    }
    Ok(sum / mass)
}

/// Asymmetry levels for expectile value iteration: one shared level, or one
/// level per state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub enum TauTable {
    Scalar(f64),
    PerStateAction(Vec<f64>),
}

impl TauTable {
    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<(), ExpectileError> {
        match self {
            Self::Scalar(tau) => check_tau(*tau),
            Self::PerStateAction(taus) => {
                if taus.len() != n_states * n_actions {
                    return Err(ExpectileError::LengthMismatch {
                        what: "asymmetry table",
                        got: taus.len(),
                        expected: n_states * n_actions,
                    });
                }
                taus.iter().try_for_each(|t| check_tau(*t))
            }
        }
    }

    pub fn at(&self, s: usize, a: usize, n_actions: usize) -> f64 {
        match self {
            Self::Scalar(tau) => *tau,
            Self::PerStateAction(taus) => taus[s * n_actions + a],
        }
    }
}

/// Expectile policy evaluation: iterates the expectile Bellman operator
///
/// `Q(s, a) = r(s, a) + gamma * E_{s'}[V(s')]`,
/// `V(s) = tau-expectile over a ~ pi(.|s) of Q(s, a)`,
///
/// to sup-norm tolerance `tol`, returning `(V, Q)`. The operator is a
/// gamma-contraction because expectiles are monotone and translation
/// equivariant, so the fixed point is unique.
pub fn expectile_value_iteration(
    mdp: &TabularMDP,
    policy: &PolicyTable,
    tau: &TauTable,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), ExpectileError> {
    let (s_n, a_n) = (mdp.n_states(), mdp.n_actions());
    if policy.n_states() != s_n || policy.n_actions() != a_n {
        return Err(ExpectileError::LengthMismatch {
            what: "policy table",
            got: policy.n_states() * policy.n_actions(),
            expected: s_n * a_n,
        });
    }
    tau.validate(s_n, a_n)?;
    let max_sweeps = 1_000_000;
    let mut v = vec![0.0; s_n];
    let mut q = vec![0.0; s_n * a_n];
    let mut taus_row = vec![0.0; a_n];
    for sweep in 0..max_sweeps {
        let mut delta = 0.0_f64;
        for s in 0..s_n {
            for a in 0..a_n {
                let row = mdp.transition_row(s, a);
                let mut exp_v = 0.0;
                for (sp, p) in row.iter().enumerate() {
                    exp_v += p * v[sp];
                }
                q[s * a_n + a] = mdp.reward(s, a) + mdp.gamma() * exp_v;
            }
            for a in 0..a_n {
                taus_row[a] = tau.at(s, a, a_n);
            }
            let new_v = expectile_per_sample(&q[s * a_n..][..a_n], policy.row(s), &taus_row)?;
            delta = delta.max((new_v - v[s]).abs());
            v[s] = new_v;
        }
        if delta <= tol {
            return Ok((v, q));
        }
        if sweep == max_sweeps - 1 {
            break;
        }
    }
    Err(ExpectileError::NoConvergence { tol, iters: max_sweeps })
}
