//! Exact finite MDPs and stochastic policy tables.

use super::EnvError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Finite MDP with dense transition and reward tables.
///
/// Transitions are stored row-major as `[state][action][next_state]` and
/// rewards as `[state][action]`; every transition row must be a probability
/// vector within 1e-12.
#[derive(Debug, Clone)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    initial_distribution: Vec<f64>,
}

const ROW_SUM_TOL: f64 = 1e-12;

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_distribution: Vec<f64>,
    ) -> Result<Self, EnvError> {
        if n_states == 0 || n_actions == 0 {
            return Err(EnvError::BadMdp {
                context: "state and action counts must be positive".into(),
            });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(EnvError::BadMdp {
                context: format!("discount {gamma} outside (0, 1)"),
            });
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(EnvError::BadMdp {
                context: format!(
                    "transition table has {} entries, expected {}",
                    transition.len(),
                    n_states * n_actions * n_states
                ),
            });
        }
        if reward.len() != n_states * n_actions {
            return Err(EnvError::BadMdp {
                context: format!(
                    "reward table has {} entries, expected {}",
                    reward.len(),
                    n_states * n_actions
                ),
            });
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(EnvError::BadMdp {
                context: "reward table contains a non-finite entry".into(),
            });
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(EnvError::BadMdp {
                        context: format!("transition row ({s}, {a}) has a negative or non-finite entry"),
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(EnvError::BadMdp {
                        context: format!("transition row ({s}, {a}) sums to {sum}, expected 1"),
                    });
                }
            }
        }
        check_distribution(&initial_distribution, n_states, "initial distribution")?;
        Ok(Self { n_states, n_actions, transition, reward, gamma, initial_distribution })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial_distribution
    }

    /// Largest absolute one-step reward, used for value-scale bounds.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_index(&self.initial_distribution, rng)
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        sample_index(self.transition_row(s, a), rng)
    }
}

fn check_distribution(dist: &[f64], len: usize, what: &str) -> Result<(), EnvError> {
    if dist.len() != len {
        return Err(EnvError::BadMdp {
            context: format!("{what} has {} entries, expected {len}", dist.len()),
        });
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(EnvError::BadMdp {
            context: format!("{what} has a negative or non-finite entry"),
        });
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(EnvError::BadMdp { context: format!("{what} sums to {sum}, expected 1") });
    }
    Ok(())
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Stochastic policy over a finite MDP, one probability row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, EnvError> {
        if probs.len() != n_states * n_actions {
            return Err(EnvError::BadPolicy {
                context: format!("{} entries, expected {}", probs.len(), n_states * n_actions),
            });
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..][..n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(EnvError::BadPolicy {
                    context: format!("state {s} row has a negative or non-finite entry"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(EnvError::BadPolicy {
                    context: format!("state {s} row sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    /// Point-mass policy taking `picks[s]` in state `s`.
    pub fn deterministic(n_states: usize, n_actions: usize, picks: &[usize]) -> Self {
        assert_eq!(picks.len(), n_states);
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in picks.iter().enumerate() {
            assert!(a < n_actions);
            probs[s * n_actions + a] = 1.0;
        }
        Self { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    pub fn sample(&self, s: usize, rng: &mut ChaCha8Rng) -> usize {
        sample_index(self.row(s), rng)
    }

    /// Renormalizes each row exactly; rows must have positive mass.
    pub fn from_unnormalized(
        n_states: usize,
        n_actions: usize,
        mut weights: Vec<f64>,
    ) -> Result<Self, EnvError> {
        if weights.len() != n_states * n_actions {
            return Err(EnvError::BadPolicy {
                context: format!("{} entries, expected {}", weights.len(), n_states * n_actions),
            });
        }
        for s in 0..n_states {
            let row = &mut weights[s * n_actions..][..n_actions];
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(EnvError::BadPolicy {
                    context: format!("state {s} row has a negative or non-finite weight"),
                });
            }
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return Err(EnvError::BadPolicy {
                    context: format!("state {s} row has zero total weight"),
                });
            }
            for w in row {
                *w /= sum;
            }
        }
        Ok(Self { n_states, n_actions, probs: weights })
    }
}

/// Optimal state and action values via value iteration on the Bellman
/// optimality operator, run to sup-norm tolerance `tol`.
pub fn optimal_q_values(mdp: &TabularMDP, tol: f64) -> (Vec<f64>, Vec<f64>) {
    let (s_n, a_n) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; s_n];
    let mut q = vec![0.0; s_n * a_n];
    for _ in 0..100_000 {
        let mut delta = 0.0_f64;
        for s in 0..s_n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..a_n {
                let row = mdp.transition_row(s, a);
                let mut exp_v = 0.0;
                for (sp, p) in row.iter().enumerate() {
                    exp_v += p * v[sp];
                }
                let qsa = mdp.reward(s, a) + mdp.gamma() * exp_v;
                q[s * a_n + a] = qsa;
                best = best.max(qsa);
            }
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta <= tol {
            break;
        }
    }
    (v, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use approx::assert_abs_diff_eq;

    fn two_state_chain(gamma: f64) -> TabularMDP {
        // Action 0 stays, action 1 advances; state 1 absorbs with reward 0.
        // Reward 1 for entering state 1 from state 0.
        let transition = vec![
            1.0, 0.0, // s0 a0
            0.0, 1.0, // s0 a1
            0.0, 1.0, // s1 a0
            0.0, 1.0, // s1 a1
        ];
        let reward = vec![0.0, 1.0, 0.0, 0.0];
        TabularMDP::new(2, 2, transition, reward, gamma, vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn rejects_unnormalized_transition_row() {
        let transition = vec![0.5, 0.4, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let err = TabularMDP::new(2, 2, transition, vec![0.0; 4], 0.9, vec![1.0, 0.0]);
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("row (0, 0)"), "{msg}");
    }

    #[test]
    fn rejects_bad_gamma() {
        let transition = vec![1.0, 0.0, 0.0, 1.0];
        let err = TabularMDP::new(1, 2, vec![1.0, 1.0], vec![0.0; 2], 1.0, vec![1.0]);
        assert!(err.is_err());
        let err = TabularMDP::new(2, 1, transition, vec![0.0; 2], 0.0, vec![1.0, 0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn optimal_values_match_geometric_series() {
        let mdp = two_state_chain(0.9);
        let (v, q) = optimal_q_values(&mdp, 1e-13);
        // Advancing earns 1 immediately, then the absorbing state is worthless.
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(q[0 * 2 + 0], 0.9, epsilon = 1e-10);
        assert_abs_diff_eq!(q[0 * 2 + 1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn policy_table_validates_rows() {
        let err = PolicyTable::new(1, 2, vec![0.7, 0.2]).unwrap_err();
        assert!(err.to_string().contains("sums to"));
        let ok = PolicyTable::new(1, 2, vec![0.7, 0.3]).unwrap();
        assert_abs_diff_eq!(ok.prob(0, 1), 0.3);
    }

    #[test]
    fn from_unnormalized_divides_by_row_sum() {
        let p = PolicyTable::from_unnormalized(1, 3, vec![2.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(p.prob(0, 0), 0.5);
        assert!(PolicyTable::from_unnormalized(1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_matches_table_frequencies() {
        let table = PolicyTable::new(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let mut rng = seeding::stream(&[11, 0]);
        let mut counts = [0usize; 3];
        let n = 60_000;
        for _ in 0..n {
            counts[table.sample(0, &mut rng)] += 1;
        }
        for (a, &want) in [0.2, 0.5, 0.3].iter().enumerate() {
            let freq = counts[a] as f64 / n as f64;
            assert!((freq - want).abs() < 0.01, "action {a}: {freq} vs {want}");
        }
    }
}
