//! Policy networks: diagonal Gaussian for continuous actions, softmax
//! categorical for discrete ones, and behavior cloning.

use crate::numerics::{
    adam_step, AdamHyper, AdamState, MlpBinding, MlpParams, NodeId, NumericsError, Tape, Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("numerics failure: {0}")]
    Numerics(#[from] NumericsError),
    #[error("{context}")]
    BadShape { context: String },
    #[error("behavior cloning diverged at step {step}: {source}")]
    DivergedAtStep { step: u64, source: NumericsError },
}

/// Log standard deviation clamp bounds for Gaussian heads.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Batch of actions matching the policy family.
#[derive(Debug, Clone)]
pub enum ActionBatch {
    /// One action vector per row.
    Continuous(Tensor),
    /// One action index per sample.
    Discrete(Vec<usize>),
}

impl ActionBatch {
    pub fn len(&self) -> usize {
        match self {
            Self::Continuous(t) => t.rows(),
            Self::Discrete(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sampled or deterministic action.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSample {
    Continuous(Vec<f64>),
    Discrete(usize),
}

/// Stochastic policy head over an MLP trunk.
///
/// Gaussian policies output `2 * action_dim` values per state: means first,
/// then log standard deviations, clamped to the policy's `log_std` bounds
/// (default `[LOG_STD_MIN, LOG_STD_MAX]`). Categorical policies output one
/// logit per action.
#[derive(Debug, Clone)]
pub enum PolicyNet {
    Gaussian { net: MlpParams, action_dim: usize, log_std: (f64, f64) },
    Categorical { net: MlpParams, n_actions: usize },
}

impl PolicyNet {
    pub fn gaussian(net: MlpParams) -> Result<Self, PolicyError> {
        if net.out_dim() % 2 != 0 || net.out_dim() == 0 {
            return Err(PolicyError::BadShape {
                context: format!(
                    "gaussian head needs an even output width, net has {}",
                    net.out_dim()
                ),
            });
        }
        let action_dim = net.out_dim() / 2;
        Ok(Self::Gaussian { net, action_dim, log_std: (LOG_STD_MIN, LOG_STD_MAX) })
    }

    /// Replaces the log standard deviation clamp range; Gaussian only.
    pub fn with_log_std_bounds(self, lo: f64, hi: f64) -> Result<Self, PolicyError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(PolicyError::BadShape {
                context: format!("log-std bounds [{lo}, {hi}] are not a finite interval"),
            });
        }
        match self {
            Self::Gaussian { net, action_dim, .. } => {
                Ok(Self::Gaussian { net, action_dim, log_std: (lo, hi) })
            }
            Self::Categorical { .. } => Err(PolicyError::BadShape {
                context: "categorical policies have no log-std bounds".into(),
            }),
        }
    }

    /// Log-std clamp range for Gaussian policies.
    pub fn log_std_bounds(&self) -> Option<(f64, f64)> {
        match self {
            Self::Gaussian { log_std, .. } => Some(*log_std),
            Self::Categorical { .. } => None,
        }
    }

    pub fn categorical(net: MlpParams) -> Result<Self, PolicyError> {
        if net.out_dim() == 0 {
            return Err(PolicyError::BadShape { context: "categorical head is empty".into() });
        }
        let n_actions = net.out_dim();
        Ok(Self::Categorical { net, n_actions })
    }

    pub fn net(&self) -> &MlpParams {
        match self {
            Self::Gaussian { net, .. } | Self::Categorical { net, .. } => net,
        }
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        match self {
            Self::Gaussian { net, .. } | Self::Categorical { net, .. } => net,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Categorical { .. } => "categorical",
        }
    }

    fn check_actions(&self, states: &Tensor, actions: &ActionBatch) -> Result<(), PolicyError> {
        let n = states.rows();
        match (self, actions) {
            (Self::Gaussian { action_dim, .. }, ActionBatch::Continuous(a)) => {
                if a.rows() != n || a.cols() != *action_dim {
                    return Err(PolicyError::BadShape {
                        context: format!(
                            "actions are {}x{}, expected {}x{}",
                            a.rows(),
                            a.cols(),
                            n,
                            action_dim
                        ),
                    });
                }
                Ok(())
            }
            (Self::Categorical { n_actions, .. }, ActionBatch::Discrete(ids)) => {
                if ids.len() != n {
                    return Err(PolicyError::BadShape {
                        context: format!("{} action indices for {} states", ids.len(), n),
                    });
                }
                if let Some(bad) = ids.iter().find(|&&a| a >= *n_actions) {
                    return Err(PolicyError::BadShape {
                        context: format!("action index {bad} out of range {n_actions}"),
                    });
                }
                Ok(())
            }
            _ => Err(PolicyError::BadShape {
                context: format!("{} policy got the other action family", self.kind_name()),
            }),
        }
    }

    /// Per-sample log densities without building a graph. Matches the taped
    /// version bit for bit: both run the same kernels in the same order.
    pub fn log_density(
        &self,
        states: &Tensor,
        actions: &ActionBatch,
    ) -> Result<Vec<f64>, PolicyError> {
        self.check_actions(states, actions)?;
        let out = crate::numerics::forward(self.net(), states, None)?;
        let n = states.rows();
        match (self, actions) {
            (Self::Gaussian { action_dim, log_std, .. }, ActionBatch::Continuous(acts)) => {
                let k = *action_dim;
                let mut logp = Vec::with_capacity(n);
                for r in 0..n {
                    let row = out.row(r);
                    let mut sum = 0.0;
                    for j in 0..k {
                        let mu = row[j];
                        let neg_ls = -row[k + j].clamp(log_std.0, log_std.1);
                        let z = (acts.at2(r, j) - mu) * neg_ls.exp();
                        sum += neg_ls - 0.5 * (z * z);
                    }
                    logp.push(sum + -0.5 * LN_2PI * k as f64);
                }
                Ok(logp)
            }
            (Self::Categorical { .. }, ActionBatch::Discrete(ids)) => {
                let mut logp = Vec::with_capacity(n);
                for r in 0..n {
                    let row = out.row(r);
                    let lse = crate::numerics::log_sum_exp(row);
                    logp.push(row[ids[r]] - lse);
                }
                Ok(logp)
            }
            _ => unreachable!("checked above"),
        }
    }

    /// Builds the log-density graph and returns the `[n, 1]` node of
    /// per-sample log densities plus the parameter binding for gradients.
    pub fn log_density_graph(
        &self,
        tape: &mut Tape,
        states: &Tensor,
        actions: &ActionBatch,
    ) -> Result<(NodeId, MlpBinding), PolicyError> {
        self.check_actions(states, actions)?;
        let x = tape.constant(states.clone())?;
        let (out, binding) = crate::numerics::forward_on_tape(tape, self.net(), x, None)?;
        let logp = match (self, actions) {
            (Self::Gaussian { action_dim, log_std, .. }, ActionBatch::Continuous(acts)) => {
                let k = *action_dim;
                let mu = tape.slice_cols(out, 0, k)?;
                let raw_ls = tape.slice_cols(out, k, 2 * k)?;
                let ls = tape.clamp(raw_ls, log_std.0, log_std.1)?;
                let neg_ls = tape.neg(ls)?;
                let inv_sigma = tape.exp(neg_ls)?;
                let a = tape.constant(acts.clone())?;
                let diff = tape.sub(a, mu)?;
                let z = tape.mul(diff, inv_sigma)?;
                let z2 = tape.square(z)?;
                let half_z2 = tape.scale(z2, 0.5)?;
                let per_dim = tape.sub(neg_ls, half_z2)?;
                let summed = tape.row_sum(per_dim)?;
                tape.add_scalar(summed, -0.5 * LN_2PI * k as f64)?
            }
            (Self::Categorical { .. }, ActionBatch::Discrete(ids)) => {
                tape.row_log_softmax_gather(out, ids)?
            }
            _ => unreachable!("checked above"),
        };
        Ok((logp, binding))
    }

    /// Action probabilities per state row; categorical only.
    pub fn action_probabilities(&self, states: &Tensor) -> Result<Vec<Vec<f64>>, PolicyError> {
        let Self::Categorical { n_actions, net } = self else {
            return Err(PolicyError::BadShape {
                context: "action probabilities need a categorical policy".into(),
            });
        };
        let out = crate::numerics::forward(net, states, None)?;
        let mut rows = Vec::with_capacity(states.rows());
        for r in 0..states.rows() {
            let row = out.row(r);
            let lse = crate::numerics::log_sum_exp(row);
            rows.push((0..*n_actions).map(|a| (row[a] - lse).exp()).collect());
        }
        Ok(rows)
    }

    pub fn sample_action(&self, state: &[f64], rng: &mut ChaCha8Rng) -> ActionSample {
        let x = Tensor::new(vec![1, state.len()], state.to_vec()).expect("state row");
        let out = crate::numerics::forward(self.net(), &x, None).expect("policy forward");
        match self {
            Self::Gaussian { action_dim, log_std, .. } => {
                let row = out.row(0);
                let mut action = Vec::with_capacity(*action_dim);
                for j in 0..*action_dim {
                    let sigma = row[action_dim + j].clamp(log_std.0, log_std.1).exp();
                    let eps: f64 = StandardNormal.sample(rng);
                    action.push(row[j] + sigma * eps);
                }
                ActionSample::Continuous(action)
            }
            Self::Categorical { n_actions, .. } => {
                let row = out.row(0);
                let lse = crate::numerics::log_sum_exp(row);
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                for a in 0..*n_actions {
                    acc += (row[a] - lse).exp();
                    if u < acc {
                        return ActionSample::Discrete(a);
                    }
                }
                ActionSample::Discrete(n_actions - 1)
            }
        }
    }

    /// Mean action for Gaussian policies, highest-probability action for
    /// categorical ones; the evaluation-time action.
    pub fn deterministic_action(&self, state: &[f64]) -> ActionSample {
        let x = Tensor::new(vec![1, state.len()], state.to_vec()).expect("state row");
        let out = crate::numerics::forward(self.net(), &x, None).expect("policy forward");
        match self {
            Self::Gaussian { action_dim, .. } => {
                ActionSample::Continuous(out.row(0)[..*action_dim].to_vec())
            }
            Self::Categorical { n_actions, .. } => {
                let row = out.row(0);
                let mut best = 0;
                for a in 1..*n_actions {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                ActionSample::Discrete(best)
            }
        }
    }
}

/// One-hot feature rows for index-valued states or actions.
pub fn one_hot(indices: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * width];
    for (r, &i) in indices.iter().enumerate() {
        assert!(i < width, "index {i} out of one-hot width {width}");
        data[r * width + i] = 1.0;
    }
    Tensor::new(vec![indices.len(), width], data).expect("one-hot shape")
}

/// Maximizes mean log density with Adam over `steps` batches from
/// `batch_at`. Any non-finite value or gradient aborts with the step index.
pub fn bc_train(
    policy: &mut PolicyNet,
    steps: u64,
    lr: f64,
    mut batch_at: impl FnMut(u64) -> (Tensor, ActionBatch),
    mut on_step: impl FnMut(u64, f64),
) -> Result<(), PolicyError> {
    let mut adam = AdamState::new(policy.net());
    let hyper = AdamHyper::default();
    for step in 0..steps {
        let (states, actions) = batch_at(step);
        let n = states.rows();
        let mut tape = Tape::new();
        let run = (|| -> Result<f64, NumericsError> {
            let (logp, binding) = match policy.log_density_graph(&mut tape, &states, &actions) {
                Ok(x) => x,
                Err(PolicyError::Numerics(e)) => return Err(e),
                Err(other) => panic!("non-numeric failure in cloning batch: {other}"),
            };
            let mean = tape.dot_const(logp, &vec![1.0 / n as f64; n])?;
            let loss = tape.neg(mean)?;
            let grads = tape.backward(loss)?;
            let mlp_grads = binding.extract(&grads, policy.net());
            adam_step(policy.net_mut(), &mlp_grads, &mut adam, lr, &hyper)?;
            tape.value(loss).as_scalar()
        })();
        match run {
            Ok(loss) => on_step(step, loss),
            Err(source) => return Err(PolicyError::DivergedAtStep { step, source }),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::seeding;
    use approx::assert_abs_diff_eq;

    fn small_gaussian(seed: u64) -> PolicyNet {
        PolicyNet::gaussian(MlpParams::init(&[2, 8, 4], crate::numerics::Activation::Relu, seed).unwrap())
            .unwrap()
    }

    fn small_categorical(seed: u64) -> PolicyNet {
        PolicyNet::categorical(
            MlpParams::init(&[3, 8, 4], crate::numerics::Activation::Relu, seed).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_log_density_matches_normal_formula() {
        let policy = small_gaussian(5);
        let states = Tensor::from_rows(&[vec![0.3, -1.0], vec![1.5, 0.2]]).unwrap();
        let actions =
            ActionBatch::Continuous(Tensor::from_rows(&[vec![0.1, -0.4], vec![0.9, 0.0]]).unwrap());
        let logp = policy.log_density(&states, &actions).unwrap();
        let heads = crate::numerics::forward(policy.net(), &states, None).unwrap();
        let ActionBatch::Continuous(acts) = &actions else { unreachable!() };
        for r in 0..2 {
            let mut want = 0.0;
            for j in 0..2 {
                let mu = heads.at2(r, j);
                let sigma = heads.at2(r, 2 + j).clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
                let a = acts.at2(r, j);
                want += -0.5 * ((a - mu) / sigma).powi(2) - sigma.ln() - 0.5 * LN_2PI;
            }
            assert_abs_diff_eq!(logp[r], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn taped_and_pure_log_densities_agree_exactly() {
        let policy = small_gaussian(9);
        let states = Tensor::from_rows(&[vec![0.5, 0.5], vec![-2.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let actions = ActionBatch::Continuous(
            Tensor::from_rows(&[vec![0.2, 0.0], vec![-0.3, 0.4], vec![1.0, -1.0]]).unwrap(),
        );
        let pure = policy.log_density(&states, &actions).unwrap();
        let mut tape = Tape::new();
        let (node, _) = policy.log_density_graph(&mut tape, &states, &actions).unwrap();
        let taped = tape.value(node).data().to_vec();
        assert_eq!(pure, taped);

        let policy = small_categorical(10);
        let states = one_hot(&[0, 2, 1], 3);
        let actions = ActionBatch::Discrete(vec![3, 0, 2]);
        let pure = policy.log_density(&states, &actions).unwrap();
        let mut tape = Tape::new();
        let (node, _) = policy.log_density_graph(&mut tape, &states, &actions).unwrap();
        assert_eq!(pure, tape.value(node).data().to_vec());
    }

    #[test]
    fn categorical_probabilities_normalize_and_match_density() {
        let policy = small_categorical(11);
        let states = one_hot(&[1, 2], 3);
        let probs = policy.action_probabilities(&states).unwrap();
        for row in &probs {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let logp = policy.log_density(&states, &ActionBatch::Discrete(vec![2, 0])).unwrap();
        assert_abs_diff_eq!(logp[0], probs[0][2].ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(logp[1], probs[1][0].ln(), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_gradient_matches_finite_differences() {
        let policy = small_gaussian(13);
        let states = Tensor::from_rows(&[vec![0.4, -0.2], vec![1.0, 0.8]]).unwrap();
        let actions =
            ActionBatch::Continuous(Tensor::from_rows(&[vec![0.0, 0.1], vec![0.5, -0.5]]).unwrap());
        let flat0 = policy.net().flatten();
        let f = |flat: &[f64]| {
            let mut p = policy.clone();
            *p.net_mut() = policy.net().unflatten(flat).unwrap();
            let mut tape = Tape::new();
            let (logp, binding) = p.log_density_graph(&mut tape, &states, &actions).unwrap();
            let mean = tape.dot_const(logp, &[0.5, 0.5]).unwrap();
            let grads = tape.backward(mean).unwrap();
            let g = binding.extract(&grads, p.net()).flatten();
            (tape.value(mean).as_scalar().unwrap(), g)
        };
        let report = grad_check(&f, &flat0, 1e-6, 1e-6);
        assert!(report.pass, "max rel err {} at {}", report.max_rel_err, report.worst_index);
    }

    #[test]
    fn categorical_gradient_matches_finite_differences() {
        let policy = small_categorical(17);
        let states = one_hot(&[0, 1, 2], 3);
        let actions = ActionBatch::Discrete(vec![1, 3, 0]);
        let flat0 = policy.net().flatten();
        let f = |flat: &[f64]| {
            let mut p = policy.clone();
            *p.net_mut() = policy.net().unflatten(flat).unwrap();
            let mut tape = Tape::new();
            let (logp, binding) = p.log_density_graph(&mut tape, &states, &actions).unwrap();
            let mean = tape.dot_const(logp, &[1.0 / 3.0; 3]).unwrap();
            let grads = tape.backward(mean).unwrap();
            let g = binding.extract(&grads, p.net()).flatten();
            (tape.value(mean).as_scalar().unwrap(), g)
        };
        let report = grad_check(&f, &flat0, 1e-6, 1e-6);
        assert!(report.pass, "max rel err {} at {}", report.max_rel_err, report.worst_index);
    }

    #[test]
    fn sampled_actions_match_head_statistics() {
        let policy = small_gaussian(21);
        let state = [0.7, -0.3];
        let x = Tensor::new(vec![1, 2], state.to_vec()).unwrap();
        let heads = crate::numerics::forward(policy.net(), &x, None).unwrap();
        let mut rng = seeding::stream(&[77, 0]);
        let n = 20_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let ActionSample::Continuous(a) = policy.sample_action(&state, &mut rng) else {
                panic!("gaussian sample")
            };
            for j in 0..2 {
                sums[j] += a[j];
                sq[j] += a[j] * a[j];
            }
        }
        for j in 0..2 {
            let mu = heads.at2(0, j);
            let sigma = heads.at2(0, 2 + j).clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
            let mean = sums[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!((mean - mu).abs() < 4.0 * sigma / (n as f64).sqrt(), "dim {j}");
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "dim {j}");
        }
    }

    #[test]
    fn deterministic_action_is_mean_or_argmax() {
        let policy = small_gaussian(23);
        let state = [0.1, 0.9];
        let x = Tensor::new(vec![1, 2], state.to_vec()).unwrap();
        let heads = crate::numerics::forward(policy.net(), &x, None).unwrap();
        let ActionSample::Continuous(a) = policy.deterministic_action(&state) else {
            panic!("gaussian")
        };
        assert_eq!(a, heads.row(0)[..2].to_vec());

        let policy = small_categorical(29);
        let probs = policy.action_probabilities(&one_hot(&[1], 3)).unwrap();
        let ActionSample::Discrete(a) = policy.deterministic_action(&[0.0, 1.0, 0.0]) else {
            panic!("categorical")
        };
        let best = probs[0]
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(a, best);
    }

    #[test]
    fn cloning_concentrates_on_the_data() {
        // Single state, constant target action: the mean head should land on
        // the target and the spread should shrink below the initial one.
        let mut policy = small_gaussian(31);
        let states = Tensor::from_rows(&vec![vec![0.0, 0.0]; 16]).unwrap();
        let actions =
            ActionBatch::Continuous(Tensor::from_rows(&vec![vec![0.3, -0.2]; 16]).unwrap());
        let mut losses = Vec::new();
        bc_train(
            &mut policy,
            800,
            3e-3,
            |_| (states.clone(), actions.clone()),
            |_, loss| losses.push(loss),
        )
        .unwrap();
        let ActionSample::Continuous(a) = policy.deterministic_action(&[0.0, 0.0]) else {
            panic!("gaussian")
        };
        assert_abs_diff_eq!(a[0], 0.3, epsilon = 0.05);
        assert_abs_diff_eq!(a[1], -0.2, epsilon = 0.05);
        assert!(losses.last().unwrap() < &losses[0], "loss should fall");
    }

    #[test]
    fn cloning_matches_discrete_frequencies() {
        // State 0 always takes action 2; state 1 takes action 0.
        let mut policy = small_categorical(37);
        let states = one_hot(&[0, 1, 0, 1, 0, 0], 3);
        let actions = ActionBatch::Discrete(vec![2, 0, 2, 0, 2, 2]);
        bc_train(&mut policy, 600, 3e-3, |_| (states.clone(), actions.clone()), |_, _| {})
            .unwrap();
        let probs = policy.action_probabilities(&one_hot(&[0, 1], 3)).unwrap();
        assert!(probs[0][2] > 0.9, "state 0: {:?}", probs[0]);
        assert!(probs[1][0] > 0.9, "state 1: {:?}", probs[1]);
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut policy = small_gaussian(41);
        let states = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let bad = ActionBatch::Continuous(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        let err = bc_train(&mut policy, 3, 1e-3, |_| (states.clone(), bad.clone()), |_, _| {})
            .err()
            .expect("should fail");
        assert!(matches!(err, PolicyError::DivergedAtStep { step: 0, .. }), "{err}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let policy = small_gaussian(43);
        let states = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let wrong = ActionBatch::Discrete(vec![1]);
        assert!(policy.log_density(&states, &wrong).is_err());
        let wrong_dim = ActionBatch::Continuous(Tensor::from_rows(&[vec![0.0]]).unwrap());
        assert!(policy.log_density(&states, &wrong_dim).is_err());
        assert!(
            PolicyNet::gaussian(
                MlpParams::init(&[2, 4, 3], crate::numerics::Activation::Relu, 1).unwrap()
            )
            .is_err()
        );
    }
}
