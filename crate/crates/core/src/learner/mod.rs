//! Offline actor-critic learner: expectile value fitting, twin critics,
//! and advantage-weighted policy extraction, with a projection-adaptive
//! asymmetry level and a support-constrained policy objective.

mod losses;

pub use losses::{
    critic_loss_graph, extraction_weights, importance_ratios, policy_loss_graph, soft_update,
    tau_projection, value_loss_graph, ClipOrder, TauProjection,
};

use crate::datasets::{Container, DataKind, DatasetError, OfflineDataset};
use crate::envs::{EnvError, EnvKind};
use crate::numerics::{
    adam_step, forward, Activation, AdamHyper, AdamState, MlpParams, NumericsError, Tape, Tensor,
};
use crate::policies::{bc_train, one_hot, ActionBatch, ActionSample, PolicyError, PolicyNet};
use crate::seeding;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner config: {context}")]
    Config { context: String },
    #[error("bad training data: {context}")]
    Data { context: String },
    #[error("evaluation failed: {context}")]
    Eval { context: String },
    #[error("numerics failure: {0}")]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Training algorithm.
///
/// `ProjIql` fits values at the projection-adaptive asymmetry level and
/// extracts the policy with importance-weighted advantage weights. `Iql`
/// uses a fixed level and plain advantage weights. `Wbc` keeps the adaptive
/// level for value fitting but drops the importance ratios, leaving
/// advantage-weighted cloning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ProjIql,
    Iql,
    Wbc,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ProjIql => "proj-iql",
            Self::Iql => "iql",
            Self::Wbc => "wbc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "proj-iql" => Some(Self::ProjIql),
            "iql" => Some(Self::Iql),
            "wbc" => Some(Self::Wbc),
            _ => None,
        }
    }
}

/// Hyperparameters for [`train`]. `desk_default` fits the bundled toy
/// environments and finishes in minutes on one core.
#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub mode: Mode,
    pub seed: u64,
    pub gamma: f64,
    /// Fixed asymmetry level for `Mode::Iql`.
    pub tau: f64,
    /// Inverse temperature multiplying advantages in extraction weights.
    pub inv_temperature: f64,
    /// Cap on the exponentiated advantage weight.
    pub advantage_cap: f64,
    /// Learning rate for the value and critic nets and the behavior model.
    pub lr: f64,
    /// Learning rate for the learned policy, including its warm start.
    pub policy_lr: f64,
    /// Target-network step size per gradient step.
    pub polyak: f64,
    pub batch_size: usize,
    pub gradient_steps: u64,
    /// Cloning steps for the behavior density model.
    pub bc_steps: u64,
    /// Cloning warm-start steps for the learned policy.
    pub policy_bc_steps: u64,
    pub bc_batch_size: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub dropout: f64,
    pub twin_critics: bool,
    pub tau_clip_lo: f64,
    pub tau_clip_hi: f64,
    pub clip_order: ClipOrder,
    /// Floor on behavior densities in importance ratios.
    pub density_floor: f64,
    /// Log standard deviation clamp range for Gaussian policy heads.
    pub log_std_bounds: (f64, f64),
    /// Evaluate every this many gradient steps; 0 disables evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl LearnerConfig {
    pub fn desk_default(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            gamma: 0.95,
            tau: 0.7,
            inv_temperature: 10.0,
            advantage_cap: 100.0,
            lr: 3e-4,
            policy_lr: 3e-4,
            polyak: 5e-3,
            batch_size: 128,
            gradient_steps: 20_000,
            bc_steps: 5_000,
            policy_bc_steps: 300,
            bc_batch_size: 128,
            hidden_width: 64,
            hidden_depth: 2,
            dropout: 0.0,
            twin_critics: true,
            tau_clip_lo: 0.5,
            tau_clip_hi: 1.0,
            clip_order: ClipOrder::ClipThenMean,
            density_floor: 1e-8,
            log_std_bounds: (-1.9, 2.0),
            eval_every: 500,
            eval_episodes: 10,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |context: String| Err(LearnerError::Config { context });
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("discount {} outside (0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("asymmetry level {} outside (0, 1)", self.tau));
        }
        if !(self.inv_temperature > 0.0 && self.inv_temperature.is_finite()) {
            return bad(format!("inverse temperature {} must be positive", self.inv_temperature));
        }
        if !(self.advantage_cap > 1.0 && self.advantage_cap.is_finite()) {
            return bad(format!("advantage cap {} must exceed 1", self.advantage_cap));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.policy_lr > 0.0 && self.policy_lr.is_finite()) {
            return bad(format!("policy learning rate {} must be positive", self.policy_lr));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad(format!("target step {} outside (0, 1]", self.polyak));
        }
        if self.batch_size == 0 || self.bc_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.hidden_width == 0 || self.hidden_depth == 0 {
            return bad("network width and depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0 < self.tau_clip_lo
            && self.tau_clip_lo <= self.tau_clip_hi
            && self.tau_clip_hi <= 1.0)
        {
            return bad(format!(
                "clip interval [{}, {}] is not inside (0, 1]",
                self.tau_clip_lo, self.tau_clip_hi
            ));
        }
        if !(self.density_floor > 0.0) {
            return bad(format!("density floor {} must be positive", self.density_floor));
        }
        let (ls_lo, ls_hi) = self.log_std_bounds;
        if !(ls_lo.is_finite() && ls_hi.is_finite() && ls_lo <= ls_hi) {
            return bad(format!("log-std bounds [{ls_lo}, {ls_hi}] are not a finite interval"));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return bad("evaluation needs at least one episode".into());
        }
        Ok(())
    }
}

/// One training-step record; evaluation fields hold values only on steps
/// where a rollout ran.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub tau: f64,
    pub loss_v: f64,
    pub loss_q: f64,
    pub loss_pi: f64,
    pub eval_return: Option<f64>,
    pub eval_success: Option<f64>,
}

/// Writes metrics rows as CSV under the fixed header
/// `step,tau_proj,loss_v,loss_q,loss_pi,eval_return,eval_success`.
pub fn write_metrics_csv<W: io::Write>(rows: &[MetricsRow], w: &mut W) -> io::Result<()> {
    writeln!(w, "step,tau_proj,loss_v,loss_q,loss_pi,eval_return,eval_success")?;
    for r in rows {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.tau,
            r.loss_v,
            r.loss_q,
            r.loss_pi,
            opt(r.eval_return),
            opt(r.eval_success)
        )?;
    }
    Ok(())
}

/// Everything `train` produces: final networks and the per-step metrics.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: LearnerConfig,
    pub kind: DataKind,
    pub policy: PolicyNet,
    pub behavior: PolicyNet,
    pub v: MlpParams,
    pub q1: MlpParams,
    pub q2: Option<MlpParams>,
    pub q1_target: MlpParams,
    pub q2_target: Option<MlpParams>,
    pub metrics: Vec<MetricsRow>,
}

/// Featurization of dataset rows for the networks: tabular states and
/// actions become one-hot rows, continuous ones pass through.
#[derive(Debug, Clone, Copy)]
struct Feats {
    kind: DataKind,
}

impl Feats {
    fn state_width(&self) -> usize {
        match self.kind {
            DataKind::Tabular { n_states, .. } => n_states,
            DataKind::Continuous { state_dim, .. } => state_dim,
        }
    }

    fn action_width(&self) -> usize {
        match self.kind {
            DataKind::Tabular { n_actions, .. } => n_actions,
            DataKind::Continuous { action_dim, .. } => action_dim,
        }
    }

    fn policy_out(&self) -> usize {
        match self.kind {
            DataKind::Tabular { n_actions, .. } => n_actions,
            DataKind::Continuous { action_dim, .. } => 2 * action_dim,
        }
    }

    fn states(&self, ds: &OfflineDataset, idx: &[usize], next: bool) -> Tensor {
        match self.kind {
            DataKind::Tabular { n_states, .. } => {
                let ids: Vec<usize> = idx
                    .iter()
                    .map(|&i| {
                        let row = if next { ds.next_state_row(i) } else { ds.state_row(i) };
                        row[0] as usize
                    })
                    .collect();
                one_hot(&ids, n_states)
            }
            DataKind::Continuous { state_dim, .. } => {
                let mut data = Vec::with_capacity(idx.len() * state_dim);
                for &i in idx {
                    let row = if next { ds.next_state_row(i) } else { ds.state_row(i) };
                    data.extend_from_slice(row);
                }
                Tensor::new(vec![idx.len(), state_dim], data).expect("sized rows")
            }
        }
    }

    fn actions(&self, ds: &OfflineDataset, idx: &[usize]) -> ActionBatch {
        match self.kind {
            DataKind::Tabular { .. } => {
                ActionBatch::Discrete(idx.iter().map(|&i| ds.action_row(i)[0] as usize).collect())
            }
            DataKind::Continuous { action_dim, .. } => {
                let mut data = Vec::with_capacity(idx.len() * action_dim);
                for &i in idx {
                    data.extend_from_slice(ds.action_row(i));
                }
                ActionBatch::Continuous(
                    Tensor::new(vec![idx.len(), action_dim], data).expect("sized rows"),
                )
            }
        }
    }

    /// Concatenated state and action features, the critic input.
    fn q_input(&self, states: &Tensor, actions: &ActionBatch) -> Tensor {
        let n = states.rows();
        let aw = self.action_width();
        let mut data = Vec::with_capacity(n * (states.cols() + aw));
        for r in 0..n {
            data.extend_from_slice(states.row(r));
            match actions {
                ActionBatch::Discrete(ids) => {
                    let mut hot = vec![0.0; aw];
                    hot[ids[r]] = 1.0;
                    data.extend_from_slice(&hot);
                }
                ActionBatch::Continuous(t) => data.extend_from_slice(t.row(r)),
            }
        }
        Tensor::new(vec![n, states.cols() + aw], data).expect("sized rows")
    }
}

fn net_dims(input: usize, width: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(width).take(depth));
    dims.push(output);
    dims
}

fn min_forward(
    q1: &MlpParams,
    q2: Option<&MlpParams>,
    inputs: &Tensor,
) -> Result<Vec<f64>, LearnerError> {
    let a = forward(q1, inputs, None)?;
    let mut out: Vec<f64> = a.data().to_vec();
    if let Some(q2) = q2 {
        let b = forward(q2, inputs, None)?;
        for (o, bi) in out.iter_mut().zip(b.data()) {
            *o = o.min(*bi);
        }
    }
    Ok(out)
}

/// Runs behavior cloning and the offline actor-critic loop on `dataset`,
/// evaluating in `eval_env` when given. Fully deterministic in
/// `config.seed`: batches, initialization, and evaluation all draw from
/// labeled streams derived from it.
pub fn train(
    config: &LearnerConfig,
    dataset: &OfflineDataset,
    eval_env: Option<&EnvKind>,
) -> Result<TrainState, LearnerError> {
    config.validate()?;
    let kind = dataset.kind();
    let feats = Feats { kind };
    let sw = feats.state_width();
    let aw = feats.action_width();

    let policy_dims = net_dims(sw, config.hidden_width, config.hidden_depth, feats.policy_out());
    let critic_dims = net_dims(sw + aw, config.hidden_width, config.hidden_depth, 1);
    let value_dims = net_dims(sw, config.hidden_width, config.hidden_depth, 1);

    let make_policy = |net: MlpParams| -> Result<PolicyNet, LearnerError> {
        Ok(match kind {
            DataKind::Tabular { .. } => PolicyNet::categorical(net)?,
            DataKind::Continuous { .. } => PolicyNet::gaussian(net)?
                .with_log_std_bounds(config.log_std_bounds.0, config.log_std_bounds.1)?,
        })
    };

    let net_seed = |label: u64| seeding::fold_seed(&[config.seed, 0x6e65_74, label]);
    let behavior_net = MlpParams::init(&policy_dims, Activation::Relu, net_seed(0))?
        .with_dropout(config.dropout)?;
    let mut behavior = make_policy(behavior_net)?;

    // Behavior cloning for the density model.
    let bc_seed = seeding::fold_seed(&[config.seed, 0x6263]);
    bc_train(
        &mut behavior,
        config.bc_steps,
        config.lr,
        |step| {
            let idx = dataset.sample_indices(bc_seed, step, config.bc_batch_size);
            (feats.states(dataset, &idx, false), feats.actions(dataset, &idx))
        },
        |_, _| {},
    )?;

    // The learned policy gets its own net and a short cloning warm start.
    // The warm start must stay partial: the policy needs broad coverage of
    // the data actions so the ratio weighting in the main loop sees every
    // sample, but a full clone would start it at peak behavior alignment
    // and leave the projection nowhere to climb. The behavior model above,
    // by contrast, must stay an accurate density, hence its longer budget.
    let policy_net = MlpParams::init(&policy_dims, Activation::Relu, net_seed(4))?
        .with_dropout(config.dropout)?;
    let mut policy = make_policy(policy_net)?;
    let policy_bc_seed = seeding::fold_seed(&[config.seed, 0x7062_63]);
    bc_train(
        &mut policy,
        config.policy_bc_steps,
        config.policy_lr,
        |step| {
            let idx = dataset.sample_indices(policy_bc_seed, step, config.bc_batch_size);
            (feats.states(dataset, &idx, false), feats.actions(dataset, &idx))
        },
        |_, _| {},
    )?;

    let mut v = MlpParams::init(&value_dims, Activation::Relu, net_seed(1))?
        .with_dropout(config.dropout)?;
    let mut q1 = MlpParams::init(&critic_dims, Activation::Relu, net_seed(2))?
        .with_dropout(config.dropout)?;
    let mut q2 = if config.twin_critics {
        Some(
            MlpParams::init(&critic_dims, Activation::Relu, net_seed(3))?
                .with_dropout(config.dropout)?,
        )
    } else {
        None
    };
    let mut q1_target = q1.clone();
    let mut q2_target = q2.clone();

    let hyper = AdamHyper::default();
    let mut adam_v = AdamState::new(&v);
    let mut adam_q1 = AdamState::new(&q1);
    let mut adam_q2 = q2.as_ref().map(AdamState::new);
    let mut adam_pi = AdamState::new(policy.net());

    let main_seed = seeding::fold_seed(&[config.seed, 0x6d61_696e]);
    let mut metrics = Vec::with_capacity(config.gradient_steps as usize);

    for step in 0..config.gradient_steps {
        let idx = dataset.sample_indices(main_seed, step, config.batch_size);
        let states = feats.states(dataset, &idx, false);
        let actions = feats.actions(dataset, &idx);
        let next_states = feats.states(dataset, &idx, true);
        let rewards: Vec<f64> = idx.iter().map(|&i| ds_reward(dataset, i)).collect();
        let dones: Vec<f64> = idx.iter().map(|&i| dataset.done(i)).collect();

        // Asymmetry level from the pre-update policies.
        let tau = match config.mode {
            Mode::Iql => config.tau,
            Mode::ProjIql | Mode::Wbc => {
                tau_projection(
                    &policy,
                    &behavior,
                    &states,
                    &actions,
                    config.tau_clip_lo,
                    config.tau_clip_hi,
                    config.clip_order,
                )?
                .tau
            }
        };

        // Value step toward detached target-critic evaluations.
        let q_in = feats.q_input(&states, &actions);
        let q_hat = min_forward(&q1_target, q2_target.as_ref(), &q_in)?;
        let loss_v = {
            let mut tape = Tape::new();
            let (loss, binding) = value_loss_graph(&mut tape, &v, &states, &q_hat, tau)?;
            let grads = tape.backward(loss)?;
            let g = binding.extract(&grads, &v);
            adam_step(&mut v, &g, &mut adam_v, config.lr, &hyper)?;
            tape.value(loss).as_scalar()?
        };

        // Critic step toward one-step returns bootstrapped through the
        // updated value net.
        let v_next = forward(&v, &next_states, None)?;
        let targets: Vec<f64> = (0..idx.len())
            .map(|i| rewards[i] + config.gamma * (1.0 - dones[i]) * v_next.at2(i, 0))
            .collect();
        let mut loss_q = {
            let mut tape = Tape::new();
            let (loss, binding) = critic_loss_graph(&mut tape, &q1, &q_in, &targets)?;
            let grads = tape.backward(loss)?;
            let g = binding.extract(&grads, &q1);
            adam_step(&mut q1, &g, &mut adam_q1, config.lr, &hyper)?;
            tape.value(loss).as_scalar()?
        };
        if let (Some(q2), Some(adam_q2)) = (q2.as_mut(), adam_q2.as_mut()) {
            let mut tape = Tape::new();
            let (loss, binding) = critic_loss_graph(&mut tape, q2, &q_in, &targets)?;
            let grads = tape.backward(loss)?;
            let g = binding.extract(&grads, q2);
            adam_step(q2, &g, adam_q2, config.lr, &hyper)?;
            loss_q = 0.5 * (loss_q + tape.value(loss).as_scalar()?);
        }

        // Policy step: advantage-weighted log likelihood, with detached
        // importance ratios under the projection-adaptive mode.
        let v_now = forward(&v, &states, None)?;
        let advantages: Vec<f64> =
            (0..idx.len()).map(|i| q_hat[i] - v_now.at2(i, 0)).collect();
        let ratios = match config.mode {
            Mode::ProjIql => {
                let log_phi = policy.log_density(&states, &actions)?;
                let log_beta = behavior.log_density(&states, &actions)?;
                Some(importance_ratios(&log_phi, &log_beta, config.density_floor))
            }
            Mode::Iql | Mode::Wbc => None,
        };
        let weights = extraction_weights(
            &advantages,
            ratios.as_deref(),
            config.inv_temperature,
            config.advantage_cap,
        );
        let loss_pi = {
            let mut tape = Tape::new();
            let (loss, binding) = policy_loss_graph(&mut tape, &policy, &states, &actions, &weights)?;
            let grads = tape.backward(loss)?;
            let g = binding.extract(&grads, policy.net());
            adam_step(policy.net_mut(), &g, &mut adam_pi, config.policy_lr, &hyper)?;
            tape.value(loss).as_scalar()?
        };

        soft_update(&mut q1_target, &q1, config.polyak);
        if let (Some(t), Some(o)) = (q2_target.as_mut(), q2.as_ref()) {
            soft_update(t, o, config.polyak);
        }

        let mut row = MetricsRow {
            step: step + 1,
            tau,
            loss_v,
            loss_q,
            loss_pi,
            eval_return: None,
            eval_success: None,
        };
        let eval_due = config.eval_every > 0
            && ((step + 1) % config.eval_every == 0 || step + 1 == config.gradient_steps);
        if eval_due {
            if let Some(env) = eval_env {
                let eval_seed = seeding::fold_seed(&[config.seed, 0x6576_616c, step]);
                let result =
                    evaluate(&policy, env, config.eval_episodes, config.gamma, eval_seed)?;
                row.eval_return = Some(result.mean_return);
                row.eval_success = Some(result.success_rate);
            }
        }
        metrics.push(row);
    }

    Ok(TrainState {
        config: config.clone(),
        kind,
        policy,
        behavior,
        v,
        q1,
        q2,
        q1_target,
        q2_target,
        metrics,
    })
}

fn ds_reward(ds: &OfflineDataset, i: usize) -> f64 {
    ds.reward(i)
}

/// Deterministic-action rollout statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Mean discounted return.
    pub mean_return: f64,
    pub std_return: f64,
    /// Fraction of episodes that reached the goal.
    pub success_rate: f64,
}

/// Rolls out the policy's deterministic action (mean or argmax) for
/// `episodes` episodes and reports discounted returns and success rate.
/// Environment stochasticity (slip, start jitter) draws from streams keyed
/// by `(seed, episode)`.
pub fn evaluate(
    policy: &PolicyNet,
    env: &EnvKind,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<EvalResult, LearnerError> {
    if episodes == 0 {
        return Err(LearnerError::Eval { context: "zero evaluation episodes".into() });
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    match env {
        EnvKind::Grid { maze, max_steps, .. } => {
            let n_states = maze.mdp.n_states();
            if policy.net().in_dim() != n_states {
                return Err(LearnerError::Eval {
                    context: format!(
                        "policy expects {} state features, maze has {n_states} states",
                        policy.net().in_dim()
                    ),
                });
            }
            for e in 0..episodes {
                let mut rng = seeding::stream(&[seed, 0x6576, e as u64]);
                let mut s = maze.mdp.sample_initial(&mut rng);
                let mut ret = 0.0;
                let mut disc = 1.0;
                for _ in 0..*max_steps {
                    let features = one_hot(&[s], n_states);
                    let ActionSample::Discrete(a) =
                        policy.deterministic_action(features.row(0))
                    else {
                        return Err(LearnerError::Eval {
                            context: "grid evaluation needs a categorical policy".into(),
                        });
                    };
                    let next = maze.mdp.sample_next(s, a, &mut rng);
                    let entered = next == maze.goal_state() && s != maze.goal_state();
                    if entered {
                        ret += disc;
                        successes += 1;
                        break;
                    }
                    disc *= gamma;
                    s = next;
                }
                returns.push(ret);
            }
        }
        EnvKind::Point(point) => {
            if policy.net().in_dim() != 2 {
                return Err(LearnerError::Eval {
                    context: format!(
                        "policy expects {} state features, point maze has 2",
                        policy.net().in_dim()
                    ),
                });
            }
            for e in 0..episodes {
                let mut rng = seeding::stream(&[seed, 0x6576, e as u64]);
                let mut pos = point.reset(&mut rng);
                let mut ret = 0.0;
                let mut disc = 1.0;
                for _ in 0..point.max_steps() {
                    let ActionSample::Continuous(a) = policy.deterministic_action(&pos) else {
                        return Err(LearnerError::Eval {
                            context: "point evaluation needs a gaussian policy".into(),
                        });
                    };
                    let (next, reward, done) = point.step(pos, [a[0], a[1]]);
                    ret += disc * reward;
                    if done {
                        successes += 1;
                        break;
                    }
                    disc *= gamma;
                    pos = next;
                }
                returns.push(ret);
            }
        }
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
        success_rate: successes as f64 / n,
    })
}

/// Saves one policy network with enough metadata to reload it.
pub fn save_policy(policy: &PolicyNet, kind: DataKind, path: &Path) -> Result<(), LearnerError> {
    let mut c = Container::new();
    c.set_meta("content", "policy");
    c.set_meta("policy_kind", policy.kind_name());
    c.set_meta("data_kind", kind.name());
    match kind {
        DataKind::Tabular { n_states, n_actions } => {
            c.set_meta("n_states", &n_states.to_string());
            c.set_meta("n_actions", &n_actions.to_string());
        }
        DataKind::Continuous { state_dim, action_dim } => {
            c.set_meta("state_dim", &state_dim.to_string());
            c.set_meta("action_dim", &action_dim.to_string());
        }
    }
    let dims: Vec<String> = net_dims_of(policy.net()).iter().map(|d| d.to_string()).collect();
    c.set_meta("dims", &dims.join(","));
    c.add_block("params", vec![policy.net().param_count()], policy.net().flatten())?;
    c.save(path)?;
    Ok(())
}

fn net_dims_of(net: &MlpParams) -> Vec<usize> {
    let mut dims = vec![net.in_dim()];
    for layer in net.layers() {
        dims.push(layer.weight.rows());
    }
    dims
}

/// Loads a policy saved by [`save_policy`].
pub fn load_policy(path: &Path) -> Result<(PolicyNet, DataKind), LearnerError> {
    let c = Container::load(path)?;
    let parse = |key: &str| -> Result<usize, LearnerError> {
        c.require_meta(key)?
            .parse::<usize>()
            .map_err(|_| LearnerError::Data { context: format!("{key} is not an integer") })
    };
    let kind = match c.require_meta("data_kind")? {
        "tabular" => DataKind::Tabular { n_states: parse("n_states")?, n_actions: parse("n_actions")? },
        "continuous" => {
            DataKind::Continuous { state_dim: parse("state_dim")?, action_dim: parse("action_dim")? }
        }
        other => {
            return Err(LearnerError::Data { context: format!("unknown data kind {other:?}") })
        }
    };
    let dims: Vec<usize> = c
        .require_meta("dims")?
        .split(',')
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| LearnerError::Data { context: format!("bad dimension {s:?}") })
        })
        .collect::<Result<_, _>>()?;
    let (_, flat) = c.require_block("params")?;
    let template = MlpParams::init(&dims, Activation::Relu, 0)?;
    let net = template.unflatten(flat)?;
    let policy = match c.require_meta("policy_kind")? {
        "gaussian" => PolicyNet::gaussian(net)?,
        "categorical" => PolicyNet::categorical(net)?,
        other => {
            return Err(LearnerError::Data { context: format!("unknown policy kind {other:?}") })
        }
    };
    Ok((policy, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_gridmaze, rollout, BehaviorPolicySpec, MazeLayout, CORRIDOR_1X6};
    use approx::assert_abs_diff_eq;

    fn corridor_setup(epsilon: f64) -> (EnvKind, OfflineDataset) {
        let layout = MazeLayout::parse(CORRIDOR_1X6).unwrap();
        let maze = build_gridmaze(&layout, 0.9, 0.0).unwrap();
        let env = EnvKind::Grid { maze, max_steps: 40, exploring_starts: true };
        let spec = BehaviorPolicySpec::EpsilonGreedyOracle { epsilon };
        let trajs = rollout(&env, &spec, 150, 91).unwrap();
        let ds = OfflineDataset::from_trajectories(
            DataKind::Tabular { n_states: 6, n_actions: 4 },
            &trajs,
        )
        .unwrap();
        (env, ds)
    }

    fn tiny_config(mode: Mode) -> LearnerConfig {
        let mut c = LearnerConfig::desk_default(mode);
        c.gamma = 0.9;
        c.hidden_width = 16;
        c.batch_size = 32;
        c.bc_batch_size = 32;
        c.bc_steps = 150;
        c.gradient_steps = 60;
        c.eval_every = 30;
        c.eval_episodes = 4;
        c
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = LearnerConfig::desk_default(Mode::Iql);
        assert!(c.validate().is_ok());
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        c.gamma = 0.99;
        c.tau_clip_lo = 0.9;
        c.tau_clip_hi = 0.6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_gradient_steps_return_the_warm_started_policy() {
        // With no main-loop steps the policy is exactly the cloning warm
        // start: main-loop hyperparameters cannot influence it, while any
        // gradient step moves it.
        let (_, ds) = corridor_setup(0.5);
        let mut config = tiny_config(Mode::ProjIql);
        config.gradient_steps = 0;
        let state = train(&config, &ds, None).unwrap();
        assert!(state.metrics.is_empty());

        let mut hotter = config.clone();
        hotter.inv_temperature = 99.0;
        hotter.tau_clip_lo = 0.9;
        hotter.tau_clip_hi = 0.9;
        let same = train(&hotter, &ds, None).unwrap();
        assert_eq!(state.policy.net().flatten(), same.policy.net().flatten());

        let mut one_step = config.clone();
        one_step.gradient_steps = 1;
        let moved = train(&one_step, &ds, None).unwrap();
        assert_ne!(state.policy.net().flatten(), moved.policy.net().flatten());
    }

    #[test]
    fn training_is_deterministic() {
        let (env, ds) = corridor_setup(0.5);
        let config = tiny_config(Mode::ProjIql);
        let a = train(&config, &ds, Some(&env)).unwrap();
        let b = train(&config, &ds, Some(&env)).unwrap();
        assert_eq!(a.policy.net().flatten(), b.policy.net().flatten());
        assert_eq!(a.v.flatten(), b.v.flatten());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn pinned_projection_aligns_value_critic_and_baseline_updates() {
        // Pinning the clip interval to the fixed level makes every mode run
        // the same value and critic updates; the two ratio-free modes also
        // share the policy update, while the ratio-weighted mode only
        // diverges in the policy step.
        let (_, ds) = corridor_setup(0.5);
        let mut base = tiny_config(Mode::Iql);
        base.gradient_steps = 1;
        base.tau = 0.7;
        base.tau_clip_lo = 0.7;
        base.tau_clip_hi = 0.7;
        // Clamping after the mean pins the level to exactly 0.7; clamping
        // before would leave the mean of 32 clipped copies one ulp off.
        base.clip_order = ClipOrder::MeanThenClip;
        base.eval_every = 0;
        let mut proj = base.clone();
        proj.mode = Mode::ProjIql;
        let mut wbc = base.clone();
        wbc.mode = Mode::Wbc;

        let s_iql = train(&base, &ds, None).unwrap();
        let s_proj = train(&proj, &ds, None).unwrap();
        let s_wbc = train(&wbc, &ds, None).unwrap();
        assert_eq!(s_iql.policy.net().flatten(), s_wbc.policy.net().flatten());
        assert_eq!(s_iql.v.flatten(), s_proj.v.flatten());
        assert_eq!(s_iql.v.flatten(), s_wbc.v.flatten());
        assert_eq!(s_iql.q1.flatten(), s_proj.q1.flatten());
        assert_abs_diff_eq!(s_proj.metrics[0].tau, 0.7);
        assert_abs_diff_eq!(s_wbc.metrics[0].tau, 0.7);
    }

    #[test]
    fn learner_improves_on_noisy_corridor_data() {
        let (env, ds) = corridor_setup(0.6);
        let mut config = tiny_config(Mode::Iql);
        config.gradient_steps = 500;
        config.bc_steps = 250;
        config.eval_every = 250;
        let state = train(&config, &ds, Some(&env)).unwrap();
        let last = state.metrics.last().unwrap();
        assert!(last.eval_success.is_some());
        assert!(
            last.eval_success.unwrap() >= 0.75,
            "corridor should be solved, got {:?}",
            last.eval_success
        );
        let first_v = state.metrics[0].loss_v;
        let last_v = state.metrics.last().unwrap().loss_v;
        assert!(last_v.is_finite() && first_v.is_finite());
    }

    #[test]
    fn metrics_csv_has_pinned_header_and_sparse_eval_columns() {
        let (env, ds) = corridor_setup(0.5);
        let config = tiny_config(Mode::ProjIql);
        let state = train(&config, &ds, Some(&env)).unwrap();
        let mut out = Vec::new();
        write_metrics_csv(&state.metrics, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,tau_proj,loss_v,loss_q,loss_pi,eval_return,eval_success"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 60);
        // Eval on steps 30 and 60 only.
        for (i, row) in rows.iter().enumerate() {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 7, "row {i}");
            let has_eval = !fields[5].is_empty();
            assert_eq!(has_eval, (i + 1) % 30 == 0, "row {i}: {row}");
        }
    }

    #[test]
    fn tau_column_tracks_mode() {
        let (_, ds) = corridor_setup(0.5);
        let mut config = tiny_config(Mode::Iql);
        config.gradient_steps = 5;
        config.eval_every = 0;
        config.tau = 0.66;
        let state = train(&config, &ds, None).unwrap();
        assert!(state.metrics.iter().all(|r| r.tau == 0.66));

        config.mode = Mode::ProjIql;
        let state = train(&config, &ds, None).unwrap();
        assert!(state.metrics.iter().all(|r| (0.5..=1.0).contains(&r.tau)));
    }

    #[test]
    fn policy_checkpoints_roundtrip() {
        let (_, ds) = corridor_setup(0.5);
        let mut config = tiny_config(Mode::ProjIql);
        config.gradient_steps = 10;
        config.eval_every = 0;
        let state = train(&config, &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        save_policy(&state.policy, state.kind, &path).unwrap();
        let (loaded, kind) = load_policy(&path).unwrap();
        assert_eq!(kind, state.kind);
        assert_eq!(loaded.net().flatten(), state.policy.net().flatten());
        assert_eq!(loaded.kind_name(), "categorical");
    }

    #[test]
    fn evaluation_rejects_mismatched_policy() {
        let (env, _) = corridor_setup(0.5);
        let net = MlpParams::init(&[3, 8, 4], Activation::Relu, 1).unwrap();
        let policy = PolicyNet::categorical(net).unwrap();
        let err = evaluate(&policy, &env, 2, 0.9, 0).err().expect("should fail");
        assert!(err.to_string().contains("state features"), "{err}");
    }
}
