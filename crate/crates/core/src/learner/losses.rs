//! Loss graphs and batch statistics for the offline learner.

use super::LearnerError;
use crate::numerics::{forward_on_tape, MlpBinding, MlpParams, NodeId, Tape, Tensor};
use crate::policies::{ActionBatch, PolicyNet};

/// Whether per-sample projected asymmetry levels are clipped before or
/// after batch averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipOrder {
    ClipThenMean,
    MeanThenClip,
}

/// Result of projecting the learned policy onto the behavior density.
#[derive(Debug, Clone, Copy)]
pub struct TauProjection {
    /// Batch asymmetry level, inside the clip interval.
    pub tau: f64,
    /// Least-squares coefficient `<beta, phi> / <phi, phi>` over the batch
    /// density vectors; exactly 1 when the policies agree on the batch.
    pub coefficient: f64,
    /// Mean behavior density of the batch, a support diagnostic.
    pub mean_behavior_density: f64,
}

/// Projects the current policy's batch density vector onto the behavior
/// policy's and turns it into an asymmetry level per sample,
/// `tau_i = coefficient * phi_i`, clipped into `[clip_lo, clip_hi]` and
/// averaged. Both density vectors are detached evaluations.
pub fn tau_projection(
    policy: &PolicyNet,
    behavior: &PolicyNet,
    states: &Tensor,
    actions: &ActionBatch,
    clip_lo: f64,
    clip_hi: f64,
    order: ClipOrder,
) -> Result<TauProjection, LearnerError> {
    if !(0.0 < clip_lo && clip_lo <= clip_hi && clip_hi <= 1.0) {
        return Err(LearnerError::Config {
            context: format!("clip interval [{clip_lo}, {clip_hi}] is not inside (0, 1]"),
        });
    }
    let log_beta = behavior.log_density(states, actions)?;
    let log_phi = policy.log_density(states, actions)?;
    let beta: Vec<f64> = log_beta.iter().map(|l| l.exp()).collect();
    let phi: Vec<f64> = log_phi.iter().map(|l| l.exp()).collect();
    let n = beta.len();
    let mut dot_bp = 0.0;
    let mut dot_pp = 0.0;
    let mut sum_beta = 0.0;
    for i in 0..n {
        dot_bp += beta[i] * phi[i];
        dot_pp += phi[i] * phi[i];
        sum_beta += beta[i];
    }
    let coefficient = if dot_pp > 0.0 { dot_bp / dot_pp } else { 0.0 };
    let tau = match order {
        ClipOrder::ClipThenMean => {
            let mut acc = 0.0;
            for p in &phi {
                acc += (coefficient * p).clamp(clip_lo, clip_hi);
            }
            acc / n as f64
        }
        ClipOrder::MeanThenClip => {
            let mut acc = 0.0;
            for p in &phi {
                acc += coefficient * p;
            }
            (acc / n as f64).clamp(clip_lo, clip_hi)
        }
    };
    Ok(TauProjection { tau, coefficient, mean_behavior_density: sum_beta / n as f64 })
}

/// Expectile regression loss of the value net toward detached critic
/// evaluations: mean of `|tau - 1(u < 0)| * u^2` with `u = q_hat - V(s)`.
/// The side weights are frozen at the forward pass, which is exactly the
/// subgradient of the asymmetric loss.
pub fn value_loss_graph(
    tape: &mut Tape,
    v: &MlpParams,
    states: &Tensor,
    q_hat: &[f64],
    tau: f64,
) -> Result<(NodeId, MlpBinding), LearnerError> {
    let n = states.rows();
    if q_hat.len() != n {
        return Err(LearnerError::Data {
            context: format!("{} critic evaluations for {} states", q_hat.len(), n),
        });
    }
    let x = tape.constant(states.clone())?;
    let (v_out, binding) = forward_on_tape(tape, v, x, None)?;
    let target = tape.constant(Tensor::new(vec![n, 1], q_hat.to_vec())?)?;
    let u = tape.sub(target, v_out)?;
    let u_vals = tape.value(u).data().to_vec();
    let weights: Vec<f64> = u_vals
        .iter()
        .map(|&ui| {
            let side = if ui < 0.0 { 1.0 - tau } else { tau };
            side / n as f64
        })
        .collect();
    let sq = tape.square(u)?;
    // The squared residuals are a single column; row_sum flattens them to
    // rank one for the weighted dot.
    let flat = tape.row_sum(sq)?;
    let loss = tape.dot_const(flat, &weights)?;
    Ok((loss, binding))
}

/// Mean squared Bellman error of one critic against detached targets on
/// concatenated state-action features.
pub fn critic_loss_graph(
    tape: &mut Tape,
    q: &MlpParams,
    inputs: &Tensor,
    targets: &[f64],
) -> Result<(NodeId, MlpBinding), LearnerError> {
    let n = inputs.rows();
    if targets.len() != n {
        return Err(LearnerError::Data {
            context: format!("{} targets for {} inputs", targets.len(), n),
        });
    }
    let x = tape.constant(inputs.clone())?;
    let (q_out, binding) = forward_on_tape(tape, q, x, None)?;
    let t = tape.constant(Tensor::new(vec![n, 1], targets.to_vec())?)?;
    let diff = tape.sub(t, q_out)?;
    let sq = tape.square(diff)?;
    let loss = tape.mean_all(sq)?;
    Ok((loss, binding))
}

/// Weighted negative log likelihood: `-(1/n) * sum_i weights_i * log pi(a_i|s_i)`.
/// The weights are detached; only the log density carries gradients.
pub fn policy_loss_graph(
    tape: &mut Tape,
    policy: &PolicyNet,
    states: &Tensor,
    actions: &ActionBatch,
    weights: &[f64],
) -> Result<(NodeId, MlpBinding), LearnerError> {
    let n = states.rows();
    if weights.len() != n {
        return Err(LearnerError::Data {
            context: format!("{} weights for {} samples", weights.len(), n),
        });
    }
    let (logp, binding) = policy.log_density_graph(tape, states, actions)?;
    let scaled: Vec<f64> = weights.iter().map(|w| w / n as f64).collect();
    let weighted = tape.dot_const(logp, &scaled)?;
    let loss = tape.neg(weighted)?;
    Ok((loss, binding))
}

/// Per-sample policy extraction weights: capped exponentiated advantages,
/// optionally multiplied by self-normalized importance ratios.
///
/// The exponential is evaluated in log space against the cap, so large
/// advantages saturate at `cap` without overflowing. Ratios are normalized
/// to mean one across the batch.
pub fn extraction_weights(
    advantages: &[f64],
    ratios: Option<&[f64]>,
    inv_temperature: f64,
    cap: f64,
) -> Vec<f64> {
    let ln_cap = cap.ln();
    let mut weights: Vec<f64> = advantages
        .iter()
        .map(|&a| {
            let l = a * inv_temperature;
            if l >= ln_cap {
                cap
            } else {
                l.exp()
            }
        })
        .collect();
    if let Some(r) = ratios {
        let n = r.len() as f64;
        let total: f64 = r.iter().sum();
        if total > 0.0 {
            let scale = n / total;
            for (w, ri) in weights.iter_mut().zip(r) {
                *w *= ri * scale;
            }
        }
    }
    weights
}

/// Self-normalized importance ratios `phi_i / max(beta_i, floor)`.
pub fn importance_ratios(log_phi: &[f64], log_beta: &[f64], floor: f64) -> Vec<f64> {
    log_phi
        .iter()
        .zip(log_beta)
        .map(|(lp, lb)| lp.exp() / lb.exp().max(floor))
        .collect()
}

/// Polyak averaging of target parameters toward online ones:
/// `target = (1 - rate) * target + rate * online`.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, rate: f64) {
    for (tl, ol) in target.layers_mut().iter_mut().zip(online.layers()) {
        for (t, o) in tl.weight.data_mut().iter_mut().zip(ol.weight.data()) {
            *t = (1.0 - rate) * *t + rate * o;
        }
        for (t, o) in tl.bias.data_mut().iter_mut().zip(ol.bias.data()) {
            *t = (1.0 - rate) * *t + rate * o;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Activation};
    use crate::policies::one_hot;
    use approx::assert_abs_diff_eq;

    fn gaussian_pair(seed: u64) -> (PolicyNet, PolicyNet) {
        let net = MlpParams::init(&[2, 8, 4], Activation::Relu, seed).unwrap();
        let policy = PolicyNet::gaussian(net).unwrap();
        (policy.clone(), policy)
    }

    #[test]
    fn identical_policies_project_with_unit_coefficient() {
        let (policy, behavior) = gaussian_pair(3);
        let states = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.5, 1.0], vec![0.0, 0.0]]).unwrap();
        let actions = ActionBatch::Continuous(
            Tensor::from_rows(&[vec![0.3, 0.0], vec![0.1, 0.1], vec![-0.2, 0.4]]).unwrap(),
        );
        let proj = tau_projection(
            &policy,
            &behavior,
            &states,
            &actions,
            0.5,
            1.0,
            ClipOrder::ClipThenMean,
        )
        .unwrap();
        assert_eq!(proj.coefficient, 1.0);
        assert!((0.5..=1.0).contains(&proj.tau));
        // Oracle: with coefficient one the level is the clipped mean of the
        // policy's own densities.
        let dens: Vec<f64> =
            policy.log_density(&states, &actions).unwrap().iter().map(|l| l.exp()).collect();
        let want = dens.iter().map(|d| d.clamp(0.5, 1.0)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(proj.tau, want, epsilon = 1e-15);
    }

    #[test]
    fn clip_orders_differ_when_densities_straddle_the_interval() {
        // A narrow state-independent gaussian: zero out the output layer so
        // the head is its bias, mean 0 and log-std -3 (sigma ~ 0.05). The
        // on-mean density is ~8 (clips to 1), the far action's is ~0 (clips
        // to 0.5), so clip-then-mean gives 0.75 while mean-then-clip sees
        // a raw mean of ~4 and saturates at 1.
        let mut net = MlpParams::init(&[1, 4, 2], Activation::Relu, 7).unwrap();
        let last = net.layers_mut().last_mut().unwrap();
        for w in last.weight.data_mut() {
            *w = 0.0;
        }
        last.bias.data_mut().copy_from_slice(&[0.0, -3.0]);
        let policy = PolicyNet::gaussian(net).unwrap();
        let behavior = policy.clone();

        let states = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let actions =
            ActionBatch::Continuous(Tensor::from_rows(&[vec![0.0], vec![0.35]]).unwrap());
        let dens: Vec<f64> =
            policy.log_density(&states, &actions).unwrap().iter().map(|l| l.exp()).collect();
        assert!(dens[0] > 1.0 && dens[1] < 1e-6, "{dens:?}");

        let a = tau_projection(&policy, &behavior, &states, &actions, 0.5, 1.0, ClipOrder::ClipThenMean).unwrap();
        let b = tau_projection(&policy, &behavior, &states, &actions, 0.5, 1.0, ClipOrder::MeanThenClip).unwrap();
        // Identical vectors make the projection coefficient exactly one.
        assert_eq!(a.coefficient, 1.0);
        assert_abs_diff_eq!(a.tau, 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(b.tau, 1.0);
        assert!((a.tau - b.tau).abs() > 0.1);
    }

    #[test]
    fn matching_policies_reduce_ratio_weighting_to_plain_weighting() {
        // With the learned policy equal to the behavior model, importance
        // ratios are exactly one, so the ratio-weighted policy loss and its
        // gradient coincide bit for bit with the ratio-free objective.
        let (policy, behavior) = gaussian_pair(11);
        let states = Tensor::from_rows(&[vec![0.4, -0.3], vec![0.0, 0.9], vec![1.2, 0.1]]).unwrap();
        let actions = ActionBatch::Continuous(
            Tensor::from_rows(&[vec![0.2, 0.2], vec![-0.4, 0.0], vec![0.1, -0.3]]).unwrap(),
        );
        let advantages = [0.3, -0.1, 0.05];
        let log_phi = policy.log_density(&states, &actions).unwrap();
        let log_beta = behavior.log_density(&states, &actions).unwrap();
        let ratios = importance_ratios(&log_phi, &log_beta, 1e-8);
        assert!(ratios.iter().all(|&r| r == 1.0), "{ratios:?}");

        let with_ratio = extraction_weights(&advantages, Some(&ratios), 10.0, 100.0);
        let without = extraction_weights(&advantages, None, 10.0, 100.0);
        assert_eq!(with_ratio, without);

        let grad_of = |weights: &[f64]| {
            let mut tape = Tape::new();
            let (loss, binding) =
                policy_loss_graph(&mut tape, &policy, &states, &actions, weights).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).as_scalar().unwrap(), binding.extract(&grads, policy.net()))
        };
        let (la, ga) = grad_of(&with_ratio);
        let (lb, gb) = grad_of(&without);
        assert_eq!(la, lb);
        assert_eq!(ga.flatten(), gb.flatten());
    }

    #[test]
    fn extraction_weights_cap_and_normalize() {
        let w = extraction_weights(&[0.1, -0.2, 5.0], None, 10.0, 100.0);
        assert_abs_diff_eq!(w[0], 1.0f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], (-2.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(w[2], 100.0);

        let ratios = [2.0, 1.0, 1.0];
        let w = extraction_weights(&[0.0, 0.0, 0.0], Some(&ratios), 10.0, 100.0);
        // Ratios scaled to mean one: [1.5, 0.75, 0.75].
        assert_abs_diff_eq!(w[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0] + w[1] + w[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn importance_ratios_apply_the_floor() {
        let r = importance_ratios(&[0.0, 0.0], &[0.0, -1000.0], 1e-8);
        assert_abs_diff_eq!(r[0], 1.0);
        assert_abs_diff_eq!(r[1], 1e8, epsilon = 1.0);
    }

    #[test]
    fn value_loss_matches_asymmetric_formula_and_gradient() {
        let v = MlpParams::init(&[3, 6, 1], Activation::Relu, 7).unwrap();
        let states = one_hot(&[0, 1, 2, 0], 3);
        let q_hat = [0.8, -0.3, 0.5, 0.1];
        let tau = 0.7;

        let mut tape = Tape::new();
        let (loss, _) = value_loss_graph(&mut tape, &v, &states, &q_hat, tau).unwrap();
        let got = tape.value(loss).as_scalar().unwrap();
        let v_out = crate::numerics::forward(&v, &states, None).unwrap();
        let want: f64 = (0..4)
            .map(|i| crate::expectile::l2_tau(q_hat[i] - v_out.at2(i, 0), tau))
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);

        let flat0 = v.flatten();
        let f = |flat: &[f64]| {
            let p = v.unflatten(flat).unwrap();
            let mut tape = Tape::new();
            let (loss, binding) = value_loss_graph(&mut tape, &p, &states, &q_hat, tau).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).as_scalar().unwrap(), binding.extract(&grads, &p).flatten())
        };
        let report = grad_check(&f, &flat0, 1e-6, 1e-6);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let q = MlpParams::init(&[4, 6, 1], Activation::Relu, 11).unwrap();
        let inputs =
            Tensor::from_rows(&[vec![1.0, 0.0, 0.3, -0.2], vec![0.0, 1.0, -0.5, 0.8]]).unwrap();
        let targets = [0.25, -0.75];
        let flat0 = q.flatten();
        let f = |flat: &[f64]| {
            let p = q.unflatten(flat).unwrap();
            let mut tape = Tape::new();
            let (loss, binding) = critic_loss_graph(&mut tape, &p, &inputs, &targets).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).as_scalar().unwrap(), binding.extract(&grads, &p).flatten())
        };
        let report = grad_check(&f, &flat0, 1e-6, 1e-6);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn policy_loss_gradient_matches_finite_differences() {
        let net = MlpParams::init(&[2, 6, 4], Activation::Relu, 13).unwrap();
        let policy = PolicyNet::gaussian(net).unwrap();
        let states = Tensor::from_rows(&[vec![0.2, 0.4], vec![-0.6, 0.1]]).unwrap();
        let actions = ActionBatch::Continuous(
            Tensor::from_rows(&[vec![0.3, -0.1], vec![0.0, 0.2]]).unwrap(),
        );
        let weights = [1.4, 0.6];
        let flat0 = policy.net().flatten();
        let f = |flat: &[f64]| {
            let mut p = policy.clone();
            *p.net_mut() = policy.net().unflatten(flat).unwrap();
            let mut tape = Tape::new();
            let (loss, binding) =
                policy_loss_graph(&mut tape, &p, &states, &actions, &weights).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).as_scalar().unwrap(), binding.extract(&grads, p.net()).flatten())
        };
        let report = grad_check(&f, &flat0, 1e-6, 1e-6);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn soft_update_interpolates_linearly() {
        let online = MlpParams::init(&[2, 3, 1], Activation::Relu, 17).unwrap();
        let mut target = MlpParams::init(&[2, 3, 1], Activation::Relu, 19).unwrap();
        let before = target.flatten();
        let rate = 0.25;
        soft_update(&mut target, &online, rate);
        let after = target.flatten();
        for ((b, a), o) in before.iter().zip(&after).zip(online.flatten()) {
            assert_abs_diff_eq!(*a, 0.75 * b + 0.25 * o, epsilon = 1e-15);
        }
        // Rate one copies the online net exactly.
        soft_update(&mut target, &online, 1.0);
        assert_eq!(target.flatten(), online.flatten());
    }
}
