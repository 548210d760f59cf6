use crate::diffcore::{Tape, Var};
use crate::error::{DarlError, Result};

/// Reversal scale `2 / (1 + e^{-10p}) - 1 = tanh(5p)` with `p = min(step / ramp, 1)`.
pub fn lambda_schedule(step: u64, ramp: u64) -> f64 {
    let p = (step as f64 / ramp.max(1) as f64).min(1.0);
    (5.0 * p).tanh()
}

/// `y = r + γ(1 - done)·v_next`, element-wise.
pub fn bellman_target(rewards: &[f64], dones: &[f64], gamma: f64, v_next: &[f64]) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(v_next)
        .map(|((r, d), v)| r + gamma * (1.0 - d) * v)
        .collect()
}

/// `½·[mean((Q1 - y)²) + mean((Q2 - y)²)]` with `y` a constant.
pub fn critic_loss(tape: &mut Tape, q1: Var, q2: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(q1).to_vec();
    if shape.iter().product::<usize>() != target.len() {
        return Err(DarlError::dim("critic_loss", format!("Q {shape:?} vs {} targets", target.len())));
    }
    let y = tape.constant(&shape, target.to_vec())?;
    let d1 = tape.sub(q1, y)?;
    let d2 = tape.sub(q2, y)?;
    let s1 = tape.square(d1);
    let s2 = tape.square(d2);
    let m1 = tape.mean(s1);
    let m2 = tape.mean(s2);
    let total = tape.add(m1, m2)?;
    Ok(tape.scale(total, 0.5))
}

/// `mean(α·ln π - min(Q1, Q2))` with `α` held constant.
pub fn actor_loss(tape: &mut Tape, log_prob: Var, q1: Var, q2: Var, alpha: f64) -> Result<Var> {
    let n = tape.shape(log_prob)[0];
    let q = tape.minimum(q1, q2)?;
    let q = tape.reshape(q, &[n])?;
    let weighted = tape.scale(log_prob, alpha);
    let diff = tape.sub(weighted, q)?;
    Ok(tape.mean(diff))
}

/// `mean(-ln α · (ln π + H̄))` with the log-probabilities detached.
pub fn temperature_loss(tape: &mut Tape, log_alpha: Var, log_prob: &[f64], target_entropy: f64) -> Result<Var> {
    if log_prob.is_empty() {
        return Err(DarlError::dim("temperature_loss", "empty batch"));
    }
    let coef = log_prob.iter().map(|lp| lp + target_entropy).sum::<f64>() / log_prob.len() as f64;
    let c = tape.constant(&[1], vec![-coef])?;
    tape.mul(log_alpha, c)
}

/// Cross-entropy of domain labels under the discriminator's log-probabilities.
pub fn discriminator_loss(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(log_probs, labels)
}

/// Confusion loss `-(1/n)·Σ_i ln D_i(z)`, averaged over the batch. Minimal when the
/// discriminator output is uniform.
pub fn adv_confusion_loss(tape: &mut Tape, log_probs: Var) -> Var {
    let m = tape.mean(log_probs);
    tape.scale(m, -1.0)
}
