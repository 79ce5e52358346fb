//! Markov-game bookkeeping: per-image trajectories, rewards, and GAE.
//!
//! Every non-class token entering a pruning layer is an agent. An agent's
//! episode is the chain of its steps across consecutive pruning layers; it ends
//! when the token is pruned or at the last pruning layer.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::pruning::{PRESERVE, PRUNE};

/// One agent's decision at one pruning layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep<F> {
    /// 0-based pruning layer.
    pub layer: usize,
    pub token: usize,
    pub state_feature: Vec<F>,
    pub global_feature: Vec<F>,
    pub action: u8,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub advantage: f64,
    pub return_to_go: f64,
}

impl<F> AgentStep<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layer: usize,
        token: usize,
        state_feature: Vec<F>,
        global_feature: Vec<F>,
        action: u8,
        log_prob: f64,
        value: f64,
        last_layer: bool,
    ) -> Self {
        Self {
            layer,
            token,
            state_feature,
            global_feature,
            action,
            log_prob,
            value,
            reward: 0.0,
            done: action == PRUNE || last_layer,
            advantage: 0.0,
            return_to_go: 0.0,
        }
    }
}

/// The trajectory `S^1, A^1, R^1, ..., S^L, A^L, R^L` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub image_id: usize,
    /// Agent steps per pruning layer, ascending token index.
    pub layers: Vec<Vec<AgentStep<F>>>,
    /// Kept non-class tokens after each pruning layer (`n^l`).
    pub n_kept: Vec<usize>,
    /// 1 if the image was classified correctly.
    pub gamma_correct: u8,
}

impl<F> Trajectory<F> {
    pub fn new(image_id: usize) -> Self {
        Self {
            image_id,
            layers: Vec::new(),
            n_kept: Vec::new(),
            gamma_correct: 0,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &AgentStep<F>> {
        self.layers.iter().flatten()
    }

    /// Fills `n^l` from the recorded actions: the preserved agents of each layer.
    pub fn count_kept(&mut self) {
        self.n_kept = self
            .layers
            .iter()
            .map(|l| l.iter().filter(|s| s.action == PRESERVE).count())
            .collect();
    }
}

/// Which agents receive the accuracy reward `r2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Scope {
    #[default]
    AllAgents,
    PreservedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub r2_scope: R2Scope,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            r2_scope: R2Scope::AllAgents,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "reward weights must be non-negative with positive sum (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// 1 iff the arg-max class (lowest index on ties) equals `label`.
pub fn compute_gamma<F: Scalar>(logits: &[F], label: usize) -> u8 {
    u8::from(argmax(logits) == label)
}

pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Efficiency reward: 0 for pruning, -1 for preserving.
pub fn r1(action: u8) -> f64 {
    if action == PRUNE {
        0.0
    } else {
        -1.0
    }
}

/// Fills `R = alpha * r1 + beta * r2` for every agent, with `r2 = gamma / n^l`.
///
/// Requires `gamma_correct` and `n_kept` to be set. A layer with `n^l = 0`
/// contributes no `r2`.
pub fn compute_rewards<F>(traj: &mut Trajectory<F>, cfg: &RewardConfig) -> Result<()> {
    if traj.n_kept.len() != traj.layers.len() {
        return Err(Error::Invariant(format!(
            "{} kept counts for {} layers",
            traj.n_kept.len(),
            traj.layers.len()
        )));
    }
    let gamma = traj.gamma_correct as f64;
    for (layer, &n) in traj.layers.iter_mut().zip(&traj.n_kept) {
        let shared = if n == 0 { 0.0 } else { gamma / n as f64 };
        for step in layer {
            let r2 = match cfg.r2_scope {
                R2Scope::AllAgents => shared,
                R2Scope::PreservedOnly if step.action == PRESERVE => shared,
                R2Scope::PreservedOnly => 0.0,
            };
            step.reward = cfg.alpha * r1(step.action) + cfg.beta * r2;
        }
    }
    Ok(())
}

/// Generalized advantage estimation along each agent's episode.
///
/// `delta_t = r_t + gamma_d * V(s_{t+1}) * (1 - done_t) - V(s_t)` and
/// `A_t = delta_t + gamma_d * lambda * (1 - done_t) * A_{t+1}`;
/// `return_to_go = A_t + V(s_t)`.
pub fn gae<F>(traj: &mut Trajectory<F>, gamma_d: f64, lambda: f64) -> Result<()> {
    let layers = traj.layers.len();
    for l in (0..layers).rev() {
        let (head, tail) = traj.layers.split_at_mut(l + 1);
        let next: HashMap<usize, (f64, f64)> = tail
            .first()
            .map(|n| n.iter().map(|s| (s.token, (s.value, s.advantage))).collect())
            .unwrap_or_default();
        for step in &mut head[l] {
            let (delta, carry) = if step.done {
                (step.reward - step.value, 0.0)
            } else {
                let &(v_next, a_next) = next.get(&step.token).ok_or_else(|| {
                    Error::Invariant(format!(
                        "token {} preserved at layer {l} but missing at layer {}",
                        step.token,
                        l + 1
                    ))
                })?;
                (step.reward + gamma_d * v_next - step.value, gamma_d * lambda * a_next)
            };
            step.advantage = delta + carry;
            step.return_to_go = step.advantage + step.value;
        }
    }
    Ok(())
}

/// Shifts and scales to mean 0, standard deviation 1 (population, `+1e-8`).
/// Left untouched for fewer than two entries.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / denom);
}

/// Writes `image_id,layer,token,action,reward,value,advantage` rows.
pub fn dump_csv<F, W: Write>(trajectories: &[Trajectory<F>], mut out: W) -> std::io::Result<()> {
    writeln!(out, "image_id,layer,token,action,reward,value,advantage")?;
    for t in trajectories {
        for s in t.steps() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.image_id,
                s.layer + 1,
                s.token,
                s.action,
                s.reward,
                s.value,
                s.advantage
            )?;
        }
    }
    Ok(())
}
