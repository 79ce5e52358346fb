//! Clipped policy/value objectives, the K-iteration policy update, ViT
//! fine-tuning and the alternating epoch loop.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::game::{compute_gamma, compute_rewards, gae, normalize_advantages, RewardConfig, Trajectory};
use crate::numerics::{AdamState, Graph, ParamSet, Scalar, Tensor};
use crate::pruning::{log_probs_pair, ActMode, ActorNet, CriticNet, PolicyMode, PolicyNets, PolicyPruner};
use crate::rng::{substream, Stream};
use crate::vit::{NoPruning, ViT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eps_theta: f64,
    pub eps_phi: f64,
    /// Policy/value iterations per mini-batch.
    pub k: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub vit_lr: f64,
    pub gamma_d: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub finetune_enabled: bool,
    pub policy_mode: PolicyMode,
    /// Global gradient-norm clip shared by all three optimizers.
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Fill the `wall_seconds` metrics column. Off by default so that metrics
    /// files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps_theta: 0.2,
            eps_phi: 0.2,
            k: 15,
            actor_lr: 5e-5,
            critic_lr: 5e-5,
            vit_lr: 1e-4,
            gamma_d: 0.99,
            lambda: 0.95,
            entropy_coef: 0.01,
            epochs: 2,
            batch_size: 64,
            seed: 0,
            finetune_enabled: true,
            policy_mode: PolicyMode::Mappo,
            max_grad_norm: 10.0,
            normalize_advantages: true,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        let err = |m: String| Err(Error::Config(m));
        if !open_unit(self.eps_theta) || !open_unit(self.eps_phi) {
            return err(format!(
                "eps_theta {} and eps_phi {} must lie in (0, 1)",
                self.eps_theta, self.eps_phi
            ));
        }
        if self.k == 0 || self.batch_size == 0 {
            return err("k and batch_size must be at least 1".into());
        }
        if [self.actor_lr, self.critic_lr, self.vit_lr]
            .iter()
            .any(|lr| lr.is_nan() || *lr <= 0.0)
        {
            return err("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma_d) || !(0.0..=1.0).contains(&self.lambda) {
            return err("gamma_d and lambda must lie in [0, 1]".into());
        }
        if self.entropy_coef < 0.0 || self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return err("entropy_coef must be non-negative and max_grad_norm positive".into());
        }
        self.policy_mode.validate()
    }
}

/// Supervised training of the unpruned ViT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Clip formulas
// ---------------------------------------------------------------------------

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `max((v - R)^2, (clip(v, v_old - eps, v_old + eps) - R)^2)`.
pub fn clipped_value_term(v_new: f64, v_old: f64, ret: f64, eps: f64) -> f64 {
    let unclipped = (v_new - ret).powi(2);
    let clipped = (v_new.clamp(v_old - eps, v_old + eps) - ret).powi(2);
    unclipped.max(clipped)
}

/// Flattened agent steps of one mini-batch with the collection-time snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch<F> {
    pub dim: usize,
    /// Actor inputs `[n, D]`.
    pub states: Vec<F>,
    /// Critic inputs `[n, 2D]` (local ∥ global).
    pub critic_inputs: Vec<F>,
    pub actions: Vec<u8>,
    pub old_log_probs: Vec<f64>,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<F: Scalar> UpdateBatch<F> {
    /// Collects every agent step in trajectory, layer, token order.
    pub fn from_trajectories(trajectories: &[Trajectory<F>], dim: usize, normalize: bool) -> Self {
        let mut b = UpdateBatch {
            dim,
            states: Vec::new(),
            critic_inputs: Vec::new(),
            actions: Vec::new(),
            old_log_probs: Vec::new(),
            old_values: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        for s in trajectories.iter().flat_map(|t| t.steps()) {
            b.states.extend_from_slice(&s.state_feature);
            b.critic_inputs.extend_from_slice(&s.state_feature);
            b.critic_inputs.extend_from_slice(&s.global_feature);
            b.actions.push(s.action);
            b.old_log_probs.push(s.log_prob);
            b.old_values.push(s.value);
            b.advantages.push(s.advantage);
            b.returns.push(s.return_to_go);
        }
        if normalize {
            normalize_advantages(&mut b.advantages);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Policy objective, mean entropy and `∇(L_θ + c·H)` per actor parameter.
#[derive(Debug, Clone)]
pub struct PolicyObjective<F> {
    pub l_theta: f64,
    pub entropy: f64,
    pub grads: Vec<Vec<F>>,
}

/// Value loss and `∇L_φ` per critic parameter.
#[derive(Debug, Clone)]
pub struct ValueLoss<F> {
    pub l_phi: f64,
    pub grads: Vec<Vec<F>>,
}

fn detach_grads<F: Scalar>(params: &ParamSet<F>, grads: Vec<Option<Vec<F>>>) -> Vec<Vec<F>> {
    grads
        .into_iter()
        .zip(params.tensors())
        .map(|(g, t)| g.unwrap_or_else(|| vec![F::zero(); t.numel()]))
        .collect()
}

pub fn policy_objective<F: Scalar>(
    batch: &UpdateBatch<F>,
    actor: &ActorNet<F>,
    eps_theta: f64,
    entropy_coef: f64,
) -> Result<PolicyObjective<F>> {
    let n = batch.len();
    if n == 0 {
        let grads = actor
            .mlp
            .params
            .tensors()
            .iter()
            .map(|t| vec![F::zero(); t.numel()])
            .collect();
        return Ok(PolicyObjective {
            l_theta: 0.0,
            entropy: 0.0,
            grads,
        });
    }
    let mut g = Graph::new();
    let vars = g.bind(&actor.mlp.params, true);
    let x = g.constant(Tensor::new(&[n, batch.dim], batch.states.clone())?);
    let logits = actor.mlp.forward_graph(&mut g, &vars, x);

    let inv_n = 1.0 / n as f64;
    let mut l_theta = 0.0;
    let mut entropy = 0.0;
    let mut seed = Vec::with_capacity(2 * n);
    for (i, pair) in g.value(logits).chunks_exact(2).enumerate() {
        let (lp0, lp1) = log_probs_pair(pair[0].f64(), pair[1].f64());
        let lp = [lp0, lp1];
        let p = [lp0.exp(), lp1.exp()];
        let a = batch.actions[i] as usize;
        let ratio = (lp[a] - batch.old_log_probs[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::PolicyRatioOverflow);
        }
        let adv = batch.advantages[i];
        let unclipped = ratio * adv;
        let term = clipped_surrogate(ratio, adv, eps_theta);
        l_theta += term;
        let h = -(p[0] * lp0 + p[1] * lp1);
        entropy += h;

        // d term / d logit_j through log pi(a): (1[j = a] - p_j), active only
        // when the unclipped branch attains the minimum.
        let dterm = if unclipped <= term { unclipped } else { 0.0 };
        for j in 0..2 {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let d_surr = dterm * (onehot - p[j]);
            let d_ent = -p[j] * (lp[j] + h);
            // Graph gradients are accumulated for descent on the negation.
            seed.push(F::of(-(d_surr + entropy_coef * d_ent) * inv_n));
        }
    }
    let grads = g.backward_with(logits, seed).collect(&vars);
    let grads = detach_grads(&actor.mlp.params, grads)
        .into_iter()
        .map(|v| v.into_iter().map(|x| -x).collect())
        .collect();
    Ok(PolicyObjective {
        l_theta: l_theta * inv_n,
        entropy: entropy * inv_n,
        grads,
    })
}

pub fn value_loss<F: Scalar>(batch: &UpdateBatch<F>, critic: &CriticNet<F>, eps_phi: f64) -> Result<ValueLoss<F>> {
    let n = batch.len();
    if n == 0 {
        let grads = critic
            .mlp
            .params
            .tensors()
            .iter()
            .map(|t| vec![F::zero(); t.numel()])
            .collect();
        return Ok(ValueLoss { l_phi: 0.0, grads });
    }
    let mut g = Graph::new();
    let vars = g.bind(&critic.mlp.params, true);
    let x = g.constant(Tensor::new(&[n, 2 * batch.dim], batch.critic_inputs.clone())?);
    let values = critic.mlp.forward_graph(&mut g, &vars, x);

    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut seed = Vec::with_capacity(n);
    for (i, v) in g.value(values).iter().enumerate() {
        let v = v.f64();
        let (v_old, ret) = (batch.old_values[i], batch.returns[i]);
        let unclipped = (v - ret).powi(2);
        let contribution = clipped_value_term(v, v_old, ret, eps_phi);
        total += contribution;
        // The clipped branch is flat in v whenever it strictly dominates.
        let d = if unclipped >= contribution {
            2.0 * (v - ret)
        } else {
            0.0
        };
        seed.push(F::of(d * inv_n));
    }
    let grads = g.backward_with(values, seed).collect(&vars);
    Ok(ValueLoss {
        l_phi: total * inv_n,
        grads: detach_grads(&critic.mlp.params, grads),
    })
}

/// Adam states for the actor and critic, kept across mini-batches.
#[derive(Debug, Clone)]
pub struct RlOptimizers<F> {
    pub actor: AdamState<F>,
    pub critic: AdamState<F>,
}

impl<F: Scalar> RlOptimizers<F> {
    pub fn new(nets: &PolicyNets<F>, cfg: &TrainConfig) -> Self {
        Self {
            actor: AdamState::new(&nets.actor.mlp.params, cfg.actor_lr),
            critic: AdamState::new(&nets.critic.mlp.params, cfg.critic_lr),
        }
    }
}

/// Loss summary averaged over the K iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlStats {
    pub l_theta: f64,
    pub l_phi: f64,
    pub entropy: f64,
}

fn descend<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: Vec<Vec<F>>,
    sign: f64,
    max_norm: f64,
    opt: &mut AdamState<F>,
) -> Result<()> {
    for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
        let s = F::of(sign);
        t.grad = Some(g.into_iter().map(|v| v * s).collect());
    }
    params.clip_grad_norm(max_norm);
    opt.step(params)
}

/// K iterations of actor ascent and critic descent on a fixed snapshot.
///
/// Returns `None` without touching anything for a policy with no learnable
/// state or an empty batch.
pub fn rl_update<F: Scalar>(
    batch: &UpdateBatch<F>,
    nets: &mut PolicyNets<F>,
    opt: &mut RlOptimizers<F>,
    cfg: &TrainConfig,
) -> Result<Option<RlStats>> {
    if !cfg.policy_mode.is_learnable() || batch.is_empty() {
        return Ok(None);
    }
    let mut sum = RlStats {
        l_theta: 0.0,
        l_phi: 0.0,
        entropy: 0.0,
    };
    for _ in 0..cfg.k {
        let pol = policy_objective(batch, &nets.actor, cfg.eps_theta, cfg.entropy_coef)?;
        let val = value_loss(batch, &nets.critic, cfg.eps_phi)?;
        descend(
            &mut nets.actor.mlp.params,
            pol.grads,
            -1.0,
            cfg.max_grad_norm,
            &mut opt.actor,
        )?;
        descend(
            &mut nets.critic.mlp.params,
            val.grads,
            1.0,
            cfg.max_grad_norm,
            &mut opt.critic,
        )?;
        sum.l_theta += pol.l_theta;
        sum.l_phi += val.l_phi;
        sum.entropy += pol.entropy;
    }
    let k = cfg.k as f64;
    Ok(Some(RlStats {
        l_theta: sum.l_theta / k,
        l_phi: sum.l_phi / k,
        entropy: sum.entropy / k,
    }))
}

/// One pruned forward pass with sampled actions, recorded trajectories and
/// filled rewards, advantages and returns.
#[allow(clippy::too_many_arguments)]
pub fn collect_trajectories<F: Scalar>(
    model: &ViT<F>,
    nets: &PolicyNets<F>,
    images: &Tensor<F>,
    labels: &[usize],
    image_ids: &[usize],
    cfg: &TrainConfig,
    reward: &RewardConfig,
    rng: rand_chacha::ChaCha8Rng,
) -> Result<Vec<Trajectory<F>>> {
    let mut pruner =
        PolicyPruner::new(nets, cfg.policy_mode, ActMode::Train, rng).recording(image_ids, model.config.num_stages());
    let (logits, _) = model.infer(images, &mut pruner, false)?;
    let classes = model.config.num_classes;
    let mut trajectories = pruner.trajectories;
    for (b, t) in trajectories.iter_mut().enumerate() {
        t.gamma_correct = compute_gamma(&logits.values[b * classes..(b + 1) * classes], labels[b]);
        t.count_kept();
        compute_rewards(t, reward)?;
        gae(t, cfg.gamma_d, cfg.lambda)?;
    }
    Ok(trajectories)
}

/// Cross-entropy step on all ViT parameters under deterministic pruning masks.
/// Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<F: Scalar>(
    model: &mut ViT<F>,
    nets: &PolicyNets<F>,
    mode: PolicyMode,
    images: &Tensor<F>,
    labels: &[usize],
    opt: &mut AdamState<F>,
    max_grad_norm: f64,
    rng: rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let mut pruner = PolicyPruner::new(nets, mode, ActMode::Eval, rng);
    supervised_step(model, &mut pruner, images, labels, opt, max_grad_norm)
}

fn supervised_step<F: Scalar>(
    model: &mut ViT<F>,
    hook: &mut dyn crate::vit::PruneHook<F>,
    images: &Tensor<F>,
    labels: &[usize],
    opt: &mut AdamState<F>,
    max_grad_norm: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let out = model.forward(&mut g, &vars, images, hook, false)?;
        let loss = g.cross_entropy(out.logits, labels);
        let value = g.value(loss)[0].f64();
        (value, g.backward(loss).collect(&vars))
    };
    let grads = detach_grads(&model.params, grads);
    descend(&mut model.params, grads, 1.0, max_grad_norm, opt)?;
    Ok(loss)
}

/// Per-epoch record of the unpruned supervised run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Plain supervised training with every token kept.
pub fn pretrain<F: Scalar>(model: &mut ViT<F>, train: &Dataset, cfg: &PretrainConfig) -> Result<Vec<PretrainEpoch>> {
    pretrain_with(model, train, cfg, |_, _| Ok(()))
}

/// [`pretrain`] with a hook that sees the model after every epoch.
pub fn pretrain_with<F: Scalar>(
    model: &mut ViT<F>,
    train: &Dataset,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&ViT<F>, &PretrainEpoch) -> Result<()>,
) -> Result<Vec<PretrainEpoch>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = AdamState::new(&model.params, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = minibatches(train.len(), cfg.batch_size, cfg.seed, epoch as u64);
        for idx in &batches {
            let (images, labels) = train.batch::<F>(idx);
            total +=
                supervised_step(model, &mut NoPruning, &images, &labels, &mut opt, f64::INFINITY)? * idx.len() as f64;
        }
        let record = PretrainEpoch {
            epoch,
            loss: total / train.len() as f64,
        };
        on_epoch(model, &record)?;
        history.push(record);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rl,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Rl => "rl",
            Phase::Finetune => "finetune",
        }
    }
}

/// Odd epochs optimize the policy; even epochs fine-tune the ViT when enabled.
pub fn phase_for_epoch(epoch: usize, finetune_enabled: bool) -> Phase {
    if finetune_enabled && epoch.is_multiple_of(2) {
        Phase::Finetune
    } else {
        Phase::Rl
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub top1: f64,
    pub retention: Vec<f64>,
    pub l_theta: Option<f64>,
    pub l_phi: Option<f64>,
    pub mean_reward: Option<f64>,
    pub wall_seconds: Option<f64>,
}

pub fn metrics_header(num_stages: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "phase".into(), "top1".into()];
    cols.extend((1..=num_stages).map(|i| format!("mean_retention_l{i}")));
    cols.extend(["L_theta", "L_phi", "mean_reward", "wall_seconds"].map(String::from));
    cols.join(",")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut cells = vec![
            self.epoch.to_string(),
            self.phase.as_str().into(),
            format!("{:.6}", self.top1),
        ];
        cells.extend(self.retention.iter().map(|r| format!("{r:.6}")));
        cells.extend([self.l_theta, self.l_phi, self.mean_reward].map(opt_cell));
        cells.push(self.wall_seconds.map(|s| format!("{s:.3}")).unwrap_or_default());
        cells.join(",")
    }
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], num_stages: usize, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", metrics_header(num_stages))?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

/// Owns the model, the policy and all optimizer state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer<F: Scalar> {
    pub model: ViT<F>,
    pub nets: PolicyNets<F>,
    pub cfg: TrainConfig,
    pub reward: RewardConfig,
    pub rl_opt: RlOptimizers<F>,
    pub vit_opt: AdamState<F>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: ViT<F>, nets: PolicyNets<F>, cfg: TrainConfig, reward: RewardConfig) -> Result<Self> {
        cfg.validate()?;
        reward.validate()?;
        if nets.embed_dim() != model.config.embed_dim {
            return Err(Error::Config(format!(
                "policy width {} does not match embed_dim {}",
                nets.embed_dim(),
                model.config.embed_dim
            )));
        }
        let rl_opt = RlOptimizers::new(&nets, &cfg);
        let vit_opt = AdamState::new(&model.params, cfg.vit_lr);
        Ok(Self {
            model,
            nets,
            cfg,
            reward,
            rl_opt,
            vit_opt,
        })
    }

    fn action_rng(&self, epoch: usize, batch: usize) -> rand_chacha::ChaCha8Rng {
        substream(self.cfg.seed, Stream::Actions, ((epoch as u64) << 32) | batch as u64)
    }

    /// Runs epoch `epoch` (1-based) and evaluates on `eval`.
    pub fn run_epoch(&mut self, epoch: usize, train: &Dataset, eval: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let start = Instant::now();
        let phase = phase_for_epoch(epoch, self.cfg.finetune_enabled);
        let batches = minibatches(train.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64);
        let (mut l_theta, mut l_phi, mut updates) = (0.0, 0.0, 0usize);
        let (mut reward_sum, mut agents) = (0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let (images, labels) = train.batch::<F>(idx);
            let rng = self.action_rng(epoch, bi);
            match phase {
                Phase::Rl => {
                    let trajectories = collect_trajectories(
                        &self.model,
                        &self.nets,
                        &images,
                        &labels,
                        idx,
                        &self.cfg,
                        &self.reward,
                        rng,
                    )?;
                    for s in trajectories.iter().flat_map(|t| t.steps()) {
                        reward_sum += s.reward;
                        agents += 1;
                    }
                    let batch = UpdateBatch::from_trajectories(
                        &trajectories,
                        self.model.config.embed_dim,
                        self.cfg.normalize_advantages,
                    );
                    if let Some(stats) = rl_update(&batch, &mut self.nets, &mut self.rl_opt, &self.cfg)? {
                        l_theta += stats.l_theta;
                        l_phi += stats.l_phi;
                        updates += 1;
                    }
                }
                Phase::Finetune => {
                    finetune_step(
                        &mut self.model,
                        &self.nets,
                        self.cfg.policy_mode,
                        &images,
                        &labels,
                        &mut self.vit_opt,
                        self.cfg.max_grad_norm,
                        rng,
                    )?;
                }
            }
        }
        let report = evaluate(
            &self.model,
            &self.nets,
            eval,
            self.cfg.policy_mode,
            self.cfg.seed,
            self.cfg.batch_size,
        )?;
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        Ok(EpochMetrics {
            epoch,
            phase,
            top1: report.top1,
            retention: report.retention,
            l_theta: mean(l_theta, updates),
            l_phi: mean(l_phi, updates),
            mean_reward: mean(reward_sum, agents),
            wall_seconds: self.cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        })
    }

    /// Runs all configured epochs; `on_epoch` sees the trainer after each one.
    pub fn train_loop(
        &mut self,
        train: &Dataset,
        eval: &Dataset,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 1..=self.cfg.epochs {
            let m = self.run_epoch(epoch, train, eval)?;
            on_epoch(self, &m)?;
            history.push(m);
        }
        Ok(history)
    }
}

/// Builds a trainer and runs every epoch.
pub fn train_loop<F: Scalar>(
    train: &Dataset,
    eval: &Dataset,
    model: ViT<F>,
    nets: PolicyNets<F>,
    cfg: &TrainConfig,
    reward: &RewardConfig,
) -> Result<(Trainer<F>, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model, nets, cfg.clone(), *reward)?;
    let history = trainer.train_loop(train, eval, |_, _| Ok(()))?;
    Ok((trainer, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 2.0, 0.2), 2.0);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn value_clip_examples() {
        assert_eq!(clipped_value_term(0.7, 0.7, 0.7, 0.2), 0.0);
        assert!((clipped_value_term(1.5, 1.0, 2.0, 0.1) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn surrogate_is_flat_beyond_the_clip() {
        let eps = 0.2;
        let h = 1e-6;
        for (r, adv) in [(1.0 + 2.0 * eps, 1.0), (1.0 - 2.0 * eps, -1.0)] {
            let d = (clipped_surrogate(r + h, adv, eps) - clipped_surrogate(r - h, adv, eps)) / (2.0 * h);
            assert_eq!(d, 0.0);
        }
        // The unclipped branch stays active on the other side.
        let d = (clipped_surrogate(1.4 + h, -1.0, eps) - clipped_surrogate(1.4 - h, -1.0, eps)) / (2.0 * h);
        assert!((d + 1.0).abs() < 1e-6);
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> UpdateBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |lo: f64, hi: f64| rng.random_range(lo..hi);
        UpdateBatch {
            dim,
            states: (0..n * dim).map(|_| f(-1.0, 1.0)).collect(),
            critic_inputs: (0..n * 2 * dim).map(|_| f(-1.0, 1.0)).collect(),
            actions: (0..n).map(|_| u8::from(f(0.0, 1.0) < 0.5)).collect(),
            old_log_probs: (0..n).map(|_| f(-1.2, -0.3)).collect(),
            old_values: (0..n).map(|_| f(-0.5, 0.5)).collect(),
            advantages: (0..n).map(|_| f(-2.0, 2.0)).collect(),
            returns: (0..n).map(|_| f(-1.0, 1.0)).collect(),
        }
    }

    fn flat(grads: &[Vec<f64>]) -> Vec<f64> {
        grads.iter().flatten().copied().collect()
    }

    fn set_flat(params: &mut ParamSet<f64>, x: &[f64]) {
        let mut off = 0;
        for t in params.tensors_mut() {
            let n = t.numel();
            t.values.copy_from_slice(&x[off..off + n]);
            off += n;
        }
    }

    fn small_nets(dim: usize, seed: u64) -> PolicyNets<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyNets {
            actor: ActorNet {
                mlp: crate::pruning::Mlp::new(&[dim, 6, 2], 0.5, &mut rng),
            },
            critic: CriticNet {
                mlp: crate::pruning::Mlp::new(&[2 * dim, 5, 1], 0.5, &mut rng),
            },
        }
    }

    #[test]
    fn policy_objective_matches_elementwise_oracle_and_gradient() {
        for seed in 0..10 {
            let batch = random_batch(12, 3, seed);
            let nets = small_nets(3, seed);
            let obj = policy_objective(&batch, &nets.actor, 0.2, 0.01).unwrap();

            let logits = nets
                .actor
                .mlp
                .forward(&Tensor::new(&[12, 3], batch.states.clone()).unwrap())
                .unwrap();
            let mut want = 0.0;
            for i in 0..12 {
                let (lp0, lp1) = log_probs_pair(logits.values[2 * i], logits.values[2 * i + 1]);
                let lp = if batch.actions[i] == 1 { lp1 } else { lp0 };
                let r = (lp - batch.old_log_probs[i]).exp();
                let a = batch.advantages[i];
                want += (r * a).min(r.clamp(0.8, 1.2) * a);
            }
            assert!((obj.l_theta - want / 12.0).abs() < 1e-10);

            let mut actor = nets.actor.clone();
            let point: Vec<f64> = actor
                .mlp
                .params
                .tensors()
                .iter()
                .flat_map(|t| t.values.clone())
                .collect();
            let err = grad_check(
                |x| {
                    set_flat(&mut actor.mlp.params, x);
                    let o = policy_objective(&batch, &actor, 0.2, 0.01).unwrap();
                    (o.l_theta + 0.01 * o.entropy, flat(&o.grads))
                },
                &point,
            );
            assert!(err < 1e-4, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn value_loss_matches_elementwise_oracle_and_gradient() {
        for seed in 0..10 {
            let batch = random_batch(12, 3, seed + 50);
            let nets = small_nets(3, seed);
            let loss = value_loss(&batch, &nets.critic, 0.2).unwrap();
            let v = nets
                .critic
                .mlp
                .forward(&Tensor::new(&[12, 6], batch.critic_inputs.clone()).unwrap())
                .unwrap();
            let want: f64 = (0..12)
                .map(|i| {
                    let (vo, r) = (batch.old_values[i], batch.returns[i]);
                    let u = (v.values[i] - r).powi(2);
                    let c = (v.values[i].max(vo - 0.2).min(vo + 0.2) - r).powi(2);
                    u.max(c)
                })
                .sum::<f64>()
                / 12.0;
            assert!((loss.l_phi - want).abs() < 1e-10);

            let mut critic = nets.critic.clone();
            let point: Vec<f64> = critic
                .mlp
                .params
                .tensors()
                .iter()
                .flat_map(|t| t.values.clone())
                .collect();
            let err = grad_check(
                |x| {
                    set_flat(&mut critic.mlp.params, x);
                    let l = value_loss(&batch, &critic, 0.2).unwrap();
                    (l.l_phi, flat(&l.grads))
                },
                &point,
            );
            assert!(err < 1e-4, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn ratio_overflow_is_reported() {
        let mut batch = random_batch(3, 3, 1);
        batch.old_log_probs[1] = -1e6;
        let nets = small_nets(3, 0);
        assert!(matches!(
            policy_objective(&batch, &nets.actor, 0.2, 0.0),
            Err(Error::PolicyRatioOverflow)
        ));
    }

    #[test]
    fn zero_advantages_leave_the_actor_unchanged() {
        let mut batch = random_batch(10, 3, 2);
        batch.advantages.fill(0.0);
        let mut nets = small_nets(3, 2);
        let before = nets.actor.mlp.params.clone();
        let cfg = TrainConfig {
            k: 1,
            entropy_coef: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = RlOptimizers::new(&nets, &cfg);
        rl_update(&batch, &mut nets, &mut opt, &cfg).unwrap().unwrap();
        for (a, b) in before.tensors().iter().zip(nets.actor.mlp.params.tensors()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        // Non-zero advantages move it.
        batch.advantages[0] = 1.0;
        rl_update(&batch, &mut nets, &mut opt, &cfg).unwrap();
        assert_ne!(before.tensors()[0].values, nets.actor.mlp.params.tensors()[0].values);
    }

    #[test]
    fn entropy_alone_moves_the_actor() {
        let mut batch = random_batch(10, 3, 3);
        batch.advantages.fill(0.0);
        let mut nets = small_nets(3, 3);
        let before = nets.actor.mlp.params.clone();
        let cfg = TrainConfig {
            k: 1,
            entropy_coef: 0.5,
            ..TrainConfig::default()
        };
        let mut opt = RlOptimizers::new(&nets, &cfg);
        rl_update(&batch, &mut nets, &mut opt, &cfg).unwrap();
        assert_ne!(before.tensors()[0].values, nets.actor.mlp.params.tensors()[0].values);
    }

    #[test]
    fn random_policy_update_is_a_no_op() {
        let batch = random_batch(10, 3, 4);
        let mut nets = small_nets(3, 4);
        let before = nets.clone();
        let cfg = TrainConfig {
            policy_mode: PolicyMode::Random { keep_prob: 0.5 },
            ..TrainConfig::default()
        };
        let mut opt = RlOptimizers::new(&nets, &cfg);
        assert!(rl_update(&batch, &mut nets, &mut opt, &cfg).unwrap().is_none());
        assert_eq!(before.actor.mlp.params.tensors(), nets.actor.mlp.params.tensors());
    }

    #[test]
    fn epoch_parity() {
        assert_eq!(phase_for_epoch(1, true), Phase::Rl);
        assert_eq!(phase_for_epoch(2, true), Phase::Finetune);
        assert_eq!(phase_for_epoch(2, false), Phase::Rl);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig {
                eps_theta: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                eps_phi: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                k: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let m = EpochMetrics {
            epoch: 2,
            phase: Phase::Finetune,
            top1: 0.5,
            retention: vec![0.75, 0.5],
            l_theta: None,
            l_phi: None,
            mean_reward: None,
            wall_seconds: None,
        };
        let mut out = Vec::new();
        write_metrics_csv(&[m], 2, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,phase,top1,mean_retention_l1,mean_retention_l2,L_theta,L_phi,mean_reward,wall_seconds\n\
             2,finetune,0.500000,0.750000,0.500000,,,,\n"
        );
    }
}
